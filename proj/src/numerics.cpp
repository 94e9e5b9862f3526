#include "nsd/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace nsd {

SimplexRow::SimplexRow(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw std::domain_error("simplex row: empty");
  double total = 0.0;
  for (double p : probs_) {
    if (!std::isfinite(p) || p < 0.0) {
      throw std::domain_error("simplex row: entries must be finite and >= 0");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > kSimplexTol) {
    throw std::domain_error("simplex row: entries sum to " +
                            std::to_string(total));
  }
}

SimplexRow SimplexRow::uniform(std::size_t size) {
  return SimplexRow(std::vector<double>(size, 1.0 / static_cast<double>(size)));
}

SimplexRow SimplexRow::one_hot(std::size_t size, std::size_t index) {
  if (index >= size) throw std::out_of_range("one_hot: index out of range");
  std::vector<double> p(size, 0.0);
  p[index] = 1.0;
  return SimplexRow(std::move(p));
}

SimplexRow SimplexRow::normalized(std::vector<double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) {
      throw std::domain_error("normalized: weights must be finite and >= 0");
    }
    total += w;
  }
  if (!(total > 0.0)) throw std::domain_error("normalized: all weights zero");
  for (double& w : weights) w /= total;
  return SimplexRow(std::move(weights));
}

std::size_t SimplexRow::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs_.size(); ++i) {
    if (probs_[i] > probs_[best]) best = i;
  }
  return best;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t state = seed ^ (stream * 0xd1b54a32d192ed03ULL);
  splitmix64(state);
  return splitmix64(state);
}

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t state = seed;
  for (auto& word : s_) word = splitmix64(state);
}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double SeededRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform_open() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double SeededRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform_open();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double SeededRng::gumbel() { return -std::log(-std::log(uniform_open())); }

std::uint64_t SeededRng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("below: n must be positive");
  // Reject the partial block at the top so every residue is equally likely.
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t draw;
  do {
    draw = next_u64();
  } while (draw >= limit);
  return draw % n;
}

std::size_t SeededRng::categorical(std::span<const double> probs) {
  if (probs.empty()) throw std::invalid_argument("categorical: empty");
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  const double u = uniform() * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}

Vec SeededRng::normal_vec(std::size_t dim) {
  Vec v(dim);
  for (double& x : v) x = normal();
  return v;
}

SeededRng SeededRng::fork(std::uint64_t stream) const {
  return SeededRng(mix_seed(seed_, stream + 1));
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("distance: size mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double distance(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(),
                     [](double v) { return std::isfinite(v); });
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("log_sum_exp: empty");
  const double m = *std::max_element(values.begin(), values.end());
  if (std::isinf(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

SimplexRow softmax(std::span<const double> logits) {
  if (!all_finite(logits)) throw std::domain_error("softmax: non-finite logit");
  if (logits.empty()) throw std::invalid_argument("softmax: empty");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return SimplexRow(std::move(p));
}

Vec log_softmax(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  Vec out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

double kl_div(const SimplexRow& p, const SimplexRow& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_div: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    s += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kKlFloor)));
  }
  // Rounding can leave tiny negative totals when p == q.
  return std::max(s, 0.0);
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) {
    throw std::invalid_argument("wasserstein_1d: empty sample");
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  // Integrate |F_a^{-1}(u) - F_b^{-1}(u)| over the merged quantile grid.
  std::size_t i = 0, j = 0;
  double u = 0.0, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / na;
    const double next_b = static_cast<double>(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    total += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return total;
}

namespace {

void check_sets(std::span<const Vec> a, std::span<const Vec> b) {
  if (a.empty() || b.empty()) {
    throw std::invalid_argument("sliced_wasserstein: empty sample set");
  }
  const std::size_t d = a.front().size();
  for (const auto& v : a) {
    if (v.size() != d) throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  }
  for (const auto& v : b) {
    if (v.size() != d) throw std::invalid_argument("sliced_wasserstein: dimension mismatch");
  }
}

}  // namespace

double sliced_wasserstein_along(std::span<const Vec> a, std::span<const Vec> b,
                                std::span<const double> direction) {
  check_sets(a, b);
  if (direction.size() != a.front().size()) {
    throw std::invalid_argument("sliced_wasserstein: direction dimension mismatch");
  }
  std::vector<double> pa, pb;
  pa.reserve(a.size());
  pb.reserve(b.size());
  for (const auto& v : a) pa.push_back(dot(v, direction));
  for (const auto& v : b) pb.push_back(dot(v, direction));
  return wasserstein_1d(std::move(pa), std::move(pb));
}

double sliced_wasserstein(std::span<const Vec> a, std::span<const Vec> b,
                          int num_directions, SeededRng& rng) {
  check_sets(a, b);
  if (num_directions < 1) {
    throw std::invalid_argument("sliced_wasserstein: need >= 1 direction");
  }
  const std::size_t d = a.front().size();
  double total = 0.0;
  for (int k = 0; k < num_directions; ++k) {
    Vec dir;
    double n = 0.0;
    do {
      dir = rng.normal_vec(d);
      n = norm(dir);
    } while (n < 1e-12);
    for (double& v : dir) v /= n;
    total += sliced_wasserstein_along(a, b, dir);
  }
  return total / num_directions;
}

}  // namespace nsd
