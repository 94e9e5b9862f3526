#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace nsd {

/// Dense real vector used for continuous samples, gradients and flattened
/// parameter blocks.
using Vec = std::vector<double>;

/// Probability vector on the (V-1)-simplex. Construction validates the
/// entries; an instance always satisfies `probs >= 0` and `sum == 1` within
/// kSimplexTol.
class SimplexRow {
 public:
  static constexpr double kSimplexTol = 1e-9;

  SimplexRow() = default;
  explicit SimplexRow(std::vector<double> probs);

  /// Uniform distribution over `size` outcomes.
  static SimplexRow uniform(std::size_t size);
  static SimplexRow one_hot(std::size_t size, std::size_t index);
  /// Normalizes nonnegative weights; throws std::domain_error if all are 0.
  static SimplexRow normalized(std::vector<double> weights);

  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  const std::vector<double>& probs() const { return probs_; }
  std::span<const double> span() const { return probs_; }

  /// Lowest index attaining the maximum.
  std::size_t argmax() const;

  friend bool operator==(const SimplexRow&, const SimplexRow&) = default;

 private:
  std::vector<double> probs_;
};

/// Deterministic generator: xoshiro256** seeded through SplitMix64.
///
/// The integer stream (next_u64, uniform, below) is bit-identical on every
/// platform. normal() and gumbel() add std::log/std::sqrt/std::cos, which are
/// bit-identical across platforms that share a libm implementation.
/// std::*_distribution is not used because its output is implementation
/// defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform in the open interval (0, 1).
  double uniform_open();
  /// Standard normal via the Box-Muller transform; the second variate of
  /// each pair is cached.
  double normal();
  /// Gumbel(0, 1): -log(-log(U)).
  double gumbel();
  /// Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t below(std::uint64_t n);
  /// Draws an index from a probability vector (inverse CDF).
  std::size_t categorical(std::span<const double> probs);

  Vec normal_vec(std::size_t dim);

  /// Child generator for stream `stream`; independent of how many draws the
  /// parent has made.
  SeededRng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer. Used for seed derivation.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Vector algebra.
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double squared_distance(std::span<const double> a, std::span<const double> b);
double distance(std::span<const double> a, std::span<const double> b);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
bool all_finite(std::span<const double> a);

/// Numerically stable softmax (max subtracted before exponentiation).
SimplexRow softmax(std::span<const double> logits);
/// log of softmax, computed via log-sum-exp.
Vec log_softmax(std::span<const double> logits);
double log_sum_exp(std::span<const double> values);

/// Entries of q below this floor are clamped before taking logs in kl_div.
inline constexpr double kKlFloor = 1e-12;

/// KL(p || q) = sum p log(p / q). Terms with p = 0 contribute 0; q entries
/// are clamped to >= kKlFloor.
double kl_div(const SimplexRow& p, const SimplexRow& q);

/// Wasserstein-1 distance between two empirical distributions on the line
/// (equal weights within each sample, sizes may differ).
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

/// Sliced Wasserstein-1 distance between sample sets along one direction.
double sliced_wasserstein_along(std::span<const Vec> a, std::span<const Vec> b,
                                std::span<const double> direction);

/// Monte-Carlo sliced Wasserstein-1 over `num_directions` random unit
/// directions drawn from `rng`. Throws std::invalid_argument on empty input
/// or dimension mismatch.
double sliced_wasserstein(std::span<const Vec> a, std::span<const Vec> b,
                          int num_directions, SeededRng& rng);

}  // namespace nsd
