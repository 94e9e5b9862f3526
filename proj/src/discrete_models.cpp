#include "nsd/discrete_models.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace nsd {

DiscreteNoiseSpec DiscreteNoiseSpec::mask(std::size_t data_vocab) {
  if (data_vocab < 1) throw std::invalid_argument("noise: empty vocabulary");
  return {NoiseKind::kMask, SimplexRow::one_hot(data_vocab + 1, data_vocab),
          static_cast<int>(data_vocab)};
}

DiscreteNoiseSpec DiscreteNoiseSpec::uniform(std::size_t vocab) {
  if (vocab < 1) throw std::invalid_argument("noise: empty vocabulary");
  return {NoiseKind::kUniform, SimplexRow::uniform(vocab), std::nullopt};
}

namespace {

void check_input(const DiscreteDenoiser& model, const CategoricalSequence& xt) {
  if (xt.length() != model.length()) {
    throw std::invalid_argument("denoiser: sequence length " +
                                std::to_string(xt.length()) + " != model length " +
                                std::to_string(model.length()));
  }
  if (xt.vocab() != model.noise().vocab()) {
    throw std::invalid_argument("denoiser: vocabulary mismatch");
  }
}

}  // namespace

AnalyticToyDenoiser::AnalyticToyDenoiser(std::vector<Tokens> table,
                                         SimplexRow weights,
                                         DiscreteNoiseSpec noise,
                                         NoiseSchedule schedule)
    : table_(std::move(table)),
      weights_(std::move(weights)),
      noise_(std::move(noise)),
      schedule_(schedule) {
  if (table_.empty()) throw std::invalid_argument("toy denoiser: empty table");
  if (weights_.size() != table_.size()) {
    throw std::invalid_argument("toy denoiser: weight count mismatch");
  }
  length_ = table_.front().size();
  for (const auto& s : table_) {
    if (s.size() != length_) throw std::invalid_argument("toy denoiser: ragged table");
    for (int tok : s) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= noise_.data_vocab()) {
        throw std::invalid_argument("toy denoiser: token outside data vocabulary");
      }
    }
  }
}

std::vector<SimplexRow> AnalyticToyDenoiser::predict(const CategoricalSequence& xt,
                                                     int t) const {
  check_input(*this, xt);
  const double beta = schedule_.beta(t);
  const std::size_t vocab = noise_.vocab();
  // nu . x_t^i per position
  std::vector<double> noise_mass(length_, 0.0);
  for (std::size_t i = 0; i < length_; ++i) {
    noise_mass[i] = dot(noise_.nu.span(), xt.row(i).span());
  }

  const auto log_posterior = [&](double mismatch) {
    std::vector<double> logw(table_.size());
    for (std::size_t k = 0; k < table_.size(); ++k) {
      double s = std::log(weights_[k]);
      for (std::size_t i = 0; i < length_ && std::isfinite(s); ++i) {
        const double hit = xt.row(i)[static_cast<std::size_t>(table_[k][i])];
        const double lik =
            (1.0 - beta) * (hit + mismatch * (1.0 - hit)) + beta * noise_mass[i];
        s += lik > 0.0 ? std::log(lik) : -std::numeric_limits<double>::infinity();
      }
      logw[k] = s;
    }
    return logw;
  };

  auto logw = log_posterior(0.0);
  double lse = log_sum_exp(logw);
  if (!std::isfinite(lse)) {
    logw = log_posterior(kMismatchWeight);
    lse = log_sum_exp(logw);
  }

  std::vector<std::vector<double>> rows(length_, std::vector<double>(vocab, 0.0));
  for (std::size_t k = 0; k < table_.size(); ++k) {
    const double p = std::exp(logw[k] - lse);
    if (p == 0.0) continue;
    for (std::size_t i = 0; i < length_; ++i) rows[i][table_[k][i]] += p;
  }
  std::vector<SimplexRow> out;
  out.reserve(length_);
  for (auto& r : rows) out.push_back(SimplexRow::normalized(std::move(r)));
  return out;
}

BigramDenoiser::BigramDenoiser(DiscreteNoiseSpec noise, NoiseSchedule schedule,
                               std::size_t length)
    : noise_(std::move(noise)), schedule_(schedule), length_(length) {}

BigramDenoiser BigramDenoiser::fit(const std::vector<Tokens>& data,
                                   DiscreteNoiseSpec noise,
                                   NoiseSchedule schedule, double smoothing) {
  if (data.empty()) throw std::invalid_argument("bigram: empty dataset");
  if (!(smoothing > 0.0)) throw std::invalid_argument("bigram: smoothing must be > 0");
  BigramDenoiser model(std::move(noise), schedule, data.front().size());
  const std::size_t v = model.noise_.data_vocab();
  model.start_.assign(v, smoothing);
  model.unigram_.assign(v, smoothing);
  model.transition_.assign(v * v, smoothing);
  for (const auto& seq : data) {
    if (seq.size() != model.length_) throw std::invalid_argument("bigram: ragged dataset");
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i] < 0 || static_cast<std::size_t>(seq[i]) >= v) {
        throw std::invalid_argument("bigram: token outside data vocabulary");
      }
      model.unigram_[seq[i]] += 1.0;
      if (i == 0) model.start_[seq[i]] += 1.0;
      else model.transition_[seq[i - 1] * v + seq[i]] += 1.0;
    }
  }
  const auto normalize = [](std::span<double> row) {
    double s = 0.0;
    for (double x : row) s += x;
    for (double& x : row) x /= s;
  };
  normalize(model.start_);
  normalize(model.unigram_);
  for (std::size_t u = 0; u < v; ++u) {
    normalize(std::span<double>(model.transition_).subspan(u * v, v));
  }
  return model;
}

double BigramDenoiser::transition(int u, int v) const {
  const std::size_t n = noise_.data_vocab();
  return transition_.at(static_cast<std::size_t>(u) * n + static_cast<std::size_t>(v));
}

std::vector<SimplexRow> BigramDenoiser::predict(const CategoricalSequence& xt,
                                                int t) const {
  check_input(*this, xt);
  const std::size_t n = noise_.data_vocab();
  const double beta = schedule_.beta(t);
  const bool masked_noise = noise_.kind == NoiseKind::kMask;

  // Under mask noise a position is observed iff its argmax is a data token;
  // under uniform noise every argmax is a noisy observation.
  std::vector<std::optional<int>> observed(length_);
  for (std::size_t i = 0; i < length_; ++i) {
    const int tok = static_cast<int>(xt.row(i).argmax());
    if (!masked_noise || tok != *noise_.mask_token) observed[i] = tok;
  }

  std::vector<SimplexRow> out;
  out.reserve(length_);
  for (std::size_t i = 0; i < length_; ++i) {
    std::vector<double> p(noise_.vocab(), 0.0);
    if (masked_noise && observed[i]) {
      p[*observed[i]] = 1.0;
      out.emplace_back(std::move(p));
      continue;
    }
    for (std::size_t v = 0; v < n; ++v) {
      double w;
      if (i == 0) w = start_[v];
      else if (observed[i - 1]) w = transition(*observed[i - 1], static_cast<int>(v));
      else w = unigram_[v];
      if (i + 1 < length_ && observed[i + 1]) w *= transition(static_cast<int>(v), *observed[i + 1]);
      if (!masked_noise) {
        w *= (1.0 - beta) * (observed[i] == static_cast<int>(v) ? 1.0 : 0.0) +
             beta / static_cast<double>(n);
      }
      p[v] = w;
    }
    out.push_back(SimplexRow::normalized(std::move(p)));
  }
  return out;
}

std::vector<SimplexRow> discrete_predict(const DiscreteDenoiser& model,
                                         const CategoricalSequence& xt, int t) {
  check_input(model, xt);
  return model.predict(xt, t);
}

}  // namespace nsd
