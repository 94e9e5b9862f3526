#pragma once

#include <optional>
#include <vector>

#include "nsd/numerics.hpp"
#include "nsd/schedule.hpp"
#include "nsd/sequence.hpp"

namespace nsd {

enum class NoiseKind { kMask, kUniform };

/// Stationary corruption distribution nu. For kMask the vocabulary carries a
/// reserved mask token and nu is one-hot on it; for kUniform nu is uniform.
struct DiscreteNoiseSpec {
  NoiseKind kind;
  SimplexRow nu;
  std::optional<int> mask_token;

  /// `data_vocab` real tokens plus a mask token with id `data_vocab`.
  static DiscreteNoiseSpec mask(std::size_t data_vocab);
  static DiscreteNoiseSpec uniform(std::size_t vocab);

  std::size_t vocab() const { return nu.size(); }
  /// Number of tokens that can appear in clean data.
  std::size_t data_vocab() const { return kind == NoiseKind::kMask ? vocab() - 1 : vocab(); }
};

/// Predicts, per position, a distribution over clean tokens given x_t.
class DiscreteDenoiser {
 public:
  virtual ~DiscreteDenoiser() = default;
  virtual std::size_t length() const = 0;
  virtual const DiscreteNoiseSpec& noise() const = 0;
  virtual std::vector<SimplexRow> predict(const CategoricalSequence& xt,
                                          int t) const = 0;
};

/// Exact Bayesian posterior over a finite table of clean sequences.
///
/// The likelihood of x_t under clean sequence s is the forward marginal
/// prod_i x_t^i . ((1 - beta) e_{s_i} + beta nu), so for sampled (one-hot)
/// states under mask noise only the unmasked positions carry evidence. When
/// no table entry is consistent with the evidence (possible after a
/// constraint projection moved x_t off the table), mismatches are weighted by
/// kMismatchWeight instead of 0.
class AnalyticToyDenoiser final : public DiscreteDenoiser {
 public:
  static constexpr double kMismatchWeight = 1e-3;

  AnalyticToyDenoiser(std::vector<Tokens> table, SimplexRow weights,
                      DiscreteNoiseSpec noise, NoiseSchedule schedule);

  std::size_t length() const override { return length_; }
  const DiscreteNoiseSpec& noise() const override { return noise_; }
  std::vector<SimplexRow> predict(const CategoricalSequence& xt,
                                  int t) const override;

  const std::vector<Tokens>& table() const { return table_; }
  const SimplexRow& weights() const { return weights_; }

 private:
  std::vector<Tokens> table_;
  SimplexRow weights_;
  DiscreteNoiseSpec noise_;
  NoiseSchedule schedule_;
  std::size_t length_;
};

/// Position-independent bigram model fitted by smoothed counting. Unobserved
/// positions are predicted from their observed neighbours:
/// p(v) ~ P(v | left) P(right | v), with the start distribution at position 0
/// and the unigram distribution when the left neighbour is unknown.
class BigramDenoiser final : public DiscreteDenoiser {
 public:
  static BigramDenoiser fit(const std::vector<Tokens>& data,
                            DiscreteNoiseSpec noise, NoiseSchedule schedule,
                            double smoothing = 0.5);

  std::size_t length() const override { return length_; }
  const DiscreteNoiseSpec& noise() const override { return noise_; }
  std::vector<SimplexRow> predict(const CategoricalSequence& xt,
                                  int t) const override;

  /// P(v | u) over data tokens.
  double transition(int u, int v) const;

 private:
  BigramDenoiser(DiscreteNoiseSpec noise, NoiseSchedule schedule,
                 std::size_t length);

  DiscreteNoiseSpec noise_;
  NoiseSchedule schedule_;
  std::size_t length_;
  std::vector<double> start_;
  std::vector<double> unigram_;
  std::vector<double> transition_;  // row-major data_vocab x data_vocab
};

/// discrete_predict: checks the sequence length and delegates to the model.
std::vector<SimplexRow> discrete_predict(const DiscreteDenoiser& model,
                                         const CategoricalSequence& xt, int t);

}  // namespace nsd
