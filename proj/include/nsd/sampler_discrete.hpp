#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "nsd/discrete_models.hpp"
#include "nsd/projections.hpp"
#include "nsd/schedule.hpp"
#include "nsd/sequence.hpp"

namespace nsd {

/// Predicate over decoded token sequences with a residual over relaxed,
/// row-major (L x V) probability rows. On one-hot rows the residual is at
/// most kCheckTol exactly when the predicate holds.
class SequenceConstraint : public Constraint {
 public:
  SequenceConstraint(std::size_t length, std::size_t vocab);

  std::size_t length() const { return length_; }
  std::size_t vocab() const { return vocab_; }

  virtual bool satisfied_tokens(const Tokens& tokens) const = 0;
  /// Predicate on the per-row argmax of `x`.
  bool satisfied(std::span<const double> x) const override;

  /// Constraint-specific exact repair of a decoded sequence; nullopt when
  /// the constraint has none or it fails. `rows` are the distributions the
  /// tokens were drawn from.
  virtual std::optional<Tokens> repair(const Tokens& tokens,
                                       const CategoricalSequence& rows) const;

 protected:
  void check_size(std::span<const double> x) const;

 private:
  std::size_t length_;
  std::size_t vocab_;
};

/// Position `position` must (kRequire) or must not (kForbid) hold `token`.
/// Residual: 1 - x[position][token] or x[position][token].
class TokenAtConstraint final : public SequenceConstraint {
 public:
  enum class Kind { kRequire, kForbid };

  TokenAtConstraint(std::size_t length, std::size_t vocab, std::size_t position,
                    int token, Kind kind);

  std::string name() const override;
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x,
                         std::span<double> grad) const override;
  bool satisfied_tokens(const Tokens& tokens) const override;

 private:
  std::size_t position_;
  int token_;
  Kind kind_;
};

struct GumbelConfig {
  double temperature = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Rows are clamped to at least this value before taking logs.
inline constexpr double kGumbelFloor = 1e-12;

/// psi(v) = softmax((log row(v) + g_v) / T) with g ~ Gumbel(0, 1) drawn from
/// cfg.seed.
SimplexRow gumbel_softmax(const SimplexRow& row, const GumbelConfig& cfg);
/// Same, drawing the noise from `rng`.
SimplexRow gumbel_softmax(const SimplexRow& row, double temperature, SeededRng& rng);

/// Each row becomes (1 - beta) x0 + beta nu.
CategoricalSequence forward_marginal(const CategoricalSequence& x0,
                                     const DiscreteNoiseSpec& noise, double beta);

/// Masked-noise reverse step from t to t - 1. Unmasked positions are copied;
/// a masked position is drawn from the row
/// (beta(t-1)/beta(t)) nu + ((beta(t) - beta(t-1))/beta(t)) prediction.
/// `prediction` overrides the denoiser output when given.
CategoricalSequence reverse_step_masked(
    const CategoricalSequence& xt, const DiscreteDenoiser& d,
    const NoiseSchedule& sched, int t, SeededRng& rng,
    const std::vector<SimplexRow>* prediction = nullptr);

/// Uniform-noise reverse step from t to s = t - 1. Position i is drawn from
/// sum_u p(u) q(x_s | x_t, x_0 = u) where p is the prediction and
/// q(x_s = v | x_t = w, x_0 = u) is proportional to
/// (a delta_vw + (1 - a)/V) ((1 - beta_s) delta_vu + beta_s / V), with
/// a = (1 - beta_t) / (1 - beta_s).
CategoricalSequence reverse_step_uniform(
    const CategoricalSequence& xt, const DiscreteDenoiser& d,
    const NoiseSchedule& sched, int t, SeededRng& rng,
    const std::vector<SimplexRow>* prediction = nullptr);

/// The row distribution reverse_step_uniform samples from.
SimplexRow uniform_posterior_row(std::size_t observed, const SimplexRow& prediction,
                                 double beta_t, double beta_s);

/// Minimal-KL(x || y) distribution y whose argmax is `token`, ties going to
/// `token`. Entries above the pooled mean are pooled with `token`.
SimplexRow kl_project_argmax(const SimplexRow& x, std::size_t token);

struct KlProjectionOptions {
  /// Rows that must not move (e.g. already unmasked positions).
  std::vector<bool> frozen;
  /// Tokens >= active_vocab keep (near) zero mass; 0 means all tokens.
  std::size_t active_vocab = 0;
  /// When the relaxed solver does not converge, search up to this many
  /// argmax patterns by flip cost (0 disables the fallback).
  std::size_t search_fallback = 0;
};

/// KL-cost projection of a sequence of rows onto {y : argmax(y) in C}.
///
/// The solver works on logits z, y = softmax(z), with cost sum_i
/// KL(x_i || y_i). Residuals are evaluated on the Gumbel-softmax relaxation
/// of y, with noise redrawn every outer iteration, and termination requires
/// the constraints to hold on argmax(y). Once a feasible argmax pattern is
/// found each row is replaced by kl_project_argmax(x_i, pattern_i).
/// Relaxed gradients vanish on saturated rows, so options.search_fallback
/// can hand a stalled solve to best_first_search instead. A result with converged = false carries the solver's best rows.
ProjectionResult kl_project_sequence(const CategoricalSequence& xt,
                                     const ConstraintSet& cs, const AlmConfig& cfg,
                                     const GumbelConfig& gcfg,
                                     const KlProjectionOptions& options = {});

/// Cost of choosing token v at a row: log x[argmax] - log x[v] (clamped).
double flip_cost(const SimplexRow& row, std::size_t v);

struct SearchResult {
  Tokens tokens;
  double cost = 0.0;
  std::size_t expansions = 0;
};

/// Best-first enumeration of sequences in nondecreasing total flip cost
/// relative to `rows`, returning the cheapest one for which `goal` holds.
/// Costs within 1e-12 count as equal and then the lexicographically smallest
/// sequence wins. Only tokens < vocab_limit (0: all) are considered.
/// nullopt if nothing is found within max_expansions pops.
std::optional<SearchResult> best_first_search(
    const CategoricalSequence& rows, const std::function<bool(const Tokens&)>& goal,
    std::size_t vocab_limit = 0, std::size_t max_expansions = 1'000'000);

enum class DiscreteMode { kNsd, kUnconstrained, kPostOnly };

struct DiscreteSamplerConfig {
  DiscreteMode mode = DiscreteMode::kNsd;
  AlmConfig alm;
  GumbelConfig gumbel;
  int retry_cap = 5;
  std::size_t search_budget = 200'000;
  /// Pops allowed when checking that the unmasked tokens still admit a
  /// feasible completion before each projection.
  std::size_t feasibility_budget = 5'000;
};

struct DiscreteSampleBatch {
  std::vector<Tokens> sequences;
  /// Chains whose decoded output needed the exact repair at t = 0.
  std::size_t repaired = 0;
  /// Per-step projections that did not converge.
  std::size_t projection_failures = 0;
  std::size_t retries = 0;
};

/// Runs n reverse chains from the all-nu state (mask noise: all masks;
/// uniform noise: uniform random tokens). In kNsd mode the predicted rows
/// are projected with kl_project_sequence before each draw; in kNsd and
/// kPostOnly modes the final sequence is repaired exactly if it still
/// violates a constraint. Every constraint must be a SequenceConstraint.
DiscreteSampleBatch sample_discrete_constrained(const DiscreteDenoiser& d,
                                                const NoiseSchedule& sched,
                                                const ConstraintSet& cs,
                                                const DiscreteSamplerConfig& cfg,
                                                std::size_t n, std::uint64_t seed);

/// Whether every constraint in cs holds for `tokens`.
bool sequence_satisfies(const ConstraintSet& cs, const Tokens& tokens);

}  // namespace nsd
