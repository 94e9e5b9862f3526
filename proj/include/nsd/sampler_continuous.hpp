#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <iosfwd>
#include <stdexcept>
#include <vector>

#include "nsd/models.hpp"
#include "nsd/numerics.hpp"
#include "nsd/projections.hpp"
#include "nsd/schedule.hpp"

namespace nsd {

struct SamplerState {
  Vec x;
  int t;
  SeededRng rng;
};

/// Aggregate residual of the batch after each reverse step. Entry k holds the
/// state at step index t = T - 1 - k.
struct ViolationTrace {
  struct Entry {
    int t;
    double mean_residual;
    double max_residual;
  };
  std::vector<Entry> entries;

  /// Columns t,mean_residual,max_residual.
  void write_csv(std::ostream& out) const;
};

/// x <- x + gamma_t s(x, t) + sqrt(2 gamma_t) eps; t <- t - 1.
SamplerState reverse_step(SamplerState state, const ScoreModel& model,
                          const NoiseSchedule& sched);

struct ProjectedStep {
  SamplerState state;
  Vec candidate;
  ProjectionResult projection;
};

/// reverse_step followed by project_onto. Throws NonConvergence when the
/// projection does not converge.
ProjectedStep projected_reverse_step(SamplerState state, const ScoreModel& model,
                                     const NoiseSchedule& sched,
                                     const ConstraintSet& cs, const AlmConfig& cfg,
                                     AlmWarmState* warm);

enum class SamplingMode {
  kNsd,            // project after every step (or the last fraction of steps)
  kUnconstrained,  // never project
  kPostOnly,       // project once, after the final step
};

using Projector = std::function<ProjectionResult(std::span<const double>, const ConstraintSet&,
                                                 const AlmConfig&, AlmWarmState*)>;

struct SamplerConfig {
  SamplingMode mode = SamplingMode::kNsd;
  /// Projection applied by the sampler; project_onto when empty.
  Projector projector;
  /// Fraction of the final steps that are projected in kNsd mode.
  double project_fraction = 1.0;
  int retry_cap = 5;
  /// When false, chains that exhaust their retries are kept (with the
  /// solver's best point) and counted in SampleBatch::failed_chains.
  bool throw_on_exhaustion = true;
  AlmConfig alm;
};

struct SampleBatch {
  std::vector<Vec> samples;
  ViolationTrace trace;
  /// Chains rerun with fresh noise after a failed final projection.
  std::size_t retries = 0;
  /// Projections at intermediate steps that did not converge; the chain
  /// continued from the solver's best point.
  std::size_t intermediate_failures = 0;
  std::size_t failed_chains = 0;
};

/// Runs n_samples chains from x_T ~ N(0, I). Chain i uses the generator
/// SeededRng(mix_seed(seed, i)) so runs in different modes are paired. A
/// chain whose final projection fails is rerun with fresh noise up to
/// retry_cap times; RetryExhausted reports how many chains never succeeded.
SampleBatch sample_constrained(const ScoreModel& model, const NoiseSchedule& sched,
                               const ConstraintSet& cs, const SamplerConfig& cfg,
                               std::size_t n_samples, std::uint64_t seed);

/// Mean distance ||y - P(y)|| per step t = T..1 for paired chains: `projected`
/// measures the candidate of the interleaved chain before its projection,
/// `free` the state of a chain that is never projected.
struct ProjectionCostCurves {
  std::vector<int> t;
  std::vector<double> projected;
  std::vector<double> free;
  /// Largest final-step distance over the interleaved chains.
  double max_final_projected = 0.0;
};

ProjectionCostCurves compare_projection_cost(const ScoreModel& model,
                                             const NoiseSchedule& sched,
                                             const ConstraintSet& cs,
                                             const AlmConfig& cfg,
                                             std::size_t n_chains,
                                             std::uint64_t seed);

}  // namespace nsd
