#include "nsd/sampler_continuous.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

namespace nsd {

void ViolationTrace::write_csv(std::ostream& out) const {
  out << "t,mean_residual,max_residual\n";
  char buf[96];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", e.t, e.mean_residual, e.max_residual);
    out << buf;
  }
}

SamplerState reverse_step(SamplerState state, const ScoreModel& model,
                          const NoiseSchedule& sched) {
  const double gamma = sched.eval(state.t).gamma;
  const Vec score = model.score(state.x, state.t);
  if (score.size() != state.x.size()) throw std::invalid_argument("reverse_step: score dimension mismatch");
  const double noise_scale = std::sqrt(2.0 * gamma);
  for (std::size_t i = 0; i < state.x.size(); ++i) {
    state.x[i] += gamma * score[i] + noise_scale * state.rng.normal();
  }
  if (!all_finite(state.x)) throw NumericalError("reverse_step: non-finite state");
  --state.t;
  return state;
}

ProjectedStep projected_reverse_step(SamplerState state, const ScoreModel& model,
                                     const NoiseSchedule& sched,
                                     const ConstraintSet& cs, const AlmConfig& cfg,
                                     AlmWarmState* warm) {
  ProjectedStep out{reverse_step(std::move(state), model, sched), {}, {}};
  out.candidate = out.state.x;
  out.projection = project_onto(out.candidate, cs, cfg, warm);
  if (!out.projection.converged) throw NonConvergence(out.candidate, out.projection);
  out.state.x = out.projection.point;
  return out;
}

namespace {

bool projects_at(const SamplerConfig& cfg, int t_after, int steps) {
  switch (cfg.mode) {
    case SamplingMode::kUnconstrained:
      return false;
    case SamplingMode::kPostOnly:
      return t_after == 0;
    case SamplingMode::kNsd:
      // Steps that land on t_after < ceil(fraction T) are projected; the final
      // step always is.
      return t_after == 0 ||
             t_after < static_cast<int>(std::ceil(cfg.project_fraction * steps));
  }
  return false;
}

struct ChainRun {
  Vec x;
  std::vector<double> residuals;  // after each step
  bool final_failed = false;
  std::size_t intermediate_failures = 0;
};

ChainRun run_chain(const ScoreModel& model, const NoiseSchedule& sched,
                   const ConstraintSet& cs, const SamplerConfig& cfg, SeededRng rng) {
  const int steps = sched.steps();
  ChainRun run;
  run.residuals.reserve(static_cast<std::size_t>(steps));
  Vec x0 = rng.normal_vec(model.dim());
  SamplerState state{std::move(x0), steps, std::move(rng)};
  AlmWarmState warm;
  while (state.t > 0) {
    state = reverse_step(std::move(state), model, sched);
    if (projects_at(cfg, state.t, steps)) {
      auto pr = cfg.projector ? cfg.projector(state.x, cs, cfg.alm, &warm)
                              : project_onto(state.x, cs, cfg.alm, &warm);
      if (!pr.converged) {
        if (state.t == 0) run.final_failed = true;
        else ++run.intermediate_failures;
      }
      state.x = std::move(pr.point);
    }
    run.residuals.push_back(cs.residual(state.x));
  }
  run.x = std::move(state.x);
  return run;
}

}  // namespace

SampleBatch sample_constrained(const ScoreModel& model, const NoiseSchedule& sched,
                               const ConstraintSet& cs, const SamplerConfig& cfg,
                               std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("sample_constrained: n_samples must be >= 1");
  if (cfg.retry_cap < 0) throw std::invalid_argument("sample_constrained: retry_cap must be >= 0");
  if (!(cfg.project_fraction >= 0.0 && cfg.project_fraction <= 1.0)) {
    throw std::invalid_argument("sample_constrained: project_fraction must lie in [0, 1]");
  }
  cfg.alm.validate();
  const int steps = sched.steps();
  SampleBatch batch;
  batch.samples.reserve(n_samples);
  std::vector<double> sum(static_cast<std::size_t>(steps), 0.0);
  std::vector<double> peak(static_cast<std::size_t>(steps), 0.0);
  std::size_t failed = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const SeededRng chain_rng(mix_seed(seed, i));
    ChainRun run;
    for (int attempt = 0;; ++attempt) {
      run = run_chain(model, sched, cs, cfg,
                      attempt == 0 ? chain_rng : chain_rng.fork(static_cast<std::uint64_t>(attempt)));
      batch.intermediate_failures += run.intermediate_failures;
      if (!run.final_failed || attempt >= cfg.retry_cap) break;
      ++batch.retries;
    }
    if (run.final_failed) ++failed;
    for (std::size_t k = 0; k < run.residuals.size(); ++k) {
      sum[k] += run.residuals[k];
      peak[k] = std::max(peak[k], run.residuals[k]);
    }
    batch.samples.push_back(std::move(run.x));
  }
  if (failed > 0 && cfg.throw_on_exhaustion) throw RetryExhausted(failed);
  batch.failed_chains = failed;
  for (int k = 0; k < steps; ++k) {
    batch.trace.entries.push_back({steps - 1 - k, sum[k] / static_cast<double>(n_samples),
                                   peak[k]});
  }
  return batch;
}

ProjectionCostCurves compare_projection_cost(const ScoreModel& model,
                                             const NoiseSchedule& sched,
                                             const ConstraintSet& cs,
                                             const AlmConfig& cfg,
                                             std::size_t n_chains,
                                             std::uint64_t seed) {
  if (n_chains < 1) throw std::invalid_argument("compare_projection_cost: n_chains must be >= 1");
  const int steps = sched.steps();
  ProjectionCostCurves curves;
  curves.projected.assign(static_cast<std::size_t>(steps), 0.0);
  curves.free.assign(static_cast<std::size_t>(steps), 0.0);
  for (int t = steps; t >= 1; --t) curves.t.push_back(t);

  const auto distance_to_set = [&](const Vec& y, AlmWarmState* warm) {
    auto pr = project_onto(y, cs, cfg, warm);
    if (!pr.converged) throw NonConvergence(y, pr);
    return std::make_pair(distance(y, pr.point), std::move(pr.point));
  };

  for (std::size_t c = 0; c < n_chains; ++c) {
    const SeededRng rng(mix_seed(seed, c));
    Vec start = SeededRng(rng).normal_vec(model.dim());
    SamplerState with{start, steps, rng};
    SamplerState without{start, steps, rng};
    with.rng.normal_vec(model.dim());
    without.rng.normal_vec(model.dim());
    AlmWarmState warm;
    for (std::size_t k = 0; with.t > 0; ++k) {
      with = reverse_step(std::move(with), model, sched);
      without = reverse_step(std::move(without), model, sched);
      auto [d_with, projected] = distance_to_set(with.x, &warm);
      curves.projected[k] += d_with;
      curves.free[k] += distance_to_set(without.x, nullptr).first;
      with.x = std::move(projected);
      if (with.t == 0) curves.max_final_projected = std::max(curves.max_final_projected, d_with);
    }
  }
  for (int k = 0; k < steps; ++k) {
    curves.projected[k] /= static_cast<double>(n_chains);
    curves.free[k] /= static_cast<double>(n_chains);
  }
  return curves;
}

}  // namespace nsd
