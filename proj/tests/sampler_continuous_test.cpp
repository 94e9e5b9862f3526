#include <cmath>
#include <sstream>

#include "doctest.h"
#include "nsd/sampler_continuous.hpp"

namespace {

using nsd::ConstraintSet;
using nsd::GaussianMixture;
using nsd::NoiseSchedule;
using nsd::SamplerConfig;
using nsd::SamplingMode;
using nsd::SamplerState;
using nsd::SeededRng;
using nsd::Vec;

class ZeroScore final : public nsd::ScoreModel {
 public:
  explicit ZeroScore(std::size_t d) : d_(d) {}
  std::size_t dim() const override { return d_; }
  Vec score(std::span<const double>, int) const override { return Vec(d_, 0.0); }

 private:
  std::size_t d_;
};

class AlwaysTrue final : public nsd::Constraint {
 public:
  std::string name() const override { return "always"; }
  double residual(std::span<const double>) const override { return 0.0; }
  void residual_gradient(std::span<const double>, std::span<double> g) const override {
    std::fill(g.begin(), g.end(), 0.0);
  }
};

nsd::GmmScoreModel two_blob_model(int steps) {
  return nsd::GmmScoreModel(GaussianMixture::isotropic({{-2.0, 0.0}, {2.0, 1.0}}, 0.3),
                            NoiseSchedule::linear(steps));
}

}  // namespace

TEST_CASE("reverse_step with a zero score and tiny step keeps x") {
  const ZeroScore model(3);
  const NoiseSchedule sched(nsd::ScheduleKind::kLinear, 10, 0.999, 1e-30);
  SamplerState s{{1.0, -2.0, 0.5}, 10, SeededRng(1)};
  const auto next = nsd::reverse_step(s, model, sched);
  CHECK(next.t == 9);
  for (std::size_t i = 0; i < 3; ++i) CHECK(next.x[i] == doctest::Approx(s.x[i]).epsilon(1e-12));
}

TEST_CASE("reverse_step is deterministic given the seed") {
  const auto model = two_blob_model(50);
  const auto& sched = model.schedule();
  SamplerState a{{0.3, 0.1}, 50, SeededRng(9)}, b{{0.3, 0.1}, 50, SeededRng(9)};
  while (a.t > 0) {
    a = nsd::reverse_step(std::move(a), model, sched);
    b = nsd::reverse_step(std::move(b), model, sched);
    CHECK(a.x == b.x);
  }
}

TEST_CASE("reverse steps pull a far-field state toward a single Gaussian") {
  const Vec mu = {1.0, -1.0};
  const nsd::GmmScoreModel model(GaussianMixture::isotropic({mu}, 0.5), NoiseSchedule::linear(100));
  const auto& sched = model.schedule();
  const int n = 1000;
  double before = 0.0, after = 0.0;
  for (int seed = 0; seed < n; ++seed) {
    SamplerState s{{8.0, 8.0}, 100, SeededRng(static_cast<std::uint64_t>(seed))};
    before += nsd::distance(s.x, mu);
    for (int k = 0; k < 20; ++k) s = nsd::reverse_step(std::move(s), model, sched);
    after += nsd::distance(s.x, mu);
  }
  // With the analytic score the drift contracts toward sqrt(1 - beta) mu.
  CHECK(after / n < before / n);
}

TEST_CASE("projected step with an always-satisfied set equals reverse_step") {
  const auto model = two_blob_model(20);
  ConstraintSet cs{std::make_shared<AlwaysTrue>()};
  SamplerState s{{0.5, 0.5}, 20, SeededRng(4)};
  const auto plain = nsd::reverse_step(s, model, model.schedule());
  const auto projected = nsd::projected_reverse_step(s, model, model.schedule(), cs, {}, nullptr);
  CHECK(projected.state.x == plain.x);
  CHECK(projected.candidate == plain.x);
}

TEST_CASE("projected step onto a halfspace is exactly feasible") {
  const auto model = two_blob_model(20);
  const Vec a = {0.3, 0.7};
  ConstraintSet cs{nsd::residual_linear(a, -0.4)};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    SamplerState s{{3.0, 3.0}, 20, SeededRng(seed)};
    const auto out = nsd::projected_reverse_step(s, model, model.schedule(), cs, {}, nullptr);
    CHECK(nsd::dot(a, out.state.x) <= -0.4);
  }
}

TEST_CASE("constrained sampling has no violations while the unconstrained chain does") {
  const auto model = two_blob_model(200);
  ConstraintSet cs{nsd::residual_linear(Vec{1.0, 0.0}, 1.0)};
  SamplerConfig nsd_cfg;
  const auto batch = nsd::sample_constrained(model, model.schedule(), cs, nsd_cfg, 1000, 77);
  REQUIRE(batch.samples.size() == 1000);
  int violations = 0;
  for (const auto& x : batch.samples) violations += !cs.satisfied(x);
  CHECK(violations == 0);
  REQUIRE(batch.trace.entries.size() == 200);
  CHECK(batch.trace.entries.front().t == 199);
  CHECK(batch.trace.entries.back().t == 0);
  for (std::size_t k = 180; k < 200; ++k) CHECK(batch.trace.entries[k].mean_residual < 1e-6);

  SamplerConfig free_cfg;
  free_cfg.mode = SamplingMode::kUnconstrained;
  const auto free = nsd::sample_constrained(model, model.schedule(), cs, free_cfg, 1000, 77);
  int free_violations = 0;
  for (const auto& x : free.samples) free_violations += !cs.satisfied(x);
  CHECK(free_violations >= 50);
  CHECK(free.trace.entries.back().mean_residual > 0.0);
}

TEST_CASE("post-only mode projects only the final state") {
  const auto model = two_blob_model(50);
  ConstraintSet cs{nsd::residual_linear(Vec{1.0, 0.0}, 1.0)};
  SamplerConfig cfg;
  cfg.mode = SamplingMode::kPostOnly;
  const auto batch = nsd::sample_constrained(model, model.schedule(), cs, cfg, 200, 5);
  for (const auto& x : batch.samples) CHECK(cs.satisfied(x));
  double earlier = 0.0;
  for (std::size_t k = 0; k + 1 < batch.trace.entries.size(); ++k) earlier += batch.trace.entries[k].mean_residual;
  CHECK(earlier > 0.0);
}

TEST_CASE("a non-binding constraint leaves the distribution unchanged") {
  const auto model = two_blob_model(100);
  ConstraintSet loose{nsd::residual_linear(Vec{1.0, 0.0}, 50.0)};
  SamplerConfig nsd_cfg, free_cfg;
  free_cfg.mode = SamplingMode::kUnconstrained;
  const auto a = nsd::sample_constrained(model, model.schedule(), loose, nsd_cfg, 2000, 3);
  const auto b = nsd::sample_constrained(model, model.schedule(), ConstraintSet{}, free_cfg, 2000, 1003);
  SeededRng dirs(64);
  CHECK(nsd::sliced_wasserstein(a.samples, b.samples, 64, dirs) < 0.05);
}

TEST_CASE("interleaved projections cost no more than a projection-free chain") {
  const nsd::GmmScoreModel model(GaussianMixture::isotropic({{1.0, 1.0}}, 0.5),
                                 NoiseSchedule(nsd::ScheduleKind::kLinear, 100, 0.999, 0.1, 6.0));
  ConstraintSet cs{nsd::residual_linear(Vec{1.0, 1.0}, 0.0)};
  const auto curves = nsd::compare_projection_cost(model, model.schedule(), cs, {}, 200, 11);
  REQUIRE(curves.t.size() == 100);
  for (std::size_t k = 50; k < 100; ++k) CHECK(curves.projected[k] <= curves.free[k]);
  CHECK(curves.max_final_projected < 1e-6);
}

TEST_CASE("contradictory constraints exhaust the retries") {
  const auto model = two_blob_model(5);
  ConstraintSet bad{nsd::residual_linear(Vec{1.0, 0.0}, -1.0),
                    nsd::residual_linear(Vec{-1.0, 0.0}, -1.0)};
  SamplerConfig cfg;
  cfg.alm.max_outer_iter = 3;
  cfg.alm.max_inner_iter = 5;
  try {
    nsd::sample_constrained(model, model.schedule(), bad, cfg, 2, 1);
    FAIL("expected RetryExhausted");
  } catch (const nsd::RetryExhausted& e) {
    CHECK(e.failed_chains() == 2);
  }
  CHECK_THROWS_AS(nsd::sample_constrained(model, model.schedule(), bad, cfg, 0, 1), std::invalid_argument);
}

TEST_CASE("trace exports as csv") {
  nsd::ViolationTrace trace;
  trace.entries = {{1, 0.5, 1.0}, {0, 0.0, 0.0}};
  std::ostringstream out;
  trace.write_csv(out);
  CHECK(out.str() == "t,mean_residual,max_residual\n1,0.5,1\n0,0,0\n");
}

TEST_CASE("runs are reproducible from the seed") {
  const auto model = two_blob_model(30);
  ConstraintSet cs{nsd::residual_linear(Vec{0.0, 1.0}, 0.5)};
  const auto a = nsd::sample_constrained(model, model.schedule(), cs, {}, 20, 8);
  const auto b = nsd::sample_constrained(model, model.schedule(), cs, {}, 20, 8);
  CHECK(a.samples == b.samples);
}
