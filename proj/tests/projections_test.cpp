#include <cmath>
#include <limits>

#include "doctest.h"
#include "nsd/projections.hpp"

namespace {

using nsd::AlmConfig;
using nsd::ConstraintSet;
using nsd::SeededRng;
using nsd::Vec;

// Exact projection onto {a1.y <= b1, a2.y <= b2} in 2-D by enumerating the
// four active sets and keeping the closest feasible KKT candidate.
Vec wedge_oracle(const Vec& x, const Vec& a1, double b1, const Vec& a2, double b2) {
  const auto feasible = [&](const Vec& y) {
    return nsd::dot(a1, y) <= b1 + 1e-12 && nsd::dot(a2, y) <= b2 + 1e-12;
  };
  const auto onto_line = [&](const Vec& a, double b) {
    const double s = (nsd::dot(a, x) - b) / nsd::dot(a, a);
    return Vec{x[0] - s * a[0], x[1] - s * a[1]};
  };
  std::vector<Vec> candidates = {x, onto_line(a1, b1), onto_line(a2, b2)};
  const double det = a1[0] * a2[1] - a1[1] * a2[0];
  if (std::abs(det) > 1e-12) {
    candidates.push_back({(b1 * a2[1] - a1[1] * b2) / det, (a1[0] * b2 - b1 * a2[0]) / det});
  }
  Vec best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) {
    if (!feasible(c)) continue;
    const double d = nsd::squared_distance(c, x);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("closed-form projections") {
  const Vec x = {2.0, 0.5};
  const Vec a = {1.0, 0.0};
  auto y = nsd::project_halfspace(x, a, 1.0);
  CHECK(y[0] == doctest::Approx(1.0));
  CHECK(y[1] == doctest::Approx(0.5));
  const Vec inside = {0.2, 0.3};
  CHECK(nsd::project_halfspace(inside, a, 1.0) == inside);

  const Vec lo = {0.0, 0.0}, hi = {1.0, 1.0};
  y = nsd::project_box(Vec{-1.0, 2.0}, lo, hi);
  CHECK(y == Vec{0.0, 1.0});

  SeededRng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    Vec p = rng.normal_vec(4), n = rng.normal_vec(4);
    for (double& v : p) v *= 1e3;
    const double b = rng.normal();
    const Vec q = nsd::project_halfspace(p, n, b);
    CHECK(nsd::dot(n, q) <= b);
  }
  CHECK_THROWS_AS(nsd::residual_linear(Vec{0.0, 0.0}, 1.0), std::invalid_argument);
}

TEST_CASE("top-k negative projection") {
  const Vec grid = {0.5, -0.2, 0.1, 0.9};
  const Vec y = nsd::project_topk_negative(grid, 2, 1e-3);
  int negatives = 0;
  for (double v : y) negatives += v < 0.0;
  CHECK(negatives == 2);
  CHECK(y[2] == doctest::Approx(-1e-3));
  CHECK(y[0] == 0.5);
  CHECK(y[1] == -0.2);

  const Vec fewer = nsd::project_topk_negative(Vec{-0.5, -0.05, -0.9}, 1, 1e-3);
  CHECK(fewer[0] == doctest::Approx(1e-3));
  CHECK(fewer[1] == doctest::Approx(1e-3));
  CHECK(fewer[2] == -0.9);

  CHECK_THROWS_AS(nsd::project_topk_negative(Vec{1.5}, 0, 1e-3), std::invalid_argument);
}

TEST_CASE("predicates and residuals agree") {
  const auto lin = nsd::residual_linear(Vec{1.0, 1.0}, 1.0);
  CHECK(lin->residual(Vec{0.5, 0.5}) == 0.0);
  CHECK(lin->satisfied(Vec{0.5, 0.5}));
  CHECK(lin->residual(Vec{1.5, 0.5}) == doctest::Approx(1.0));
  CHECK_FALSE(lin->satisfied(Vec{1.5, 0.5}));

  const nsd::BoxConstraint box({-1.0, -1.0}, {1.0, 1.0});
  SeededRng rng(8);
  for (int i = 0; i < 1000; ++i) {
    Vec x = rng.normal_vec(2);
    CHECK(box.satisfied(x) == (std::abs(x[0]) <= 1.0 && std::abs(x[1]) <= 1.0));
    CHECK(box.residual(x) >= 0.0);
  }
}

TEST_CASE("alm config validation") {
  AlmConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.mu0 = 0.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("mu0"), std::invalid_argument);
  cfg = AlmConfig{};
  cfg.alpha = 1.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("alpha"), std::invalid_argument);
}

TEST_CASE("alm projection matches closed forms on box and halfspace") {
  SeededRng rng(101);
  const AlmConfig cfg;
  for (int trial = 0; trial < 200; ++trial) {
    const Vec x = [&] {
      Vec v = rng.normal_vec(3);
      for (double& e : v) e *= 3.0;
      return v;
    }();
    const Vec lo = {-1.0, -0.5, 0.0}, hi = {1.0, 0.5, 2.0};
    ConstraintSet box{std::make_shared<nsd::BoxConstraint>(lo, hi)};
    auto r = nsd::alm_project(x, box, cfg);
    CHECK(r.converged);
    CHECK(r.residual_final <= cfg.delta);
    CHECK(nsd::distance(r.point, nsd::project_box(x, lo, hi)) <= 1e-4);

    const Vec a = rng.normal_vec(3);
    const double b = rng.normal();
    ConstraintSet half{nsd::residual_linear(a, b)};
    r = nsd::alm_project(x, half, cfg);
    CHECK(r.converged);
    CHECK(r.residual_final <= cfg.delta);
    CHECK(nsd::distance(r.point, nsd::project_halfspace(x, a, b)) <= 1e-4);
  }
}

TEST_CASE("alm projection onto a wedge matches the active-set oracle") {
  SeededRng rng(202);
  const AlmConfig cfg;
  // Validate the oracle itself against a 1e-3 grid once.
  {
    const Vec x = {2.0, 1.5}, a1 = {1.0, 0.2}, a2 = {-0.3, 1.0};
    const Vec exact = wedge_oracle(x, a1, 1.0, a2, 0.5);
    double grid_best = std::numeric_limits<double>::infinity();
    for (int i = -3000; i <= 3000; ++i) {
      for (int j = -3000; j <= 3000; ++j) {
        const Vec y = {i * 1e-3, j * 1e-3};
        if (nsd::dot(a1, y) > 1.0 || nsd::dot(a2, y) > 0.5) continue;
        grid_best = std::min(grid_best, nsd::distance(y, x));
      }
    }
    CHECK(nsd::distance(exact, x) <= grid_best + 1e-12);
    CHECK(grid_best - nsd::distance(exact, x) <= 2e-3);
  }
  for (int trial = 0; trial < 300; ++trial) {
    const Vec a1 = rng.normal_vec(2), a2 = rng.normal_vec(2);
    const double b1 = rng.normal(), b2 = rng.normal();
    Vec x = rng.normal_vec(2);
    for (double& e : x) e *= 4.0;
    ConstraintSet wedge{nsd::residual_linear(a1, b1), nsd::residual_linear(a2, b2)};
    const auto r = nsd::alm_project(x, wedge, cfg);
    CHECK(r.converged);
    CHECK(r.residual_final <= cfg.delta);
    const Vec exact = wedge_oracle(x, a1, b1, a2, b2);
    REQUIRE(exact.size() == 2);
    CHECK(nsd::distance(r.point, exact) <= 1e-4);
  }
}

TEST_CASE("alm projection leaves feasible points in place and warm starts") {
  ConstraintSet half{nsd::residual_linear(Vec{1.0, 0.0}, 0.0)};
  const Vec inside = {-1.0, 3.0};
  const auto r = nsd::alm_project(inside, half, AlmConfig{});
  CHECK(r.converged);
  CHECK(r.point == inside);
  CHECK(r.iterations == 0);

  nsd::AlmWarmState warm;
  const auto first = nsd::alm_project(Vec{2.0, 0.0}, half, AlmConfig{}, &warm);
  REQUIRE(first.converged);
  REQUIRE(warm.lambda.size() == 1);
  CHECK(warm.lambda[0] > 0.0);
  const auto second = nsd::alm_project(Vec{2.1, 0.0}, half, AlmConfig{}, &warm);
  CHECK(second.converged);
  CHECK(second.point[0] <= 0.0);
}

TEST_CASE("alm reports non-convergence with the best point") {
  // Contradictory halfspaces x <= -1 and x >= 1.
  ConstraintSet bad{nsd::residual_linear(Vec{1.0}, -1.0), nsd::residual_linear(Vec{-1.0}, -1.0)};
  AlmConfig cfg;
  cfg.max_outer_iter = 5;
  const auto r = nsd::alm_project(Vec{0.3}, bad, cfg);
  CHECK_FALSE(r.converged);
  CHECK(r.residual_final > cfg.delta);
  CHECK(std::isfinite(r.point[0]));
}

TEST_CASE("non-finite gradients raise NumericalError") {
  nsd::AlmProblem p;
  p.num_vars = 1;
  p.cost = [](std::span<const double>, std::span<double> g) {
    if (!g.empty()) g[0] = std::numeric_limits<double>::quiet_NaN();
    return 0.0;
  };
  p.to_point = [](std::span<const double> z, Vec& pt) { pt.assign(z.begin(), z.end()); };
  p.pullback = [](std::span<const double>, std::span<const double> g, std::span<double> o) {
    o[0] = g[0];
  };
  ConstraintSet cs{nsd::residual_linear(Vec{1.0}, 0.0)};
  p.hard_check = [&cs](std::span<const double> z) { return cs.satisfied(z); };
  p.final_residual = [&cs](std::span<const double> z) { return cs.residual(z); };
  CHECK_THROWS_AS(nsd::alm_solve(p, cs, Vec{1.0}, AlmConfig{}, nullptr), nsd::NumericalError);
}

TEST_CASE("project_onto uses exact projections when available") {
  ConstraintSet cs{std::make_shared<nsd::BoxConstraint>(Vec{0.0, 0.0}, Vec{1.0, 1.0})};
  const auto r = nsd::project_onto(Vec{2.0, -1.0}, cs, AlmConfig{});
  CHECK(r.converged);
  CHECK(r.point == Vec{1.0, 0.0});
}
