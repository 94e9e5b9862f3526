#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "nsd/constraints_domain.hpp"

namespace {

using nsd::Constraint;
using nsd::SeededRng;
using nsd::Tokens;
using nsd::Vec;

double rel_error(const Vec& a, const Vec& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

Vec central_difference(const Constraint& c, Vec x, double h) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = c.residual(x);
    x[i] = keep - h;
    const double down = c.residual(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

Vec analytic_gradient(const Constraint& c, const Vec& x) {
  Vec g(x.size());
  c.residual_gradient(x, g);
  return g;
}

Vec random_rows(std::size_t length, std::size_t vocab, SeededRng& rng, double spread = 2.0) {
  Vec flat;
  for (std::size_t i = 0; i < length; ++i) {
    Vec logits = rng.normal_vec(vocab);
    for (double& v : logits) v *= spread;
    const auto row = nsd::softmax(logits);
    flat.insert(flat.end(), row.probs().begin(), row.probs().end());
  }
  return flat;
}

Vec one_hot(const Tokens& t, std::size_t vocab) {
  Vec flat(t.size() * vocab, 0.0);
  for (std::size_t i = 0; i < t.size(); ++i) flat[i * vocab + static_cast<std::size_t>(t[i])] = 1.0;
  return flat;
}

// Independent check: does any rule pattern occur anywhere in s?
bool has_forbidden(const Tokens& s, const std::vector<nsd::PatternRule>& rules) {
  for (const auto& r : rules) {
    const auto it = std::search(s.begin(), s.end(), r.pattern.begin(), r.pattern.end());
    if (it != s.end()) return true;
  }
  return false;
}

// Odometer over all vocab^length sequences.
std::vector<Tokens> all_sequences(std::size_t vocab, std::size_t length) {
  std::vector<Tokens> out;
  Tokens s(length, 0);
  while (true) {
    out.push_back(s);
    std::size_t i = length;
    while (i > 0) {
      --i;
      if (static_cast<std::size_t>(++s[i]) < vocab) break;
      s[i] = 0;
      if (i == 0) return out;
    }
  }
}

}  // namespace

TEST_CASE("collision residual examples") {
  nsd::CollisionConstraint c(2, 2, {1.0, 1.0});
  const Vec apart = {0, 0, 0, 0, 3, 0, 3, 0};
  CHECK(c.residual(apart) == 0.0);
  CHECK(c.satisfied(apart));
  const Vec together = {1, 1, 2, 2, 1, 1, 2, 2};
  CHECK(c.residual(together) == doctest::Approx(4.0));
  CHECK_FALSE(c.satisfied(together));
  CHECK_FALSE(c.is_convex());
  CHECK_THROWS_AS(nsd::CollisionConstraint(1, 2, {1.0}), std::invalid_argument);
}

TEST_CASE("obstacle residual examples") {
  nsd::ObstacleConstraint c(1, 3, {{{5.0, 5.0}, 1.5}});
  CHECK(c.residual(Vec{0, 0, 1, 1, 9, 9}) == 0.0);
  CHECK(c.residual(Vec{5, 5, 0, 0, 5, 5}) == doctest::Approx(3.0));
}

TEST_CASE("residual gradients match finite differences") {
  SeededRng rng(4);
  SUBCASE("collision") {
    nsd::CollisionConstraint c(4, 5, {0.6, 0.5, 0.7, 0.4});
    for (int trial = 0; trial < 50; ++trial) {
      Vec x = rng.normal_vec(40);
      for (double& v : x) v *= 0.8;
      CHECK(rel_error(analytic_gradient(c, x), central_difference(c, x, 1e-6)) < 1e-5);
    }
  }
  SUBCASE("obstacle") {
    nsd::ObstacleConstraint c(3, 4, {{{0.0, 0.0}, 1.5}, {{1.0, -0.5}, 1.0}});
    for (int trial = 0; trial < 50; ++trial) {
      const Vec x = rng.normal_vec(24);
      CHECK(rel_error(analytic_gradient(c, x), central_difference(c, x, 1e-6)) < 1e-5);
    }
  }
  SUBCASE("surrogate") {
    auto scorer = nsd::random_surrogate(5, 6, 0.0, rng);
    scorer.entries.push_back({{1, 2, 3}, 0.7});
    nsd::SurrogateConstraint c(6, 6, scorer);
    for (int trial = 0; trial < 50; ++trial) {
      const Vec x = random_rows(6, 6, rng);
      CHECK(rel_error(analytic_gradient(c, x), central_difference(c, x, 1e-6)) < 1e-5);
    }
  }
  SUBCASE("patterns and novelty") {
    nsd::PatternConstraint p(6, 8, nsd::default_pattern_rules());
    auto data = std::make_shared<nsd::DatasetView>(nsd::toy_sequence_data(8, 6, 40, {}, rng));
    nsd::NoveltyConstraint n(6, 8, data);
    for (int trial = 0; trial < 30; ++trial) {
      const Vec x = random_rows(6, 8, rng);
      CHECK(rel_error(analytic_gradient(p, x), central_difference(p, x, 1e-6)) < 1e-5);
      CHECK(rel_error(analytic_gradient(n, x), central_difference(n, x, 1e-6)) < 1e-5);
    }
  }
  SUBCASE("porosity off the target") {
    nsd::PorosityConstraint c({4, 4, 10});
    for (int trial = 0; trial < 30; ++trial) {
      Vec x = rng.normal_vec(16);
      for (double& v : x) v = 0.05 * v + 0.08;
      if (c.satisfied(x)) continue;
      CHECK(rel_error(analytic_gradient(c, x), central_difference(c, x, 1e-7)) < 1e-5);
    }
  }
}

TEST_CASE("predicates and residuals agree") {
  SeededRng rng(12);
  const auto agree = [](const Constraint& c, const Vec& x, double tol) {
    return c.satisfied(x) == (c.residual(x) <= tol);
  };
  nsd::CollisionConstraint col(3, 4, {0.5, 0.5, 0.5});
  nsd::ObstacleConstraint obs(3, 4, {{{0.0, 0.0}, 1.0}});
  nsd::PorosityConstraint por({3, 3, 4});
  nsd::KinematicsConstraint kin({0.0, 0.0, 0.5, 4});
  for (int trial = 0; trial < 500; ++trial) {
    const Vec x = rng.normal_vec(24);
    CHECK(agree(col, x, nsd::kCheckTol));
    CHECK(agree(obs, x, nsd::kCheckTol));
    Vec g = rng.normal_vec(9);
    CHECK(agree(por, g, nsd::kCheckTol));
    CHECK(agree(por, por.project_exact(g), nsd::kCheckTol));
    Vec k = kin.rollout();
    if (trial % 2 == 0) k[rng.below(4)] += 1e-6 * rng.normal();
    CHECK(agree(kin, k, nsd::KinematicsConstraint::kTolerance));
  }
  const auto rules = nsd::default_pattern_rules();
  nsd::PatternConstraint pat(5, 8, rules);
  auto data = std::make_shared<nsd::DatasetView>(nsd::toy_sequence_data(8, 5, 100, rules, rng));
  nsd::NoveltyConstraint nov(5, 8, data);
  nsd::SurrogateConstraint sur(5, 8, nsd::random_surrogate(8, 10, 1.0, rng));
  std::vector<Tokens> probes(data->sequences().begin(), data->sequences().end());
  for (int trial = 0; trial < 500; ++trial) {
    Tokens t(5);
    for (int& v : t) v = static_cast<int>(rng.below(8));
    probes.push_back(t);
  }
  for (const auto& t : probes) {
    const Vec x = one_hot(t, 8);
    CHECK(agree(pat, x, nsd::kCheckTol));
    CHECK(agree(nov, x, nsd::kCheckTol));
    CHECK(agree(sur, x, nsd::kCheckTol));
  }
}

TEST_CASE("porosity constraint") {
  nsd::PorosityTarget target{4, 4, 5};
  nsd::PorosityConstraint c(target);
  Vec grid(16, 0.5);
  for (int i = 0; i < 5; ++i) grid[static_cast<std::size_t>(3 * i)] = -0.2;
  CHECK(c.satisfied(grid));
  CHECK(c.residual(grid) == 0.0);
  CHECK_FALSE(c.satisfied(Vec(16, 0.5)));
  CHECK(c.residual(Vec(16, 0.5)) > nsd::kCheckTol);
  CHECK_THROWS_AS(nsd::PorosityConstraint({2, 2, 5}), std::invalid_argument);

  SeededRng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    Vec g = rng.normal_vec(16);
    for (double& v : g) v *= 1.5;
    nsd::PorosityConstraint ck({4, 4, rng.below(17)});
    const Vec y = ck.project_exact(g);
    CHECK(nsd::count_negative(y) == ck.target().k);
    CHECK(ck.satisfied(y));
    for (double v : y) CHECK(std::abs(v) <= 1.0);
  }
}

TEST_CASE("kinematics rollout") {
  const Vec p = nsd::kinematics_rollout({0.0, 0.0, 2.0, 3});
  CHECK(p[2] == doctest::Approx(9.0));
  for (std::size_t t = 1; t <= 3; ++t) CHECK(p[t - 1] == doctest::Approx(static_cast<double>(t * t)));
  for (double v : nsd::kinematics_rollout({1.5, 0.0, 0.0, 5})) CHECK(v == 1.5);
  const Vec earth = nsd::kinematics_rollout({0.0, 0.0, 9.81, 6});
  const Vec moon = nsd::kinematics_rollout({0.0, 0.0, 1.62, 6});
  for (std::size_t i = 0; i < 6; ++i) CHECK(moon[i] / earth[i] == doctest::Approx(1.62 / 9.81));
  CHECK_THROWS_AS(nsd::kinematics_rollout({0.0, 0.0, 1.0, 0}), std::invalid_argument);
}

TEST_CASE("kinematics constraint") {
  nsd::KinematicsConstraint c({0.5, 0.0, 0.3, 5});
  Vec x = c.rollout();
  CHECK(c.satisfied(x));
  CHECK(c.residual(x) == 0.0);
  x[3] += 0.25;
  CHECK(c.residual(x) == doctest::Approx(0.25));
  CHECK_FALSE(c.satisfied(x));
  CHECK(c.satisfied(c.project_exact(x)));
  CHECK_THROWS_AS(c.residual(Vec(4, 0.0)), std::invalid_argument);
}

TEST_CASE("pattern repair") {
  const auto rules = nsd::default_pattern_rules();
  const Tokens clean = {0, 1, 3, 4, 5, 6, 7};
  CHECK(nsd::pattern_repair(clean, rules) == clean);
  CHECK(nsd::pattern_repair({0, 1, 2, 0}, rules) == Tokens{0, 1, 3, 0});

  // 3 3 3 3: the leftmost triple becomes 3 4 3, leaving 3 4 3 3.
  CHECK(nsd::pattern_repair({3, 3, 3, 3}, rules) == Tokens{3, 4, 3, 3});

  // A rule whose only candidate recreates a match falls back to deletion.
  const std::vector<nsd::PatternRule> loop = {{{1, 2}, {{2, 1}}}, {{2, 1}, {}}};
  CHECK(nsd::pattern_repair({1, 2, 1}, loop) == Tokens{1});

  SeededRng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    Tokens s(4 + rng.below(12));
    for (int& v : s) v = static_cast<int>(rng.below(8));
    const Tokens out = nsd::pattern_repair(s, rules);
    CHECK_FALSE(has_forbidden(out, rules));
    CHECK(out.size() <= s.size());
    CHECK(nsd::pattern_repair(s, rules) == out);
  }
  CHECK_THROWS_AS(nsd::PatternRule({{1, 2}, {{1, 2}}}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(nsd::PatternRule({{}, {}}).validate(), std::invalid_argument);
}

TEST_CASE("pattern constraint repair keeps the length") {
  const auto rules = nsd::default_pattern_rules();
  nsd::PatternConstraint c(8, 9, rules, 8);
  SeededRng rng(6);
  const auto rows = nsd::CategoricalSequence::from_tokens(Tokens(8, 0), 9);
  for (int trial = 0; trial < 300; ++trial) {
    Tokens s(8);
    for (int& v : s) v = static_cast<int>(rng.below(8));
    const auto fixed = c.repair(s, rows);
    REQUIRE(fixed.has_value());
    CHECK(fixed->size() == 8);
    CHECK(c.satisfied_tokens(*fixed));
  }
}

TEST_CASE("rule files parse") {
  const auto rules = nsd::pattern_rules_from_json_text(
      R"([{"pattern": [1, 2], "replacements": [[1, 3]]}, {"pattern": [4]}])");
  REQUIRE(rules.size() == 2);
  CHECK(rules[0].replacements[0] == Tokens{1, 3});
  CHECK(rules[1].replacements.empty());
  CHECK_THROWS(nsd::pattern_rules_from_json_text(R"([{"pattern": [1], "replacements": [[1]]}])"));
}

TEST_CASE("novelty projection examples") {
  using nsd::SimplexRow;
  nsd::DatasetView data({{0, 0}, {0, 1}});
  const nsd::CategoricalSequence novel({SimplexRow({0.2, 0.8}), SimplexRow({0.7, 0.3})});
  nsd::DatasetView copy = data;
  CHECK(nsd::novelty_project(novel, copy).rows() == novel.rows());
  CHECK(copy.contains({1, 0}));

  // Peaked on 00; flipping position 2 is cheapest but 01 is taken, so the
  // answer is the cheaper of 10 and 11.
  const nsd::CategoricalSequence x({SimplexRow({0.6, 0.4}), SimplexRow({0.55, 0.45})});
  const auto y = nsd::novelty_project(x, data);
  CHECK(y.decode() == Tokens{1, 0});
  CHECK(data.contains({1, 0}));
  CHECK(nsd::novelty_project(x, data).decode() == Tokens{1, 1});
  CHECK_THROWS_AS(nsd::novelty_project(x, data), nsd::Infeasible);
}

TEST_CASE("novelty projection matches exhaustive enumeration") {
  SeededRng rng(77);
  for (int instance = 0; instance < 200; ++instance) {
    const std::size_t vocab = 2 + rng.below(3);
    const std::size_t length = 1 + rng.below(4);
    const auto space = all_sequences(vocab, length);
    std::vector<Tokens> taken;
    for (const auto& s : space) {
      if (rng.uniform() < 0.6) taken.push_back(s);
    }
    if (taken.size() == space.size()) taken.pop_back();
    const Vec flat = random_rows(length, vocab, rng, 1.5);
    const auto x = nsd::CategoricalSequence::from_flat(flat, vocab);

    const std::set<Tokens> taken_set(taken.begin(), taken.end());
    Tokens best;
    double best_cost = 0.0;
    for (const auto& s : space) {
      if (taken_set.count(s)) continue;
      double cost = 0.0;
      for (std::size_t i = 0; i < length; ++i) {
        const auto& row = x.row(i).probs();
        const double top = *std::max_element(row.begin(), row.end());
        cost += std::log(std::max(top, 1e-12)) - std::log(std::max(row[static_cast<std::size_t>(s[i])], 1e-12));
      }
      // Enumeration is lexicographic, so only a strictly cheaper cost wins.
      if (best.empty() || cost < best_cost - 1e-12) {
        best = s;
        best_cost = cost;
      }
    }
    nsd::DatasetView view(taken);
    CHECK(nsd::novelty_project(x, view).decode() == best);
  }
}

TEST_CASE("repeated novelty projections never repeat") {
  SeededRng rng(8);
  nsd::DatasetView view;
  std::set<Tokens> emitted;
  int infeasible = 0;
  for (int call = 0; call < 100; ++call) {
    const auto x = nsd::CategoricalSequence::from_flat(random_rows(3, 4, rng), 4);
    try {
      const Tokens s = nsd::novelty_project(x, view).decode();
      CHECK(emitted.insert(s).second);
    } catch (const nsd::Infeasible&) {
      ++infeasible;
    }
  }
  CHECK(emitted.size() == 64);
  CHECK(infeasible == 36);
}

TEST_CASE("surrogate constraint examples") {
  nsd::SurrogateScorer zero;
  zero.entries = {{{0, 1}, 0.0}, {{2, 2}, 0.0}};
  nsd::SurrogateConstraint free(4, 3, zero);
  SeededRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tokens t(4);
    for (int& v : t) v = static_cast<int>(rng.below(3));
    CHECK(free.satisfied_tokens(t));
  }
  nsd::SurrogateScorer one;
  one.entries = {{{0, 1}, 1.0}};
  one.tau = 0.5;
  nsd::SurrogateConstraint c(4, 3, one);
  CHECK_FALSE(c.satisfied_tokens({2, 0, 1, 2}));
  CHECK(c.satisfied_tokens({1, 0, 2, 1}));
  CHECK(c.residual(one_hot({2, 0, 1, 2}, 3)) == doctest::Approx(0.5));
}

TEST_CASE("trajectory projection keeps endpoints fixed") {
  SeededRng rng(21);
  for (int instance = 0; instance < 5; ++instance) {
    const auto problem = nsd::random_motion_problem(3, 3, 12, rng);
    const auto line = nsd::straight_line_bundle(problem);
    nsd::EndpointConstraint ends(problem);
    nsd::ConstraintSet cs{nsd::collision_constraint(line), nsd::obstacle_constraint(line, problem.map)};
    Vec x = line.positions;
    for (double& v : x) v += 0.3 * rng.normal();
    const auto pr = nsd::project_trajectories(x, ends, cs, {});
    CHECK(pr.converged);
    CHECK(cs.satisfied(pr.point));
    CHECK(ends.satisfied(pr.point));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (ends.pins()[i]) CHECK(pr.point[i] == *ends.pins()[i]);
    }
  }
}

TEST_CASE("motion problems and path lengths") {
  const auto p = nsd::MotionProblem::from_json_text(R"({
    "bounds": [[0, 0], [10, 10]],
    "obstacles": [{"center": [5, 5], "radius": 1}],
    "agents": [{"start": [0, 0], "goal": [3, 4], "radius": 0.25}],
    "steps": 2})");
  const auto line = nsd::straight_line_bundle(p);
  CHECK(nsd::path_lengths(line)[0] == doctest::Approx(5.0));
  nsd::AgentTrajectoryBundle still(1, 3, {1, 1, 1, 1, 1, 1}, {0.2});
  CHECK(nsd::mean_path_length(still) == 0.0);
  nsd::AgentTrajectoryBundle two(1, 3, {0, 0, 3, 4, 6, 8}, {0.2});
  CHECK(nsd::mean_path_length(two) == doctest::Approx(10.0));
  CHECK_THROWS(nsd::MotionProblem::from_json_text(R"({"obstacles": [{"center": [1, 1], "radius": -1}], "agents": [{"start": [0, 0], "goal": [1, 1]}]})"));
}
