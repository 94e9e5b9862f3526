#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "nsd/harness.hpp"

namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("nsd_harness_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

nsd::ExperimentConfig small_gmm(nsd::RunMode mode) {
  auto cfg = nsd::parse_config(R"(
scenario = "gmm_halfspace"
n_samples = 300
seed = 21
[schedule]
steps = 60
)");
  cfg.mode = mode;
  return cfg;
}

}  // namespace

TEST_CASE("config parsing accepts TOML and a JSON mirror") {
  const auto toml = nsd::parse_config(R"(
scenario = "porosity"
mode = "post_only"
seed = 4
n_samples = 10
[schedule]
kind = "cosine"
steps = 30
[porosity]
k = 64
)");
  CHECK(toml.scenario == nsd::Scenario::kPorosity);
  CHECK(toml.mode == nsd::RunMode::kPostOnly);
  CHECK(toml.schedule.steps == 30);
  CHECK(toml.porosity.k == 64);
  const auto json = nsd::parse_config(
      R"({"scenario": "porosity", "mode": "post_only", "seed": 4, "n_samples": 10,
          "schedule": {"kind": "cosine", "steps": 30}, "porosity": {"k": 64}})");
  CHECK(json.porosity.k == toml.porosity.k);
  CHECK(json.schedule.kind == toml.schedule.kind);
  CHECK(json.seed == toml.seed);
}

TEST_CASE("config errors name the field") {
  const auto message = [](const std::string& text) {
    try {
      nsd::parse_config(text);
    } catch (const nsd::ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("scenario = \"mapf\"\n").find("'seed'") != std::string::npos);
  CHECK(message("seed = 1\n").find("'scenario'") != std::string::npos);
  CHECK(message("scenario = \"maze\"\nseed = 1\n").find("'scenario'") != std::string::npos);
  CHECK(message("scenario = \"mapf\"\nseed = 1\nmode = \"fast\"\n").find("'mode'") != std::string::npos);
  CHECK(message("scenario = \"mapf\"\nseed = 1\n[mapf]\nagents = \"three\"\n").find("'mapf.agents'") !=
        std::string::npos);
  CHECK(message("scenario = \"mapf\"\nseed = 1\n[mapf]\nrobots = 3\n").find("'mapf.robots'") !=
        std::string::npos);
  CHECK(message("scenario = \"porosity\"\nseed = 1\n[porosity]\nk = 999\n").find("'porosity.k'") !=
        std::string::npos);
  CHECK(message("scenario = \"mapf\"\nseed = -1\n").find("'seed'") != std::string::npos);
  CHECK(message("scenario = [\n").find("parse error") != std::string::npos);
  CHECK_THROWS_AS(nsd::load_config("/nonexistent/config.toml"), nsd::ConfigError);
}

TEST_CASE("violation_rate counts per constraint") {
  nsd::ConstraintSet cs{nsd::residual_linear({1.0, 0.0}, 0.0), nsd::residual_linear({0.0, 1.0}, 0.0)};
  const std::vector<nsd::Vec> feasible = {{-1, -1}, {-2, -3}};
  for (const auto& [name, pct] : nsd::violation_rate(feasible, cs)) CHECK(pct == 0.0);
  const std::vector<nsd::Vec> half = {{-1, -1}, {1, -1}, {-1, 2}, {1, 1}};
  const auto rates = nsd::violation_rate(half, cs);
  REQUIRE(rates.size() == 2);
  CHECK(rates[0].second == 50.0);
  CHECK(rates[1].second == 50.0);
  CHECK_THROWS(nsd::violation_rate(std::vector<nsd::Vec>{}, cs));
}

TEST_CASE("violation_rate matches a direct predicate loop") {
  nsd::SeededRng rng(8);
  nsd::ConstraintSet cs{nsd::residual_linear({1.0, 2.0}, 0.5),
                        std::make_shared<nsd::BoxConstraint>(nsd::Vec{-1, -1}, nsd::Vec{1, 1})};
  std::vector<nsd::Vec> samples;
  for (int i = 0; i < 500; ++i) samples.push_back({2.0 * rng.normal(), 2.0 * rng.normal()});
  const auto rates = nsd::violation_rate(samples, cs);
  int lin = 0, box = 0;
  for (const auto& x : samples) {
    lin += x[0] + 2.0 * x[1] > 0.5 ? 1 : 0;
    box += std::abs(x[0]) > 1.0 || std::abs(x[1]) > 1.0 ? 1 : 0;
  }
  CHECK(rates[0].second == 100.0 * lin / 500.0);
  CHECK(rates[1].second == 100.0 * box / 500.0);
}

TEST_CASE("success_rate") {
  CHECK(nsd::success_rate({true, true, true}) == 100.0);
  CHECK(nsd::success_rate({false, false}) == 0.0);
  std::vector<bool> mixed(10, false);
  for (int i = 0; i < 7; ++i) mixed[i] = true;
  CHECK(nsd::success_rate(mixed) == doctest::Approx(70.0));
  CHECK_THROWS(nsd::success_rate({}));
}

TEST_CASE("marginal total variation") {
  const std::vector<nsd::Tokens> a = {{0, 1}, {0, 1}};
  const std::vector<nsd::Tokens> b = {{1, 1}, {1, 1}};
  CHECK(nsd::marginal_total_variation(a, a, 2) == 0.0);
  CHECK(nsd::marginal_total_variation(a, b, 2) == doctest::Approx(0.5));
}

TEST_CASE("reports round-trip and emit byte-identically") {
  nsd::RunReport r;
  r.scenario = "mapf";
  r.mode = "nsd";
  r.seed = 12;
  r.n_samples = 3;
  r.violations = {{"collision", 0.0}, {"obstacle", 33.333333333333336}};
  r.fidelity_metric = "none";
  r.metrics = {{"success_rate", 66.66666666666667}, {"mean_path_length", 12.5}};
  r.samples_file = "samples.csv";
  r.trace_file = "trace.csv";
  CHECK(nsd::report_from_json(nsd::report_to_json(r)) == r);
  const auto dir = scratch("emit");
  nsd::emit_report(r, dir);
  const auto first = slurp(dir / "report.json") + slurp(dir / "report.csv");
  nsd::emit_report(r, dir);
  CHECK(first == slurp(dir / "report.json") + slurp(dir / "report.csv"));
  CHECK(slurp(dir / "report.csv").find("violation_obstacle,33.333333333333336\n") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "report.json.tmp"));
  CHECK_THROWS_WITH_AS(nsd::write_file_atomic("/nonexistent/dir/x.json", "{}"),
                       doctest::Contains("/nonexistent/dir"), std::runtime_error);
}

TEST_CASE("samples files round-trip") {
  const std::vector<nsd::Vec> xs = {{0.1, -2.5e-300}, {1.0 / 3.0, 7.0}};
  CHECK(nsd::continuous_samples_from_text(nsd::samples_to_text(xs)) == xs);
  const std::vector<nsd::Tokens> ts = {{0, 1, 7}, {3, 3, 3}};
  CHECK(nsd::sequence_samples_from_text(nsd::samples_to_text(ts)) == ts);
}

TEST_CASE("gmm halfspace run: nsd has no violations, unconstrained does") {
  const auto nsd_run = nsd::execute_experiment(small_gmm(nsd::RunMode::kNsd));
  const auto free_run = nsd::execute_experiment(small_gmm(nsd::RunMode::kUnconstrained));
  CHECK(nsd_run.report.violations.at(0).second == 0.0);
  CHECK(free_run.report.violations.at(0).second > 0.0);
  for (const auto& e : nsd_run.trace.entries) CHECK(e.mean_residual <= 1e-6);
}

TEST_CASE("post_only projects the unconstrained endpoint once") {
  const auto free_run = nsd::execute_experiment(small_gmm(nsd::RunMode::kUnconstrained));
  const auto post_run = nsd::execute_experiment(small_gmm(nsd::RunMode::kPostOnly));
  REQUIRE(free_run.continuous_samples.size() == post_run.continuous_samples.size());
  for (std::size_t i = 0; i < free_run.continuous_samples.size(); ++i) {
    const auto& x = free_run.continuous_samples[i];
    const auto& y = post_run.continuous_samples[i];
    // Halfspace x0 <= 1: projection clips the first coordinate only.
    CHECK(y[0] == doctest::Approx(std::min(x[0], 1.0)).epsilon(1e-9));
    CHECK(y[1] == doctest::Approx(x[1]).epsilon(1e-9));
  }
}

TEST_CASE("run_experiment is deterministic and its violations are recomputable") {
  const auto cfg = small_gmm(nsd::RunMode::kUnconstrained);
  const auto a = scratch("det_a"), b = scratch("det_b");
  nsd::run_experiment(cfg, a);
  nsd::run_experiment(cfg, b);
  for (const char* f : {"report.json", "report.csv", "trace.csv", "samples.csv"}) {
    CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
  }
  CHECK(fs::exists(a / "timing.json"));
  const auto report = nsd::report_from_json(slurp(a / "report.json"));
  CHECK(nsd::check_samples(cfg, slurp(a / report.samples_file)) == report.violations);
  CHECK(slurp(a / "trace.csv").rfind("t,mean_residual,max_residual\n", 0) == 0);
}

TEST_CASE("sequence run: certificates hold and the checker agrees") {
  auto cfg = nsd::parse_config(R"(
scenario = "sequence_patterns"
n_samples = 60
seed = 2
[schedule]
steps = 8
)");
  const auto nsd_run = nsd::execute_experiment(cfg);
  for (const auto& [name, pct] : nsd_run.report.violations) CHECK_MESSAGE(pct == 0.0, name);
  cfg.mode = nsd::RunMode::kUnconstrained;
  const auto free_run = nsd::execute_experiment(cfg);
  CHECK(free_run.report.violations.at(0).second > 0.0);
  CHECK(nsd::check_samples(cfg, nsd::samples_to_text(free_run.sequence_samples)) ==
        free_run.report.violations);
}

TEST_CASE("mapf run checks every instance against its own map") {
  auto cfg = nsd::parse_config(R"(
scenario = "mapf"
n_samples = 2
seed = 5
[schedule]
steps = 30
[mapf]
agents = 2
)");
  const auto run = nsd::execute_experiment(cfg);
  CHECK(run.report.metrics.at("success_rate") == 100.0);
  CHECK(nsd::check_samples(cfg, nsd::samples_to_text(run.continuous_samples)) == run.report.violations);
}
