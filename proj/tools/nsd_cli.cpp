#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "nsd/harness.hpp"

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRetry = 3;

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("NSD_OUT_DIR"); env && *env) return env;
  return "runs";
}

void print_violations(const std::vector<std::pair<std::string, double>>& v) {
  std::cout << "constraint,violation_percent\n";
  for (const auto& [name, pct] : v) std::printf("%s,%.6g\n", name.c_str(), pct);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained diffusion sampling experiments"};
  app.require_subcommand(1);

  std::string config_path, out_flag, mode_flag;
  std::optional<std::uint64_t> seed_flag;
  auto* run = app.add_subcommand("run", "Run an experiment and write its report, trace and samples");
  run->add_option("config", config_path, "TOML or JSON experiment config")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed_flag, "Override the config seed");
  run->add_option("--mode", mode_flag, "Override the mode")
      ->check(CLI::IsMember({"nsd", "unconstrained", "post_only"}));
  run->add_option("--out", out_flag, "Output root (default: $NSD_OUT_DIR, then ./runs)");

  std::string samples_path, check_config;
  auto* check = app.add_subcommand("check", "Recompute violation percentages from a samples file");
  check->add_option("samples", samples_path, "Samples file written by run")->required()->check(CLI::ExistingFile);
  check->add_option("config", check_config, "Config used for the run")->required()->check(CLI::ExistingFile);
  check->add_option("--seed", seed_flag, "Seed used for the run, if overridden");

  std::string run_dir;
  auto* trace = app.add_subcommand("trace", "Print the per-step residual trace of a run as CSV");
  trace->add_option("run-dir", run_dir, "Directory written by run")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      auto cfg = nsd::load_config(config_path);
      if (seed_flag) cfg.seed = *seed_flag;
      if (!mode_flag.empty()) cfg.mode = nsd::run_mode_from_string(mode_flag);
      const auto dir = output_root(out_flag) / (nsd::to_string(cfg.scenario) + "_" + nsd::to_string(cfg.mode) +
                                                "_seed" + std::to_string(cfg.seed));
      const auto report = nsd::run_experiment(cfg, dir);
      std::cout << "run directory: " << dir.string() << "\n";
      print_violations(report.violations);
      if (report.fidelity_metric != "none") std::printf("%s,%.6g\n", report.fidelity_metric.c_str(), report.fidelity);
      for (const auto& [name, v] : report.metrics) std::printf("%s,%.6g\n", name.c_str(), v);
    } else if (*check) {
      auto cfg = nsd::load_config(check_config);
      if (seed_flag) cfg.seed = *seed_flag;
      print_violations(nsd::check_samples(cfg, slurp(samples_path)));
    } else if (*trace) {
      std::cout << slurp(std::filesystem::path(run_dir) / "trace.csv");
    }
  } catch (const nsd::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitConfig;
  } catch (const nsd::RetryExhausted& e) {
    std::cerr << e.what() << "\n";
    return kExitRetry;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return 0;
}
