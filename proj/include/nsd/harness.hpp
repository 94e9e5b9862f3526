#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nsd/constraints_domain.hpp"
#include "nsd/projections.hpp"
#include "nsd/sampler_continuous.hpp"
#include "nsd/schedule.hpp"

namespace nsd {

/// Invalid experiment configuration; the message names the field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Scenario {
  kGmmHalfspace,
  kMapf,
  kPorosity,
  kKinematics,
  kSequencePatterns,
  kSequenceNovelty,
  kSequenceSurrogate,
};

enum class RunMode { kNsd, kUnconstrained, kPostOnly };

std::string to_string(Scenario s);
std::string to_string(RunMode m);
Scenario scenario_from_string(const std::string& name);
RunMode run_mode_from_string(const std::string& name);

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::kLinear;
  int steps = 100;
  double beta_max = NoiseSchedule::kDefaultBetaMax;
  double gamma_max = 0.1;
  double gamma_power = 1.0;

  NoiseSchedule build() const;
};

struct GmmHalfspaceParams {
  std::vector<Vec> means = {{-2.0, 0.0}, {2.0, 1.0}};
  double variance = 0.3;
  Vec normal = {1.0, 0.0};
  double offset = 1.0;
  /// Samples drawn from the mixture itself as the fidelity reference.
  std::size_t reference_samples = 2000;
};

struct MapfParams {
  std::size_t agents = 3;
  std::size_t obstacles = 4;
  std::size_t waypoints = 16;
  double variance = 0.05;
  /// Optional JSON map file; random maps are drawn otherwise.
  std::string map_file;
};

struct PorosityParams {
  std::size_t rows = 16;
  std::size_t cols = 16;
  std::size_t k = 128;
  std::size_t train = 256;
  std::size_t centres = 32;
  double variance = 0.05;
};

struct KinematicsParams {
  double g_train = 0.2;
  double g_sample = 0.2 / 6.0;
  double p0 = 0.0;
  std::size_t horizon = 8;
  std::size_t train = 512;
  double p0_range = 1.0;
  TrainConfig training;
};

struct SequenceParams {
  std::size_t vocab = 8;
  std::size_t length = 8;
  std::size_t train = 400;
  /// Optional JSON rule file and dataset file.
  std::string rules_file;
  std::string dataset_file;
  std::size_t surrogate_entries = 12;
  double tau = 1.0;
  double gumbel_temperature = 0.5;
};

struct ExperimentConfig {
  Scenario scenario = Scenario::kGmmHalfspace;
  RunMode mode = RunMode::kNsd;
  std::size_t n_samples = 100;
  std::uint64_t seed = 0;
  ScheduleSpec schedule;
  AlmConfig alm;
  int retry_cap = 5;
  GmmHalfspaceParams gmm;
  MapfParams mapf;
  PorosityParams porosity;
  KinematicsParams kinematics;
  SequenceParams sequence;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Parses TOML, or JSON when the text starts with '{'. `seed` is required.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct RunReport {
  std::string scenario;
  std::string mode;
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  /// Percentage of samples violating each constraint, in set order.
  std::vector<std::pair<std::string, double>> violations;
  std::string fidelity_metric;  // "sliced_wasserstein", "total_variation" or "none"
  double fidelity = 0.0;
  std::map<std::string, double> metrics;
  std::string samples_file;
  std::string trace_file;

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

/// Percentage of samples with phi_i = 0, per constraint.
std::vector<std::pair<std::string, double>> violation_rate(std::span<const Vec> samples,
                                                           const ConstraintSet& cs);
std::vector<std::pair<std::string, double>> violation_rate(const std::vector<Tokens>& samples,
                                                           const ConstraintSet& cs);

/// Percentage of true entries.
double success_rate(const std::vector<bool>& feasible);

/// Mean over positions of the total-variation distance between the token
/// marginals of two sequence sets.
double marginal_total_variation(const std::vector<Tokens>& a, const std::vector<Tokens>& b,
                                std::size_t vocab);

/// Everything a run produces besides the report.
struct RunArtifacts {
  RunReport report;
  std::vector<Vec> continuous_samples;
  std::vector<Tokens> sequence_samples;
  ViolationTrace trace;
  double wall_seconds = 0.0;
};

/// The scenario's constraint set, rebuilt deterministically from the config.
ConstraintSet scenario_constraints(const ExperimentConfig& cfg);

/// Runs the scenario in memory. Throws ConfigError or RetryExhausted.
RunArtifacts execute_experiment(const ExperimentConfig& cfg);

/// execute_experiment, then writes report.json, report.csv, trace.csv, the
/// samples file and timing.json into `run_dir`.
RunReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

std::string report_to_json(const RunReport& report);
RunReport report_from_json(const std::string& text);
/// key,value rows: header fields, violation_<name>, fidelity, metric_<name>.
std::string report_to_csv(const RunReport& report);

/// Writes report.json and report.csv into `dir`.
void emit_report(const RunReport& report, const std::filesystem::path& dir);

/// Writes `contents` to a temporary sibling and renames it over `path`.
/// Errors name the path.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

/// Samples files: continuous samples as CSV rows, sequences as token lines.
std::string samples_to_text(const std::vector<Vec>& samples);
std::string samples_to_text(const std::vector<Tokens>& samples);
std::vector<Vec> continuous_samples_from_text(const std::string& text);
std::vector<Tokens> sequence_samples_from_text(const std::string& text);

/// Whether the scenario produces token sequences.
bool is_sequence_scenario(Scenario s);

/// Recomputes per-constraint violation percentages from a samples file.
std::vector<std::pair<std::string, double>> check_samples(const ExperimentConfig& cfg,
                                                          const std::string& samples_text);

}  // namespace nsd
