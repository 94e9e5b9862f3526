#include "nsd/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>
#include <toml.hpp>

#include "nsd/discrete_models.hpp"
#include "nsd/sampler_discrete.hpp"

namespace nsd {

using nlohmann::json;

namespace {

// Sub-streams of the run seed. Sampling uses the seed itself so that runs in
// different modes are paired chain by chain.
constexpr std::uint64_t kDataStream = 0x64617461;
constexpr std::uint64_t kMapStream = 0x6d617073;
constexpr std::uint64_t kModelStream = 0x6d6f646c;
constexpr std::uint64_t kReferenceStream = 0x72656673;
constexpr std::uint64_t kDirectionStream = 0x64697273;
constexpr int kSlicedDirections = 64;

json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [key, value] : *t) out[std::string(key.str())] = toml_to_json(value);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& value : *a) out.push_back(toml_to_json(value));
    return out;
  }
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  if (const auto* v = node.as_string()) return v->get();
  throw ConfigError("config: unsupported TOML value (dates and times are not used)");
}

// Typed access to one table with field-level errors and unknown-key checks.
class Fields {
 public:
  Fields(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError("config: '" + prefix_ + "' must be a table");
  }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  void only(std::initializer_list<const char*> keys) const {
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, v] : j_.items()) {
      if (!allowed.count(k)) throw ConfigError("config: unknown field '" + path(k) + "'");
    }
  }

  template <class T>
  void read(const std::string& key, T& out) const {
    if (!has(key)) return;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) throw ConfigError("");
        }
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError("config: field '" + path(key) + "' has the wrong type");
    }
  }

  Fields table(const std::string& key) const {
    static const json kEmpty = json::object();
    return Fields(has(key) ? j_.at(key) : kEmpty, path(key));
  }

 private:
  const json& j_;
  std::string prefix_;
};

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError("config: field '" + field + "' " + what);
}

SamplingMode sampling_mode(RunMode m) {
  switch (m) {
    case RunMode::kNsd: return SamplingMode::kNsd;
    case RunMode::kUnconstrained: return SamplingMode::kUnconstrained;
    case RunMode::kPostOnly: return SamplingMode::kPostOnly;
  }
  return SamplingMode::kNsd;
}

DiscreteMode discrete_mode(RunMode m) {
  switch (m) {
    case RunMode::kNsd: return DiscreteMode::kNsd;
    case RunMode::kUnconstrained: return DiscreteMode::kUnconstrained;
    case RunMode::kPostOnly: return DiscreteMode::kPostOnly;
  }
  return DiscreteMode::kNsd;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

MotionProblem motion_instance(const ExperimentConfig& cfg, std::size_t instance) {
  const auto& p = cfg.mapf;
  if (!p.map_file.empty()) {
    auto problem = MotionProblem::load(p.map_file);
    problem.steps = p.waypoints;
    return problem;
  }
  SeededRng rng(mix_seed(mix_seed(cfg.seed, kMapStream), instance));
  return random_motion_problem(p.agents, p.obstacles, p.waypoints, rng);
}

struct SequenceSetup {
  std::vector<Tokens> train;
  std::shared_ptr<DatasetView> dataset;
  std::vector<PatternRule> rules;
  SurrogateScorer scorer;
};

SequenceSetup sequence_setup(const ExperimentConfig& cfg) {
  const auto& p = cfg.sequence;
  SequenceSetup s;
  s.rules = p.rules_file.empty() ? default_pattern_rules() : load_pattern_rules(p.rules_file);
  SeededRng data_rng(mix_seed(cfg.seed, kDataStream));
  s.train = toy_sequence_data(p.vocab, p.length, p.train, s.rules, data_rng);
  s.dataset = std::make_shared<DatasetView>(p.dataset_file.empty() ? DatasetView(s.train)
                                                                   : DatasetView::load(p.dataset_file));
  SeededRng model_rng(mix_seed(cfg.seed, kModelStream));
  s.scorer = random_surrogate(p.vocab, p.surrogate_entries, p.tau, model_rng);
  return s;
}

ConstraintSet sequence_constraints(const ExperimentConfig& cfg, const SequenceSetup& s) {
  const auto& p = cfg.sequence;
  const std::size_t vocab = p.vocab + 1;  // plus the mask token
  ConstraintSet cs;
  switch (cfg.scenario) {
    case Scenario::kSequencePatterns:
      cs.add(std::make_shared<PatternConstraint>(p.length, vocab, s.rules, p.vocab));
      cs.add(std::make_shared<NoveltyConstraint>(p.length, vocab, s.dataset, p.vocab));
      break;
    case Scenario::kSequenceNovelty:
      cs.add(std::make_shared<NoveltyConstraint>(p.length, vocab, s.dataset, p.vocab));
      break;
    case Scenario::kSequenceSurrogate:
      cs.add(std::make_shared<SurrogateConstraint>(p.length, vocab, s.scorer));
      break;
    default:
      break;
  }
  return cs;
}

ConstraintSet motion_constraints(const MotionProblem& problem) {
  const auto line = straight_line_bundle(problem);
  ConstraintSet cs;
  if (problem.agents.size() >= 2) cs.add(collision_constraint(line));
  cs.add(obstacle_constraint(line, problem.map));
  cs.add(std::make_shared<EndpointConstraint>(problem));
  return cs;
}

// Per-constraint violation percentages where sample i is checked against
// constraints(i).
template <class Sample, class Check>
std::vector<std::pair<std::string, double>> tally(const std::vector<Sample>& samples,
                                                  const std::function<ConstraintSet(std::size_t)>& constraints,
                                                  Check violated) {
  if (samples.empty()) throw std::invalid_argument("violation_rate: no samples");
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ConstraintSet cs = constraints(i);
    if (out.empty()) {
      for (const auto& c : cs.items()) out.emplace_back(c->name(), 0.0);
    }
    if (cs.size() != out.size()) throw std::logic_error("violation_rate: constraint sets differ in size");
    for (std::size_t k = 0; k < cs.size(); ++k) out[k].second += violated(cs[k], samples[i]) ? 1.0 : 0.0;
  }
  for (auto& [name, v] : out) v = 100.0 * v / static_cast<double>(samples.size());
  return out;
}

void merge_trace(ViolationTrace& into, const ViolationTrace& add, std::size_t count) {
  if (into.entries.empty()) {
    into = add;
    for (auto& e : into.entries) e.mean_residual = 0.0;
  }
  for (std::size_t k = 0; k < add.entries.size(); ++k) {
    into.entries[k].mean_residual += add.entries[k].mean_residual / static_cast<double>(count);
    into.entries[k].max_residual = std::max(into.entries[k].max_residual, add.entries[k].max_residual);
  }
}

void fill_trace_metrics(RunArtifacts& a) {
  const auto& e = a.trace.entries;
  if (e.empty()) return;
  const std::size_t tail = std::min<std::size_t>(20, e.size());
  double s = 0.0;
  for (std::size_t k = e.size() - tail; k < e.size(); ++k) s += e[k].mean_residual;
  a.report.metrics["final_mean_residual"] = e.back().mean_residual;
  a.report.metrics["last20_mean_residual"] = s / static_cast<double>(tail);
}

RunArtifacts run_gmm(const ExperimentConfig& cfg) {
  RunArtifacts a;
  const auto sched = cfg.schedule.build();
  const GmmScoreModel model(GaussianMixture::isotropic(cfg.gmm.means, cfg.gmm.variance), sched);
  const ConstraintSet cs = scenario_constraints(cfg);
  SamplerConfig sc;
  sc.mode = sampling_mode(cfg.mode);
  sc.retry_cap = cfg.retry_cap;
  sc.alm = cfg.alm;
  auto batch = sample_constrained(model, sched, cs, sc, cfg.n_samples, cfg.seed);
  SeededRng ref_rng(mix_seed(cfg.seed, kReferenceStream));
  std::vector<Vec> reference;
  for (std::size_t i = 0; i < cfg.gmm.reference_samples; ++i) reference.push_back(model.mixture().sample(ref_rng));
  SeededRng dirs(mix_seed(cfg.seed, kDirectionStream));
  a.report.fidelity_metric = "sliced_wasserstein";
  a.report.fidelity = sliced_wasserstein(batch.samples, reference, kSlicedDirections, dirs);
  a.report.violations = violation_rate(batch.samples, cs);
  a.report.metrics["retries"] = static_cast<double>(batch.retries);
  a.report.metrics["intermediate_failures"] = static_cast<double>(batch.intermediate_failures);
  a.continuous_samples = std::move(batch.samples);
  a.trace = std::move(batch.trace);
  fill_trace_metrics(a);
  return a;
}

RunArtifacts run_mapf(const ExperimentConfig& cfg) {
  RunArtifacts a;
  const auto sched = cfg.schedule.build();
  std::vector<bool> success;
  double length_sum = 0.0;
  std::size_t retries = 0, failed = 0, endpoints_moved = 0;
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const auto problem = motion_instance(cfg, i);
    const auto model = motion_model(problem, sched, cfg.mapf.variance);
    const ConstraintSet cs = motion_constraints(problem);
    const auto ends = std::make_shared<EndpointConstraint>(problem);
    SamplerConfig sc;
    sc.mode = sampling_mode(cfg.mode);
    sc.retry_cap = cfg.retry_cap;
    sc.alm = cfg.alm;
    sc.throw_on_exhaustion = false;
    sc.projector = [ends](std::span<const double> x, const ConstraintSet& set, const AlmConfig& alm,
                          AlmWarmState* warm) { return project_trajectories(x, *ends, set, alm, warm); };
    auto batch = sample_constrained(model, sched, cs, sc, 1, mix_seed(cfg.seed, i));
    retries += batch.retries;
    failed += batch.failed_chains;
    const Vec& x = batch.samples.front();
    const AgentTrajectoryBundle bundle(problem.agents.size(), problem.steps, x, problem.radii());
    length_sum += mean_path_length(bundle);
    bool pinned = true;
    for (std::size_t k = 0; k < x.size(); ++k) pinned = pinned && (!ends->pins()[k] || x[k] == *ends->pins()[k]);
    endpoints_moved += pinned ? 0 : 1;
    // Success: no retry exhaustion, both collision families hold, endpoints exact.
    success.push_back(batch.failed_chains == 0 && cs.satisfied(x) && pinned);
    merge_trace(a.trace, batch.trace, cfg.n_samples);
    a.continuous_samples.push_back(x);
  }
  a.report.violations = tally<Vec>(a.continuous_samples,
                                   [&](std::size_t i) { return motion_constraints(motion_instance(cfg, i)); },
                                   [](const Constraint& c, const Vec& x) { return !c.satisfied(x); });
  a.report.fidelity_metric = "none";
  a.report.metrics["success_rate"] = success_rate(success);
  a.report.metrics["mean_path_length"] = length_sum / static_cast<double>(cfg.n_samples);
  a.report.metrics["retries"] = static_cast<double>(retries);
  a.report.metrics["failed_chains"] = static_cast<double>(failed);
  a.report.metrics["endpoints_moved"] = static_cast<double>(endpoints_moved);
  fill_trace_metrics(a);
  return a;
}

RunArtifacts run_porosity(const ExperimentConfig& cfg) {
  RunArtifacts a;
  const auto& p = cfg.porosity;
  const auto sched = cfg.schedule.build();
  SeededRng data_rng(mix_seed(cfg.seed, kDataStream));
  const auto train = porosity_training_grids(p.rows, p.cols, p.train, data_rng);
  const auto model = porosity_model(train, p.centres, sched, p.variance);
  const ConstraintSet cs = scenario_constraints(cfg);
  SamplerConfig sc;
  sc.mode = sampling_mode(cfg.mode);
  sc.retry_cap = cfg.retry_cap;
  sc.alm = cfg.alm;
  auto batch = sample_constrained(model, sched, cs, sc, cfg.n_samples, cfg.seed);
  double err = 0.0;
  std::size_t exact = 0;
  for (const auto& g : batch.samples) {
    const auto count = count_negative(g);
    err += std::abs(static_cast<double>(count) - static_cast<double>(p.k)) / static_cast<double>(p.rows * p.cols);
    exact += count == p.k ? 1 : 0;
  }
  SeededRng dirs(mix_seed(cfg.seed, kDirectionStream));
  a.report.fidelity_metric = "sliced_wasserstein";
  a.report.fidelity = sliced_wasserstein(batch.samples, train, kSlicedDirections, dirs);
  a.report.violations = violation_rate(batch.samples, cs);
  a.report.metrics["porosity_error_pct"] = 100.0 * err / static_cast<double>(cfg.n_samples);
  a.report.metrics["exact_k_rate"] = 100.0 * static_cast<double>(exact) / static_cast<double>(cfg.n_samples);
  a.report.metrics["retries"] = static_cast<double>(batch.retries);
  a.continuous_samples = std::move(batch.samples);
  a.trace = std::move(batch.trace);
  fill_trace_metrics(a);
  return a;
}

RunArtifacts run_kinematics(const ExperimentConfig& cfg) {
  RunArtifacts a;
  const auto& p = cfg.kinematics;
  const auto sched = cfg.schedule.build();
  SeededRng data_rng(mix_seed(cfg.seed, kDataStream));
  const auto train = kinematics_training_data(p.g_train, p.horizon, p.train, p.p0_range, data_rng);
  TrainConfig tc = p.training;
  tc.seed = mix_seed(cfg.seed, kModelStream);
  const auto mlp = train_denoiser(train, sched, tc);
  const ConstraintSet cs = scenario_constraints(cfg);
  SamplerConfig sc;
  sc.mode = sampling_mode(cfg.mode);
  sc.retry_cap = cfg.retry_cap;
  sc.alm = cfg.alm;
  auto batch = sample_constrained(mlp, sched, cs, sc, cfg.n_samples, cfg.seed);
  const Vec target = kinematics_rollout({p.p0, 0.0, p.g_sample, p.horizon});
  std::size_t matched = 0;
  double worst = 0.0;
  for (const auto& x : batch.samples) {
    double dev = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) dev = std::max(dev, std::abs(x[t] - target[t]));
    worst = std::max(worst, dev);
    matched += dev <= KinematicsConstraint::kTolerance ? 1 : 0;
  }
  a.report.fidelity_metric = "none";
  a.report.violations = violation_rate(batch.samples, cs);
  a.report.metrics["match_rate"] = 100.0 * static_cast<double>(matched) / static_cast<double>(cfg.n_samples);
  a.report.metrics["max_deviation"] = worst;
  a.report.metrics["train_loss_first"] = mlp.loss_history().front();
  a.report.metrics["train_loss_last"] = mlp.loss_history().back();
  a.continuous_samples = std::move(batch.samples);
  a.trace = std::move(batch.trace);
  fill_trace_metrics(a);
  return a;
}

RunArtifacts run_sequences(const ExperimentConfig& cfg) {
  RunArtifacts a;
  const auto& p = cfg.sequence;
  const auto sched = cfg.schedule.build();
  const auto setup = sequence_setup(cfg);
  const auto noise = DiscreteNoiseSpec::mask(p.vocab);
  const auto model = BigramDenoiser::fit(setup.train, noise, sched);
  const ConstraintSet cs = sequence_constraints(cfg, setup);
  DiscreteSamplerConfig dc;
  dc.mode = discrete_mode(cfg.mode);
  dc.alm = cfg.alm;
  dc.gumbel.temperature = p.gumbel_temperature;
  dc.retry_cap = cfg.retry_cap;
  auto batch = sample_discrete_constrained(model, sched, cs, dc, cfg.n_samples, cfg.seed);
  const std::set<Tokens> distinct(batch.sequences.begin(), batch.sequences.end());
  a.report.fidelity_metric = "total_variation";
  a.report.fidelity = marginal_total_variation(batch.sequences, setup.train, p.vocab);
  a.report.violations = violation_rate(batch.sequences, cs);
  a.report.metrics["repaired"] = static_cast<double>(batch.repaired);
  a.report.metrics["projection_failures"] = static_cast<double>(batch.projection_failures);
  a.report.metrics["retries"] = static_cast<double>(batch.retries);
  a.report.metrics["distinct_samples"] = static_cast<double>(distinct.size());
  a.sequence_samples = std::move(batch.sequences);
  return a;
}

void set_number(json& j, const char* key, double v) { j[key] = v; }

}  // namespace

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::kGmmHalfspace: return "gmm_halfspace";
    case Scenario::kMapf: return "mapf";
    case Scenario::kPorosity: return "porosity";
    case Scenario::kKinematics: return "kinematics";
    case Scenario::kSequencePatterns: return "sequence_patterns";
    case Scenario::kSequenceNovelty: return "sequence_novelty";
    case Scenario::kSequenceSurrogate: return "sequence_surrogate";
  }
  return "unknown";
}

std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::kNsd: return "nsd";
    case RunMode::kUnconstrained: return "unconstrained";
    case RunMode::kPostOnly: return "post_only";
  }
  return "unknown";
}

Scenario scenario_from_string(const std::string& name) {
  for (auto s : {Scenario::kGmmHalfspace, Scenario::kMapf, Scenario::kPorosity, Scenario::kKinematics,
                 Scenario::kSequencePatterns, Scenario::kSequenceNovelty, Scenario::kSequenceSurrogate}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("config: field 'scenario' has unknown value '" + name + "'");
}

RunMode run_mode_from_string(const std::string& name) {
  for (auto m : {RunMode::kNsd, RunMode::kUnconstrained, RunMode::kPostOnly}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("config: field 'mode' has unknown value '" + name + "' (nsd, unconstrained, post_only)");
}

bool is_sequence_scenario(Scenario s) {
  return s == Scenario::kSequencePatterns || s == Scenario::kSequenceNovelty ||
         s == Scenario::kSequenceSurrogate;
}

NoiseSchedule ScheduleSpec::build() const {
  return NoiseSchedule(kind, steps, beta_max, gamma_max, gamma_power);
}

void ExperimentConfig::validate() const {
  require(n_samples >= 1, "n_samples", "must be >= 1");
  require(retry_cap >= 0, "retry_cap", "must be >= 0");
  require(schedule.steps >= 1, "schedule.steps", "must be >= 1");
  require(schedule.beta_max > 0.0 && schedule.beta_max < 1.0, "schedule.beta_max", "must lie in (0, 1)");
  require(schedule.gamma_max > 0.0, "schedule.gamma_max", "must be > 0");
  require(schedule.gamma_power > 0.0, "schedule.gamma_power", "must be > 0");
  try {
    alm.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: alm: ") + e.what());
  }
  switch (scenario) {
    case Scenario::kGmmHalfspace:
      require(!gmm.means.empty(), "gmm.means", "must be nonempty");
      for (const auto& m : gmm.means) require(m.size() == gmm.normal.size(), "gmm.means", "must match the dimension of gmm.normal");
      require(gmm.variance > 0.0, "gmm.variance", "must be > 0");
      require(norm(gmm.normal) > 0.0, "gmm.normal", "must be nonzero");
      require(gmm.reference_samples >= 1, "gmm.reference_samples", "must be >= 1");
      break;
    case Scenario::kMapf:
      require(mapf.agents >= 1, "mapf.agents", "must be >= 1");
      require(mapf.waypoints >= 2, "mapf.waypoints", "must be >= 2");
      require(mapf.variance > 0.0, "mapf.variance", "must be > 0");
      break;
    case Scenario::kPorosity:
      require(porosity.rows >= 1 && porosity.cols >= 1, "porosity.rows", "grid must be nonempty");
      require(porosity.k <= porosity.rows * porosity.cols, "porosity.k", "must not exceed rows * cols");
      require(porosity.train >= 1, "porosity.train", "must be >= 1");
      require(porosity.centres >= 1, "porosity.centres", "must be >= 1");
      require(porosity.variance > 0.0, "porosity.variance", "must be > 0");
      break;
    case Scenario::kKinematics:
      require(kinematics.horizon >= 1, "kinematics.horizon", "must be >= 1");
      require(kinematics.train >= 1, "kinematics.train", "must be >= 1");
      require(kinematics.training.epochs >= 1, "kinematics.epochs", "must be >= 1");
      require(kinematics.training.learning_rate > 0.0, "kinematics.learning_rate", "must be > 0");
      require(kinematics.training.batch_size >= 1, "kinematics.batch_size", "must be >= 1");
      break;
    case Scenario::kSequencePatterns:
    case Scenario::kSequenceNovelty:
    case Scenario::kSequenceSurrogate:
      require(sequence.vocab >= 2, "sequence.vocab", "must be >= 2");
      require(sequence.length >= 1, "sequence.length", "must be >= 1");
      require(sequence.train >= 1, "sequence.train", "must be >= 1");
      require(sequence.gumbel_temperature > 0.0, "sequence.gumbel_temperature", "must be > 0");
      break;
  }
}

ExperimentConfig parse_config(const std::string& text) {
  json root;
  const auto first = text.find_first_not_of(" \t\r\n");
  try {
    if (first != std::string::npos && text[first] == '{') {
      root = json::parse(text);
    } else {
      root = toml_to_json(toml::parse(text));
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: parse error: ") + e.what());
  }
  const Fields top(root, "");
  top.only({"scenario", "mode", "n_samples", "seed", "retry_cap", "schedule", "alm", "gmm", "mapf",
            "porosity", "kinematics", "sequence"});
  ExperimentConfig cfg;
  std::string scenario, mode = "nsd";
  require(top.has("scenario"), "scenario", "is required");
  require(top.has("seed"), "seed", "is required");
  top.read("scenario", scenario);
  top.read("mode", mode);
  cfg.scenario = scenario_from_string(scenario);
  cfg.mode = run_mode_from_string(mode);
  top.read("n_samples", cfg.n_samples);
  top.read("seed", cfg.seed);
  top.read("retry_cap", cfg.retry_cap);

  const auto sched = top.table("schedule");
  sched.only({"kind", "steps", "beta_max", "gamma_max", "gamma_power"});
  std::string kind = to_string(cfg.schedule.kind);
  sched.read("kind", kind);
  try {
    cfg.schedule.kind = schedule_kind_from_string(kind);
  } catch (const std::exception&) {
    throw ConfigError("config: field 'schedule.kind' has unknown value '" + kind + "'");
  }
  sched.read("steps", cfg.schedule.steps);
  sched.read("beta_max", cfg.schedule.beta_max);
  sched.read("gamma_max", cfg.schedule.gamma_max);
  sched.read("gamma_power", cfg.schedule.gamma_power);

  const auto alm = top.table("alm");
  alm.only({"lambda0", "mu0", "gamma", "alpha", "delta", "mu_max", "max_inner_iter", "max_outer_iter"});
  alm.read("lambda0", cfg.alm.lambda0);
  alm.read("mu0", cfg.alm.mu0);
  alm.read("gamma", cfg.alm.gamma);
  alm.read("alpha", cfg.alm.alpha);
  alm.read("delta", cfg.alm.delta);
  alm.read("mu_max", cfg.alm.mu_max);
  alm.read("max_inner_iter", cfg.alm.max_inner_iter);
  alm.read("max_outer_iter", cfg.alm.max_outer_iter);

  const auto gmm = top.table("gmm");
  gmm.only({"means", "variance", "normal", "offset", "reference_samples"});
  if (gmm.has("means")) {
    try {
      cfg.gmm.means = root.at("gmm").at("means").get<std::vector<Vec>>();
    } catch (const std::exception&) {
      throw ConfigError("config: field 'gmm.means' must be a list of points");
    }
  }
  gmm.read("variance", cfg.gmm.variance);
  if (gmm.has("normal")) {
    try {
      cfg.gmm.normal = root.at("gmm").at("normal").get<Vec>();
    } catch (const std::exception&) {
      throw ConfigError("config: field 'gmm.normal' must be a list of numbers");
    }
  }
  gmm.read("offset", cfg.gmm.offset);
  gmm.read("reference_samples", cfg.gmm.reference_samples);

  const auto mapf = top.table("mapf");
  mapf.only({"agents", "obstacles", "waypoints", "variance", "map_file"});
  mapf.read("agents", cfg.mapf.agents);
  mapf.read("obstacles", cfg.mapf.obstacles);
  mapf.read("waypoints", cfg.mapf.waypoints);
  mapf.read("variance", cfg.mapf.variance);
  mapf.read("map_file", cfg.mapf.map_file);

  const auto por = top.table("porosity");
  por.only({"rows", "cols", "k", "train", "centres", "variance"});
  por.read("rows", cfg.porosity.rows);
  por.read("cols", cfg.porosity.cols);
  por.read("k", cfg.porosity.k);
  por.read("train", cfg.porosity.train);
  por.read("centres", cfg.porosity.centres);
  por.read("variance", cfg.porosity.variance);

  const auto kin = top.table("kinematics");
  kin.only({"g_train", "g_sample", "p0", "horizon", "train", "p0_range", "learning_rate", "epochs",
            "batch_size", "hidden"});
  kin.read("g_train", cfg.kinematics.g_train);
  kin.read("g_sample", cfg.kinematics.g_sample);
  kin.read("p0", cfg.kinematics.p0);
  kin.read("horizon", cfg.kinematics.horizon);
  kin.read("train", cfg.kinematics.train);
  kin.read("p0_range", cfg.kinematics.p0_range);
  kin.read("learning_rate", cfg.kinematics.training.learning_rate);
  kin.read("epochs", cfg.kinematics.training.epochs);
  kin.read("batch_size", cfg.kinematics.training.batch_size);
  if (kin.has("hidden")) {
    try {
      cfg.kinematics.training.hidden = root.at("kinematics").at("hidden").get<std::vector<int>>();
    } catch (const std::exception&) {
      throw ConfigError("config: field 'kinematics.hidden' must be a list of integers");
    }
  }

  const auto seq = top.table("sequence");
  seq.only({"vocab", "length", "train", "rules_file", "dataset_file", "surrogate_entries", "tau",
            "gumbel_temperature"});
  seq.read("vocab", cfg.sequence.vocab);
  seq.read("length", cfg.sequence.length);
  seq.read("train", cfg.sequence.train);
  seq.read("rules_file", cfg.sequence.rules_file);
  seq.read("dataset_file", cfg.sequence.dataset_file);
  seq.read("surrogate_entries", cfg.sequence.surrogate_entries);
  seq.read("tau", cfg.sequence.tau);
  seq.read("gumbel_temperature", cfg.sequence.gumbel_temperature);

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  auto cfg = parse_config(text);
  // Data files are resolved relative to the config file.
  const auto base = path.parent_path();
  for (std::string* file : {&cfg.mapf.map_file, &cfg.sequence.rules_file, &cfg.sequence.dataset_file}) {
    if (!file->empty() && std::filesystem::path(*file).is_relative()) *file = (base / *file).string();
  }
  return cfg;
}

std::vector<std::pair<std::string, double>> violation_rate(std::span<const Vec> samples,
                                                           const ConstraintSet& cs) {
  const std::vector<Vec> copy(samples.begin(), samples.end());
  return tally<Vec>(copy, [&](std::size_t) { return cs; },
                    [](const Constraint& c, const Vec& x) { return !c.satisfied(x); });
}

std::vector<std::pair<std::string, double>> violation_rate(const std::vector<Tokens>& samples,
                                                           const ConstraintSet& cs) {
  return tally<Tokens>(samples, [&](std::size_t) { return cs; }, [](const Constraint& c, const Tokens& t) {
    const auto* sc = dynamic_cast<const SequenceConstraint*>(&c);
    if (!sc) throw std::invalid_argument("violation_rate: '" + c.name() + "' is not a sequence constraint");
    return !sc->satisfied_tokens(t);
  });
}

double success_rate(const std::vector<bool>& feasible) {
  if (feasible.empty()) throw std::invalid_argument("success_rate: no instances");
  const auto ok = std::count(feasible.begin(), feasible.end(), true);
  return 100.0 * static_cast<double>(ok) / static_cast<double>(feasible.size());
}

double marginal_total_variation(const std::vector<Tokens>& a, const std::vector<Tokens>& b,
                                std::size_t vocab) {
  if (a.empty() || b.empty()) throw std::invalid_argument("marginal_total_variation: empty sample set");
  const std::size_t length = a.front().size();
  double total = 0.0;
  for (std::size_t i = 0; i < length; ++i) {
    std::vector<double> pa(vocab, 0.0), pb(vocab, 0.0);
    for (const auto& s : a) pa.at(static_cast<std::size_t>(s.at(i))) += 1.0 / static_cast<double>(a.size());
    for (const auto& s : b) pb.at(static_cast<std::size_t>(s.at(i))) += 1.0 / static_cast<double>(b.size());
    double tv = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) tv += std::abs(pa[v] - pb[v]);
    total += 0.5 * tv;
  }
  return total / static_cast<double>(length);
}

ConstraintSet scenario_constraints(const ExperimentConfig& cfg) {
  switch (cfg.scenario) {
    case Scenario::kGmmHalfspace:
      return ConstraintSet{residual_linear(cfg.gmm.normal, cfg.gmm.offset)};
    case Scenario::kMapf:
      return motion_constraints(motion_instance(cfg, 0));
    case Scenario::kPorosity: {
      const std::size_t cells = cfg.porosity.rows * cfg.porosity.cols;
      return ConstraintSet{porosity_constraint({cfg.porosity.rows, cfg.porosity.cols, cfg.porosity.k}),
                           std::make_shared<BoxConstraint>(Vec(cells, -1.0), Vec(cells, 1.0))};
    }
    case Scenario::kKinematics:
      return ConstraintSet{kinematics_constraint(
          {cfg.kinematics.p0, 0.0, cfg.kinematics.g_sample, cfg.kinematics.horizon})};
    case Scenario::kSequencePatterns:
    case Scenario::kSequenceNovelty:
    case Scenario::kSequenceSurrogate:
      return sequence_constraints(cfg, sequence_setup(cfg));
  }
  return {};
}

RunArtifacts execute_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  RunArtifacts a;
  switch (cfg.scenario) {
    case Scenario::kGmmHalfspace: a = run_gmm(cfg); break;
    case Scenario::kMapf: a = run_mapf(cfg); break;
    case Scenario::kPorosity: a = run_porosity(cfg); break;
    case Scenario::kKinematics: a = run_kinematics(cfg); break;
    case Scenario::kSequencePatterns:
    case Scenario::kSequenceNovelty:
    case Scenario::kSequenceSurrogate: a = run_sequences(cfg); break;
  }
  a.report.scenario = to_string(cfg.scenario);
  a.report.mode = to_string(cfg.mode);
  a.report.seed = cfg.seed;
  a.report.n_samples = cfg.n_samples;
  a.report.samples_file = is_sequence_scenario(cfg.scenario) ? "samples.txt" : "samples.csv";
  a.report.trace_file = "trace.csv";
  a.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return a;
}

RunReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& run_dir) {
  auto a = execute_experiment(cfg);
  std::error_code ec;
  std::filesystem::create_directories(run_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + run_dir.string() + ": " + ec.message());
  emit_report(a.report, run_dir);
  std::ostringstream trace;
  a.trace.write_csv(trace);
  write_file_atomic(run_dir / a.report.trace_file, trace.str());
  write_file_atomic(run_dir / a.report.samples_file, is_sequence_scenario(cfg.scenario)
                                                         ? samples_to_text(a.sequence_samples)
                                                         : samples_to_text(a.continuous_samples));
  json timing;
  timing["wall_seconds"] = a.wall_seconds;
  write_file_atomic(run_dir / "timing.json", timing.dump(2) + "\n");
  return a.report;
}

std::string report_to_json(const RunReport& r) {
  json j;
  j["scenario"] = r.scenario;
  j["mode"] = r.mode;
  j["seed"] = r.seed;
  j["n_samples"] = r.n_samples;
  json v = json::array();
  for (const auto& [name, pct] : r.violations) v.push_back({{"constraint", name}, {"percent", pct}});
  j["violations"] = v;
  j["fidelity_metric"] = r.fidelity_metric;
  set_number(j, "fidelity", r.fidelity);
  j["metrics"] = json(r.metrics);
  j["samples_file"] = r.samples_file;
  j["trace_file"] = r.trace_file;
  return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
  const auto j = json::parse(text);
  RunReport r;
  r.scenario = j.at("scenario").get<std::string>();
  r.mode = j.at("mode").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  for (const auto& v : j.at("violations")) {
    r.violations.emplace_back(v.at("constraint").get<std::string>(), v.at("percent").get<double>());
  }
  r.fidelity_metric = j.at("fidelity_metric").get<std::string>();
  r.fidelity = j.at("fidelity").get<double>();
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  r.samples_file = j.at("samples_file").get<std::string>();
  r.trace_file = j.at("trace_file").get<std::string>();
  return r;
}

std::string report_to_csv(const RunReport& r) {
  std::ostringstream out;
  char buf[64];
  const auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "key,value\n";
  out << "scenario," << r.scenario << "\n";
  out << "mode," << r.mode << "\n";
  out << "seed," << r.seed << "\n";
  out << "n_samples," << r.n_samples << "\n";
  for (const auto& [name, pct] : r.violations) out << "violation_" << name << "," << num(pct) << "\n";
  out << "fidelity_metric," << r.fidelity_metric << "\n";
  out << "fidelity," << num(r.fidelity) << "\n";
  for (const auto& [name, v] : r.metrics) out << "metric_" << name << "," << num(v) << "\n";
  out << "samples_file," << r.samples_file << "\n";
  out << "trace_file," << r.trace_file << "\n";
  return out.str();
}

void emit_report(const RunReport& report, const std::filesystem::path& dir) {
  write_file_atomic(dir / "report.json", report_to_json(report));
  write_file_atomic(dir / "report.csv", report_to_csv(report));
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string samples_to_text(const std::vector<Vec>& samples) {
  std::string out;
  char buf[64];
  for (const auto& x : samples) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.17g", i ? "," : "", x[i]);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

std::string samples_to_text(const std::vector<Tokens>& samples) {
  std::string out;
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + std::to_string(s[i]);
    out += "\n";
  }
  return out;
}

std::vector<Vec> continuous_samples_from_text(const std::string& text) {
  std::vector<Vec> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Vec x;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        x.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::invalid_argument("samples: bad number '" + cell + "'");
      }
    }
    out.push_back(std::move(x));
  }
  return out;
}

std::vector<Tokens> sequence_samples_from_text(const std::string& text) {
  std::vector<Tokens> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    Tokens t;
    int v;
    while (ls >> v) t.push_back(v);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::pair<std::string, double>> check_samples(const ExperimentConfig& cfg,
                                                          const std::string& samples_text) {
  if (is_sequence_scenario(cfg.scenario)) {
    return violation_rate(sequence_samples_from_text(samples_text), scenario_constraints(cfg));
  }
  const auto samples = continuous_samples_from_text(samples_text);
  if (cfg.scenario == Scenario::kMapf) {
    return tally<Vec>(samples, [&](std::size_t i) { return motion_constraints(motion_instance(cfg, i)); },
                      [](const Constraint& c, const Vec& x) { return !c.satisfied(x); });
  }
  return violation_rate(samples, scenario_constraints(cfg));
}

}  // namespace nsd
