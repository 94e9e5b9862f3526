#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsd/models.hpp"
#include "nsd/numerics.hpp"
#include "nsd/projections.hpp"
#include "nsd/sampler_discrete.hpp"
#include "nsd/sequence.hpp"

namespace nsd {

/// No feasible output exists (e.g. the dataset covers every sequence).
class Infeasible : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Multi-agent trajectories

using Point2 = std::array<double, 2>;

/// A agents x J waypoints in the plane, stored flat as
/// positions[(a * J + j) * 2 + {0, 1}].
struct AgentTrajectoryBundle {
  std::size_t agents = 0;
  std::size_t steps = 0;
  Vec positions;
  Vec radii;

  AgentTrajectoryBundle(std::size_t agents, std::size_t steps, Vec positions, Vec radii);

  std::size_t index(std::size_t agent, std::size_t step) const { return (agent * steps + step) * 2; }
  Point2 at(std::size_t agent, std::size_t step) const;
  /// Required separation of agents a and b: the sum of their radii.
  double d_min(std::size_t a, std::size_t b) const { return radii[a] + radii[b]; }
};

struct Obstacle {
  Point2 center;
  double radius;
};

struct ObstacleMap {
  Point2 lo{0.0, 0.0};
  Point2 hi{10.0, 10.0};
  std::vector<Obstacle> obstacles;

  /// Radii must be positive and centers inside the bounds.
  void validate() const;
};

struct AgentTask {
  Point2 start;
  Point2 goal;
  double radius;
};

/// A map plus one start/goal pair per agent and a waypoint count.
struct MotionProblem {
  ObstacleMap map;
  std::vector<AgentTask> agents;
  std::size_t steps = 16;

  void validate() const;
  Vec radii() const;
  std::size_t dim() const { return agents.size() * steps * 2; }

  /// JSON map file: {"bounds": [[x0, y0], [x1, y1]],
  /// "obstacles": [{"center": [x, y], "radius": r}],
  /// "agents": [{"start": [x, y], "goal": [x, y], "radius": r}], "steps": J}.
  static MotionProblem from_json_text(const std::string& text);
  static MotionProblem load(const std::string& path);
};

/// Random instance: obstacles away from the border, starts and goals outside
/// every obstacle (with margin) and pairwise separated.
MotionProblem random_motion_problem(std::size_t n_agents, std::size_t n_obstacles,
                                    std::size_t steps, SeededRng& rng);

/// Straight lines from start to goal, evenly spaced in time.
AgentTrajectoryBundle straight_line_bundle(const MotionProblem& problem);

/// Pairwise separation: residual sum over pairs and steps of
/// max(0, d_min - ||p_a - p_b||). One multiplier component per pair and step.
class CollisionConstraint final : public Constraint {
 public:
  CollisionConstraint(std::size_t agents, std::size_t steps, Vec radii);

  std::string name() const override { return "collision"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x, std::span<double> grad) const override;
  std::size_t num_components() const override;
  void component_residuals(std::span<const double> x, std::span<double> out) const override;
  void component_gradient(std::span<const double> x, std::size_t j,
                          std::span<double> grad) const override;

 private:
  struct Term {
    std::size_t a, b, step;
  };
  void check_size(std::span<const double> x) const;
  double hinge(std::span<const double> x, const Term& term) const;
  void add_hinge_gradient(std::span<const double> x, const Term& term, std::span<double> grad) const;

  std::size_t agents_, steps_;
  Vec radii_;
  std::vector<Term> terms_;
};

/// Obstacle clearance ||p - o_k|| >= r_k for every agent, step and obstacle.
class ObstacleConstraint final : public Constraint {
 public:
  ObstacleConstraint(std::size_t agents, std::size_t steps, std::vector<Obstacle> obstacles);

  std::string name() const override { return "obstacle"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x, std::span<double> grad) const override;
  std::size_t num_components() const override;
  void component_residuals(std::span<const double> x, std::span<double> out) const override;
  void component_gradient(std::span<const double> x, std::size_t j,
                          std::span<double> grad) const override;

 private:
  void check_size(std::span<const double> x) const;
  double hinge(std::span<const double> x, std::size_t j) const;
  void add_hinge_gradient(std::span<const double> x, std::size_t j, std::span<double> grad) const;

  std::size_t agents_, steps_;
  std::vector<Obstacle> obstacles_;
};

/// First and last waypoint of each agent equal its start and goal. Residual:
/// summed endpoint distances; exact projection overwrites the endpoints.
class EndpointConstraint final : public Constraint {
 public:
  explicit EndpointConstraint(const MotionProblem& problem);

  std::string name() const override { return "endpoints"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x, std::span<double> grad) const override;
  bool is_convex() const override { return true; }
  bool supports_exact_projection() const override { return true; }
  Vec project_exact(std::span<const double> x) const override;

  /// Endpoint coordinates pinned to their targets.
  const Pins& pins() const { return pins_; }

 private:
  Pins pins_;
};

std::shared_ptr<CollisionConstraint> collision_constraint(const AgentTrajectoryBundle& bundle);
std::shared_ptr<ObstacleConstraint> obstacle_constraint(const AgentTrajectoryBundle& bundle,
                                                        const ObstacleMap& map);

/// Projection for trajectory bundles: endpoints are pinned, all interior
/// waypoints are optimized jointly.
ProjectionResult project_trajectories(std::span<const double> x, const EndpointConstraint& ends,
                                      const ConstraintSet& cs, const AlmConfig& cfg,
                                      AlmWarmState* warm = nullptr);

/// Score model for a motion problem: a Gaussian around the straight-line
/// bundle with isotropic variance `variance`.
GmmScoreModel motion_model(const MotionProblem& problem, const NoiseSchedule& schedule,
                           double variance);

/// Sum of segment lengths per agent.
std::vector<double> path_lengths(const AgentTrajectoryBundle& bundle);
double mean_path_length(const AgentTrajectoryBundle& bundle);

// ---------------------------------------------------------------------------
// Porosity

struct PorosityTarget {
  std::size_t rows = 16;
  std::size_t cols = 16;
  std::size_t k = 0;

  void validate() const;
  std::size_t cells() const { return rows * cols; }
};

std::size_t count_negative(std::span<const double> grid);
/// sum_i sigmoid(-x_i / width).
double soft_negative_count(std::span<const double> grid, double width);

/// Exactly K cells below zero.
///
/// Residual: 0 when the count is exactly K, otherwise
/// max(|soft_count - K|, kViolationFloor) with the sigmoid count above.
/// Exact projection: clamp to [-1, 1], then project_topk_negative.
class PorosityConstraint final : public Constraint {
 public:
  static constexpr double kDefaultWidth = 0.05;
  static constexpr double kDefaultEpsilon = 1e-3;
  static constexpr double kViolationFloor = 1e-6;

  explicit PorosityConstraint(PorosityTarget target, double width = kDefaultWidth,
                              double epsilon = kDefaultEpsilon);

  std::string name() const override { return "porosity"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x, std::span<double> grad) const override;
  bool satisfied(std::span<const double> x) const override;
  bool supports_exact_projection() const override { return true; }
  Vec project_exact(std::span<const double> x) const override;

  const PorosityTarget& target() const { return target_; }

 private:
  void check_size(std::span<const double> x) const;

  PorosityTarget target_;
  double width_;
  double epsilon_;
};

std::shared_ptr<PorosityConstraint> porosity_constraint(const PorosityTarget& target);

/// Synthetic microstructure patches in [-1, 1]: tanh of a sum of random
/// Gaussian bumps with random sign and an offset that sets the porosity.
std::vector<Vec> porosity_training_grids(std::size_t rows, std::size_t cols, std::size_t n,
                                         SeededRng& rng);

/// Kernel model: equal-weight mixture centred on `centres` training grids
/// (the first ones in `data`) with isotropic variance `variance`.
GmmScoreModel porosity_model(std::span<const Vec> data, std::size_t centres,
                             const NoiseSchedule& schedule, double variance);

// ---------------------------------------------------------------------------
// Kinematics

struct KinematicsSpec {
  double p0 = 0.0;
  double v0 = 0.0;
  double g = 1.0;
  std::size_t horizon = 8;

  void validate() const;
};

/// Positions p_1..p_F under unit timesteps: v_t = v_{t-1} + g and
/// p_t = p_{t-1} + v_{t-1} + g / 2, so p_t = p0 + v0 t + g t^2 / 2.
Vec kinematics_rollout(const KinematicsSpec& spec);

/// Sample equals the rollout. Residual: L2 distance to the rollout. The
/// predicate allows kTolerance of L2 deviation (hence at most kTolerance at
/// any step); exact projection overwrites with the rollout.
class KinematicsConstraint final : public Constraint {
 public:
  static constexpr double kTolerance = 1e-9;

  explicit KinematicsConstraint(KinematicsSpec spec);

  std::string name() const override { return "kinematics"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x, std::span<double> grad) const override;
  bool satisfied(std::span<const double> x) const override;
  bool is_convex() const override { return true; }
  bool supports_exact_projection() const override { return true; }
  Vec project_exact(std::span<const double> x) const override;

  const Vec& rollout() const { return rollout_; }

 private:
  void check_size(std::span<const double> x) const;

  KinematicsSpec spec_;
  Vec rollout_;
};

std::shared_ptr<KinematicsConstraint> kinematics_constraint(const KinematicsSpec& spec);

/// Rollouts with p0 uniform in [-p0_range, p0_range] and v0 = 0.
std::vector<Vec> kinematics_training_data(double g, std::size_t horizon, std::size_t n,
                                          double p0_range, SeededRng& rng);

// ---------------------------------------------------------------------------
// Token sequences

/// A forbidden n-gram with ordered replacement candidates. If no candidate
/// leaves the rewritten site clean the match is deleted.
struct PatternRule {
  Tokens pattern;
  std::vector<Tokens> replacements;

  /// Pattern nonempty; replacements no longer than the pattern and free of it.
  void validate() const;
};

/// Five rules over data tokens 0..7.
std::vector<PatternRule> default_pattern_rules();
/// JSON rule file: [{"pattern": [..], "replacements": [[..], ..]}, ..].
std::vector<PatternRule> pattern_rules_from_json_text(const std::string& text);
std::vector<PatternRule> load_pattern_rules(const std::string& path);

/// Number of (rule, start) pairs where the rule's pattern occurs.
std::size_t count_pattern_matches(const Tokens& tokens, const std::vector<PatternRule>& rules);

/// Left-to-right repair. At the leftmost match (ties: rule order) the first
/// replacement that leaves no match overlapping the rewritten site is
/// applied, otherwise the span is deleted. Repeats until no rule matches.
Tokens pattern_repair(Tokens tokens, const std::vector<PatternRule>& rules);

/// No rule pattern occurs. Residual: expected number of matches under the
/// product distribution of the rows. repair() applies pattern_repair and
/// pads deletions back to full length with the lowest tokens that keep the
/// sequence clean.
class PatternConstraint final : public SequenceConstraint {
 public:
  PatternConstraint(std::size_t length, std::size_t vocab, std::vector<PatternRule> rules,
                    std::size_t data_vocab = 0);

  std::string name() const override { return "patterns"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x, std::span<double> grad) const override;
  bool satisfied_tokens(const Tokens& tokens) const override;
  std::optional<Tokens> repair(const Tokens& tokens,
                               const CategoricalSequence& rows) const override;

  const std::vector<PatternRule>& rules() const { return rules_; }

 private:
  std::vector<PatternRule> rules_;
  std::size_t data_vocab_;
};

/// Set of known sequences, plus everything novelty_project has emitted.
class DatasetView {
 public:
  DatasetView() = default;
  explicit DatasetView(std::vector<Tokens> sequences);

  /// One sequence per line, tokens separated by whitespace.
  static DatasetView load(const std::string& path);

  bool contains(const Tokens& s) const { return set_.count(s) > 0; }
  bool add(const Tokens& s) { return set_.insert(s).second; }
  std::size_t size() const { return set_.size(); }
  const std::set<Tokens>& sequences() const { return set_; }

 private:
  std::set<Tokens> set_;
};

/// Decoded sequence is not in the dataset. Residual: total probability of
/// the dataset sequences under the product distribution of the rows.
class NoveltyConstraint final : public SequenceConstraint {
 public:
  NoveltyConstraint(std::size_t length, std::size_t vocab,
                    std::shared_ptr<const DatasetView> dataset, std::size_t data_vocab = 0);

  std::string name() const override { return "novelty"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x, std::span<double> grad) const override;
  bool satisfied_tokens(const Tokens& tokens) const override;
  std::optional<Tokens> repair(const Tokens& tokens,
                               const CategoricalSequence& rows) const override;

 private:
  std::shared_ptr<const DatasetView> dataset_;
  std::size_t data_vocab_;
};

/// Cheapest sequence by flip cost that is not in `dataset` (ties:
/// lexicographically smallest), returned as rows whose argmax is that
/// sequence. The sequence is added to the view so later calls avoid it.
/// Only tokens < vocab_limit (0: all) are used. Throws Infeasible when the
/// view already covers every sequence or the search budget runs out.
CategoricalSequence novelty_project(const CategoricalSequence& x, DatasetView& dataset,
                                    std::size_t vocab_limit = 0,
                                    std::size_t max_expansions = 1'000'000);

/// Linear n-gram scorer: score(s) = sum over positions and entries of
/// weight * [s matches the entry's n-gram there].
struct SurrogateScorer {
  struct Entry {
    Tokens ngram;
    double weight;
  };
  std::vector<Entry> entries;
  double tau = 0.0;

  double hard_score(const Tokens& tokens) const;
  /// Same sum with the indicator replaced by the product of row entries.
  double soft_score(std::span<const double> rows, std::size_t length, std::size_t vocab) const;
  void soft_score_gradient(std::span<const double> rows, std::size_t length, std::size_t vocab,
                           std::span<double> grad) const;
};

/// Random scorer with `n_entries` bigrams of weight in [0.5, 1.5].
SurrogateScorer random_surrogate(std::size_t data_vocab, std::size_t n_entries, double tau,
                                 SeededRng& rng);

/// hard_score <= tau. Residual: max(0, soft_score - tau).
class SurrogateConstraint final : public SequenceConstraint {
 public:
  SurrogateConstraint(std::size_t length, std::size_t vocab, SurrogateScorer scorer);

  std::string name() const override { return "surrogate"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x, std::span<double> grad) const override;
  bool satisfied_tokens(const Tokens& tokens) const override;

 private:
  SurrogateScorer scorer_;
};

/// Sequences from a random sparse Markov chain over data tokens whose
/// transitions favour the patterns of `rules`, so unconstrained models
/// reproduce them.
std::vector<Tokens> toy_sequence_data(std::size_t data_vocab, std::size_t length, std::size_t n,
                                      const std::vector<PatternRule>& rules, SeededRng& rng);

}  // namespace nsd
