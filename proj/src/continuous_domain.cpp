#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nsd/constraints_domain.hpp"

namespace nsd {

namespace {

// Direction used for the hinge gradient when two points coincide.
constexpr Point2 kTieDirection{1.0, 0.0};
constexpr double kStartMargin = 0.3;
constexpr int kPlacementAttempts = 10'000;

Point2 point_at(std::span<const double> x, std::size_t i) { return {x[i], x[i + 1]}; }

double point_distance(const Point2& a, const Point2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

// Unit vector from b to a.
Point2 unit_from(const Point2& a, const Point2& b) {
  const double d = point_distance(a, b);
  if (d == 0.0) return kTieDirection;
  return {(a[0] - b[0]) / d, (a[1] - b[1]) / d};
}

Point2 read_point(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 2) throw std::invalid_argument(std::string("map: ") + what + " must be [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

AgentTrajectoryBundle::AgentTrajectoryBundle(std::size_t agents_, std::size_t steps_, Vec positions_,
                                             Vec radii_)
    : agents(agents_), steps(steps_), positions(std::move(positions_)), radii(std::move(radii_)) {
  if (steps < 2) throw std::invalid_argument("trajectory bundle: need at least 2 waypoints");
  if (positions.size() != agents * steps * 2) throw std::invalid_argument("trajectory bundle: position count mismatch");
  if (radii.size() != agents) throw std::invalid_argument("trajectory bundle: one radius per agent");
}

Point2 AgentTrajectoryBundle::at(std::size_t agent, std::size_t step) const {
  return point_at(positions, index(agent, step));
}

void ObstacleMap::validate() const {
  if (!(lo[0] < hi[0] && lo[1] < hi[1])) throw std::invalid_argument("map: empty bounds");
  for (const auto& o : obstacles) {
    if (!(o.radius > 0.0)) throw std::invalid_argument("map: obstacle radius must be > 0");
    if (o.center[0] < lo[0] || o.center[0] > hi[0] || o.center[1] < lo[1] || o.center[1] > hi[1]) {
      throw std::invalid_argument("map: obstacle center outside bounds");
    }
  }
}

void MotionProblem::validate() const {
  map.validate();
  if (agents.empty()) throw std::invalid_argument("motion problem: no agents");
  if (steps < 2) throw std::invalid_argument("motion problem: steps must be >= 2");
  for (const auto& a : agents) {
    if (!(a.radius > 0.0)) throw std::invalid_argument("motion problem: agent radius must be > 0");
  }
}

Vec MotionProblem::radii() const {
  Vec r;
  for (const auto& a : agents) r.push_back(a.radius);
  return r;
}

MotionProblem MotionProblem::from_json_text(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MotionProblem p;
  if (j.contains("bounds")) {
    const auto& b = j.at("bounds");
    if (!b.is_array() || b.size() != 2) throw std::invalid_argument("map: bounds must be [[x0, y0], [x1, y1]]");
    p.map.lo = read_point(b[0], "bounds");
    p.map.hi = read_point(b[1], "bounds");
  }
  for (const auto& o : j.value("obstacles", nlohmann::json::array())) {
    p.map.obstacles.push_back({read_point(o.at("center"), "center"), o.at("radius").get<double>()});
  }
  for (const auto& a : j.at("agents")) {
    p.agents.push_back({read_point(a.at("start"), "start"), read_point(a.at("goal"), "goal"),
                        a.value("radius", 0.25)});
  }
  p.steps = j.value("steps", std::size_t{16});
  p.validate();
  return p;
}

MotionProblem MotionProblem::load(const std::string& path) { return from_json_text(read_file(path)); }

MotionProblem random_motion_problem(std::size_t n_agents, std::size_t n_obstacles, std::size_t steps,
                                    SeededRng& rng) {
  MotionProblem p;
  p.steps = steps;
  const double agent_radius = 0.25;
  const auto span_x = p.map.hi[0] - p.map.lo[0];
  const auto span_y = p.map.hi[1] - p.map.lo[1];
  for (std::size_t k = 0; k < n_obstacles; ++k) {
    const double r = 0.6 + 0.6 * rng.uniform();
    p.map.obstacles.push_back({{p.map.lo[0] + span_x * (0.2 + 0.6 * rng.uniform()),
                                p.map.lo[1] + span_y * (0.2 + 0.6 * rng.uniform())},
                               r});
  }
  std::vector<Point2> placed;
  const auto place = [&]() {
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      const Point2 q{p.map.lo[0] + agent_radius + (span_x - 2 * agent_radius) * rng.uniform(),
                     p.map.lo[1] + agent_radius + (span_y - 2 * agent_radius) * rng.uniform()};
      bool ok = true;
      for (const auto& o : p.map.obstacles) {
        ok = ok && point_distance(q, o.center) >= o.radius + agent_radius + kStartMargin;
      }
      for (const auto& other : placed) ok = ok && point_distance(q, other) >= 2 * agent_radius + kStartMargin;
      if (ok) {
        placed.push_back(q);
        return q;
      }
    }
    throw Infeasible("random_motion_problem: could not place agents");
  };
  std::vector<Point2> starts, goals;
  for (std::size_t a = 0; a < n_agents; ++a) starts.push_back(place());
  for (std::size_t a = 0; a < n_agents; ++a) goals.push_back(place());
  for (std::size_t a = 0; a < n_agents; ++a) p.agents.push_back({starts[a], goals[a], agent_radius});
  p.validate();
  return p;
}

AgentTrajectoryBundle straight_line_bundle(const MotionProblem& problem) {
  problem.validate();
  Vec pos(problem.dim());
  for (std::size_t a = 0; a < problem.agents.size(); ++a) {
    const auto& task = problem.agents[a];
    for (std::size_t j = 0; j < problem.steps; ++j) {
      const double s = static_cast<double>(j) / static_cast<double>(problem.steps - 1);
      for (int c = 0; c < 2; ++c) {
        pos[(a * problem.steps + j) * 2 + c] = (1.0 - s) * task.start[c] + s * task.goal[c];
      }
    }
  }
  return AgentTrajectoryBundle(problem.agents.size(), problem.steps, std::move(pos), problem.radii());
}

CollisionConstraint::CollisionConstraint(std::size_t agents, std::size_t steps, Vec radii)
    : agents_(agents), steps_(steps), radii_(std::move(radii)) {
  if (agents < 2) throw std::invalid_argument("collision constraint: need at least 2 agents");
  if (radii_.size() != agents) throw std::invalid_argument("collision constraint: one radius per agent");
  for (std::size_t a = 0; a < agents; ++a) {
    for (std::size_t b = a + 1; b < agents; ++b) {
      for (std::size_t j = 0; j < steps; ++j) terms_.push_back({a, b, j});
    }
  }
}

void CollisionConstraint::check_size(std::span<const double> x) const {
  if (x.size() != agents_ * steps_ * 2) throw std::invalid_argument("collision constraint: dimension mismatch");
}

double CollisionConstraint::hinge(std::span<const double> x, const Term& t) const {
  const Point2 pa = point_at(x, (t.a * steps_ + t.step) * 2);
  const Point2 pb = point_at(x, (t.b * steps_ + t.step) * 2);
  return std::max(0.0, radii_[t.a] + radii_[t.b] - point_distance(pa, pb));
}

void CollisionConstraint::add_hinge_gradient(std::span<const double> x, const Term& t,
                                             std::span<double> grad) const {
  if (hinge(x, t) <= 0.0) return;
  const std::size_t ia = (t.a * steps_ + t.step) * 2;
  const std::size_t ib = (t.b * steps_ + t.step) * 2;
  const Point2 u = unit_from(point_at(x, ia), point_at(x, ib));
  for (int c = 0; c < 2; ++c) {
    grad[ia + c] -= u[c];
    grad[ib + c] += u[c];
  }
}

double CollisionConstraint::residual(std::span<const double> x) const {
  check_size(x);
  double r = 0.0;
  for (const auto& t : terms_) r += hinge(x, t);
  return r;
}

void CollisionConstraint::residual_gradient(std::span<const double> x, std::span<double> grad) const {
  check_size(x);
  std::fill(grad.begin(), grad.end(), 0.0);
  for (const auto& t : terms_) add_hinge_gradient(x, t, grad);
}

std::size_t CollisionConstraint::num_components() const { return terms_.size(); }

void CollisionConstraint::component_residuals(std::span<const double> x, std::span<double> out) const {
  check_size(x);
  for (std::size_t k = 0; k < terms_.size(); ++k) out[k] = hinge(x, terms_[k]);
}

void CollisionConstraint::component_gradient(std::span<const double> x, std::size_t j,
                                             std::span<double> grad) const {
  check_size(x);
  std::fill(grad.begin(), grad.end(), 0.0);
  add_hinge_gradient(x, terms_.at(j), grad);
}

ObstacleConstraint::ObstacleConstraint(std::size_t agents, std::size_t steps,
                                       std::vector<Obstacle> obstacles)
    : agents_(agents), steps_(steps), obstacles_(std::move(obstacles)) {
  for (const auto& o : obstacles_) {
    if (!(o.radius > 0.0)) throw std::invalid_argument("obstacle constraint: radius must be > 0");
  }
}

void ObstacleConstraint::check_size(std::span<const double> x) const {
  if (x.size() != agents_ * steps_ * 2) throw std::invalid_argument("obstacle constraint: dimension mismatch");
}

std::size_t ObstacleConstraint::num_components() const {
  return std::max<std::size_t>(1, agents_ * steps_ * obstacles_.size());
}

// Component j covers waypoint j / K against obstacle j % K.
double ObstacleConstraint::hinge(std::span<const double> x, std::size_t j) const {
  const auto& o = obstacles_[j % obstacles_.size()];
  return std::max(0.0, o.radius - point_distance(point_at(x, (j / obstacles_.size()) * 2), o.center));
}

void ObstacleConstraint::add_hinge_gradient(std::span<const double> x, std::size_t j,
                                            std::span<double> grad) const {
  if (hinge(x, j) <= 0.0) return;
  const std::size_t i = (j / obstacles_.size()) * 2;
  const Point2 u = unit_from(point_at(x, i), obstacles_[j % obstacles_.size()].center);
  grad[i] -= u[0];
  grad[i + 1] -= u[1];
}

double ObstacleConstraint::residual(std::span<const double> x) const {
  check_size(x);
  double r = 0.0;
  for (std::size_t j = 0; j < agents_ * steps_ * obstacles_.size(); ++j) r += hinge(x, j);
  return r;
}

void ObstacleConstraint::residual_gradient(std::span<const double> x, std::span<double> grad) const {
  check_size(x);
  std::fill(grad.begin(), grad.end(), 0.0);
  for (std::size_t j = 0; j < agents_ * steps_ * obstacles_.size(); ++j) add_hinge_gradient(x, j, grad);
}

void ObstacleConstraint::component_residuals(std::span<const double> x, std::span<double> out) const {
  check_size(x);
  if (obstacles_.empty()) {
    out[0] = 0.0;
    return;
  }
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = hinge(x, j);
}

void ObstacleConstraint::component_gradient(std::span<const double> x, std::size_t j,
                                            std::span<double> grad) const {
  check_size(x);
  std::fill(grad.begin(), grad.end(), 0.0);
  if (!obstacles_.empty()) add_hinge_gradient(x, j, grad);
}

EndpointConstraint::EndpointConstraint(const MotionProblem& problem) : pins_(problem.dim()) {
  problem.validate();
  for (std::size_t a = 0; a < problem.agents.size(); ++a) {
    const std::size_t first = a * problem.steps * 2;
    const std::size_t last = first + (problem.steps - 1) * 2;
    for (int c = 0; c < 2; ++c) {
      pins_[first + c] = problem.agents[a].start[c];
      pins_[last + c] = problem.agents[a].goal[c];
    }
  }
}

double EndpointConstraint::residual(std::span<const double> x) const {
  if (x.size() != pins_.size()) throw std::invalid_argument("endpoint constraint: dimension mismatch");
  double r = 0.0;
  for (std::size_t i = 0; i < x.size(); i += 2) {
    if (pins_[i]) r += point_distance(point_at(x, i), {*pins_[i], *pins_[i + 1]});
  }
  return r;
}

void EndpointConstraint::residual_gradient(std::span<const double> x, std::span<double> grad) const {
  if (x.size() != pins_.size()) throw std::invalid_argument("endpoint constraint: dimension mismatch");
  std::fill(grad.begin(), grad.end(), 0.0);
  for (std::size_t i = 0; i < x.size(); i += 2) {
    if (!pins_[i]) continue;
    const Point2 target{*pins_[i], *pins_[i + 1]};
    if (point_distance(point_at(x, i), target) == 0.0) continue;
    const Point2 u = unit_from(point_at(x, i), target);
    grad[i] = u[0];
    grad[i + 1] = u[1];
  }
}

Vec EndpointConstraint::project_exact(std::span<const double> x) const {
  if (x.size() != pins_.size()) throw std::invalid_argument("endpoint constraint: dimension mismatch");
  Vec y(x.begin(), x.end());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (pins_[i]) y[i] = *pins_[i];
  }
  return y;
}

std::shared_ptr<CollisionConstraint> collision_constraint(const AgentTrajectoryBundle& bundle) {
  return std::make_shared<CollisionConstraint>(bundle.agents, bundle.steps, bundle.radii);
}

std::shared_ptr<ObstacleConstraint> obstacle_constraint(const AgentTrajectoryBundle& bundle,
                                                        const ObstacleMap& map) {
  map.validate();
  return std::make_shared<ObstacleConstraint>(bundle.agents, bundle.steps, map.obstacles);
}

ProjectionResult project_trajectories(std::span<const double> x, const EndpointConstraint& ends,
                                      const ConstraintSet& cs, const AlmConfig& cfg,
                                      AlmWarmState* warm) {
  return project_pinned(x, ends.pins(), cs, cfg, warm);
}

GmmScoreModel motion_model(const MotionProblem& problem, const NoiseSchedule& schedule,
                           double variance) {
  return GmmScoreModel(GaussianMixture::isotropic({straight_line_bundle(problem).positions}, variance),
                       schedule);
}

std::vector<double> path_lengths(const AgentTrajectoryBundle& bundle) {
  std::vector<double> out(bundle.agents, 0.0);
  for (std::size_t a = 0; a < bundle.agents; ++a) {
    for (std::size_t j = 1; j < bundle.steps; ++j) out[a] += point_distance(bundle.at(a, j - 1), bundle.at(a, j));
  }
  return out;
}

double mean_path_length(const AgentTrajectoryBundle& bundle) {
  const auto lengths = path_lengths(bundle);
  double s = 0.0;
  for (double l : lengths) s += l;
  return lengths.empty() ? 0.0 : s / static_cast<double>(lengths.size());
}

void PorosityTarget::validate() const {
  if (rows == 0 || cols == 0) throw std::invalid_argument("porosity: grid must be nonempty");
  if (k > rows * cols) throw std::invalid_argument("porosity: K exceeds the number of cells");
}

std::size_t count_negative(std::span<const double> grid) {
  return static_cast<std::size_t>(std::count_if(grid.begin(), grid.end(), [](double v) { return v < 0.0; }));
}

double soft_negative_count(std::span<const double> grid, double width) {
  double s = 0.0;
  for (double v : grid) s += 1.0 / (1.0 + std::exp(v / width));
  return s;
}

PorosityConstraint::PorosityConstraint(PorosityTarget target, double width, double epsilon)
    : target_(target), width_(width), epsilon_(epsilon) {
  target_.validate();
  if (!(width > 0.0)) throw std::invalid_argument("porosity: width must be > 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("porosity: epsilon must lie in (0, 1)");
}

void PorosityConstraint::check_size(std::span<const double> x) const {
  if (x.size() != target_.cells()) throw std::invalid_argument("porosity: dimension mismatch");
}

bool PorosityConstraint::satisfied(std::span<const double> x) const {
  check_size(x);
  return count_negative(x) == target_.k;
}

double PorosityConstraint::residual(std::span<const double> x) const {
  if (satisfied(x)) return 0.0;
  const double gap = std::abs(soft_negative_count(x, width_) - static_cast<double>(target_.k));
  return std::max(gap, kViolationFloor);
}

void PorosityConstraint::residual_gradient(std::span<const double> x, std::span<double> grad) const {
  std::fill(grad.begin(), grad.end(), 0.0);
  if (satisfied(x)) return;
  const double gap = soft_negative_count(x, width_) - static_cast<double>(target_.k);
  if (std::abs(gap) <= kViolationFloor) return;
  const double sign = gap > 0.0 ? 1.0 : -1.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(x[i] / width_));
    grad[i] = -sign * s * (1.0 - s) / width_;
  }
}

Vec PorosityConstraint::project_exact(std::span<const double> x) const {
  check_size(x);
  Vec clamped(x.begin(), x.end());
  for (double& v : clamped) v = std::clamp(v, -1.0, 1.0);
  return project_topk_negative(clamped, target_.k, epsilon_);
}

std::shared_ptr<PorosityConstraint> porosity_constraint(const PorosityTarget& target) {
  return std::make_shared<PorosityConstraint>(target);
}

std::vector<Vec> porosity_training_grids(std::size_t rows, std::size_t cols, std::size_t n,
                                         SeededRng& rng) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("porosity grids: empty shape");
  std::vector<Vec> out;
  out.reserve(n);
  for (std::size_t g = 0; g < n; ++g) {
    Vec field(rows * cols, 0.2 * (2.0 * rng.uniform() - 1.0));
    const int bumps = 4 + static_cast<int>(rng.below(5));
    for (int b = 0; b < bumps; ++b) {
      const double ci = rng.uniform() * static_cast<double>(rows);
      const double cj = rng.uniform() * static_cast<double>(cols);
      const double width = 1.5 + 2.5 * rng.uniform();
      const double amp = rng.uniform() < 0.5 ? -1.0 : 1.0;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          const double di = static_cast<double>(i) - ci;
          const double dj = static_cast<double>(j) - cj;
          field[i * cols + j] += amp * std::exp(-(di * di + dj * dj) / (2.0 * width * width));
        }
      }
    }
    for (double& v : field) v = std::tanh(2.0 * v);
    out.push_back(std::move(field));
  }
  return out;
}

GmmScoreModel porosity_model(std::span<const Vec> data, std::size_t centres,
                             const NoiseSchedule& schedule, double variance) {
  if (data.empty() || centres == 0) throw std::invalid_argument("porosity model: no training grids");
  std::vector<Vec> means(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(std::min(centres, data.size())));
  return GmmScoreModel(GaussianMixture::isotropic(std::move(means), variance), schedule);
}

void KinematicsSpec::validate() const {
  if (horizon < 1) throw std::invalid_argument("kinematics: horizon must be >= 1");
  if (!std::isfinite(p0) || !std::isfinite(v0) || !std::isfinite(g)) {
    throw std::invalid_argument("kinematics: non-finite parameter");
  }
}

Vec kinematics_rollout(const KinematicsSpec& spec) {
  spec.validate();
  Vec out;
  out.reserve(spec.horizon);
  double p = spec.p0;
  double v = spec.v0;
  for (std::size_t t = 1; t <= spec.horizon; ++t) {
    p += v + 0.5 * spec.g;
    v += spec.g;
    out.push_back(p);
  }
  return out;
}

KinematicsConstraint::KinematicsConstraint(KinematicsSpec spec)
    : spec_(spec), rollout_(kinematics_rollout(spec)) {}

void KinematicsConstraint::check_size(std::span<const double> x) const {
  if (x.size() != rollout_.size()) {
    throw std::invalid_argument("kinematics: expected " + std::to_string(rollout_.size()) +
                                " positions, got " + std::to_string(x.size()));
  }
}

double KinematicsConstraint::residual(std::span<const double> x) const {
  check_size(x);
  return distance(x, rollout_);
}

void KinematicsConstraint::residual_gradient(std::span<const double> x, std::span<double> grad) const {
  const double r = residual(x);
  for (std::size_t i = 0; i < x.size(); ++i) grad[i] = r > 0.0 ? (x[i] - rollout_[i]) / r : 0.0;
}

bool KinematicsConstraint::satisfied(std::span<const double> x) const {
  return residual(x) <= kTolerance;
}

Vec KinematicsConstraint::project_exact(std::span<const double> x) const {
  check_size(x);
  return rollout_;
}

std::shared_ptr<KinematicsConstraint> kinematics_constraint(const KinematicsSpec& spec) {
  return std::make_shared<KinematicsConstraint>(spec);
}

std::vector<Vec> kinematics_training_data(double g, std::size_t horizon, std::size_t n,
                                          double p0_range, SeededRng& rng) {
  std::vector<Vec> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    KinematicsSpec spec;
    spec.p0 = p0_range * (2.0 * rng.uniform() - 1.0);
    spec.g = g;
    spec.horizon = horizon;
    out.push_back(kinematics_rollout(spec));
  }
  return out;
}

}  // namespace nsd
