#include "nsd/projections.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <string>

namespace nsd {

NonConvergence::NonConvergence(Vec candidate, ProjectionResult result)
    : std::runtime_error("projection did not converge (residual " +
                         std::to_string(result.residual_final) + ")"),
      candidate_(std::move(candidate)),
      result_(std::move(result)) {}

RetryExhausted::RetryExhausted(std::size_t failed_chains)
    : std::runtime_error(std::to_string(failed_chains) +
                         " chain(s) failed their final projection after all retries"),
      failed_(failed_chains) {}

bool Constraint::satisfied(std::span<const double> x) const {
  return residual(x) <= kCheckTol;
}

Vec Constraint::project_exact(std::span<const double>) const {
  throw std::logic_error(name() + ": no exact projection");
}

void Constraint::component_residuals(std::span<const double> x,
                                     std::span<double> out) const {
  out[0] = residual(x);
}

void Constraint::component_gradient(std::span<const double> x, std::size_t,
                                    std::span<double> grad) const {
  residual_gradient(x, grad);
}

void ConstraintSet::add(ConstraintPtr c) {
  if (!c) throw std::invalid_argument("constraint set: null constraint");
  items_.push_back(std::move(c));
}

double ConstraintSet::residual(std::span<const double> x) const {
  double s = 0.0;
  for (const auto& c : items_) s += c->residual(x);
  return s;
}

std::vector<double> ConstraintSet::residuals(std::span<const double> x) const {
  std::vector<double> out;
  out.reserve(items_.size());
  for (const auto& c : items_) out.push_back(c->residual(x));
  return out;
}

bool ConstraintSet::satisfied(std::span<const double> x) const {
  return std::all_of(items_.begin(), items_.end(),
                     [&](const ConstraintPtr& c) { return c->satisfied(x); });
}

LinearConstraint::LinearConstraint(Vec normal, double offset)
    : normal_(std::move(normal)), offset_(offset) {
  if (normal_.empty() || norm(normal_) == 0.0) {
    throw std::invalid_argument("linear constraint: zero normal vector");
  }
  if (!all_finite(normal_) || !std::isfinite(offset_)) {
    throw std::invalid_argument("linear constraint: non-finite coefficients");
  }
}

double LinearConstraint::residual(std::span<const double> x) const {
  return std::max(0.0, dot(normal_, x) - offset_);
}

void LinearConstraint::residual_gradient(std::span<const double> x,
                                         std::span<double> grad) const {
  const bool active = dot(normal_, x) - offset_ > 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = active ? normal_[i] : 0.0;
}

Vec LinearConstraint::project_exact(std::span<const double> x) const {
  return project_halfspace(x, normal_, offset_);
}

BoxConstraint::BoxConstraint(Vec lo, Vec hi) : lo_(std::move(lo)), hi_(std::move(hi)) {
  if (lo_.size() != hi_.size() || lo_.empty()) {
    throw std::invalid_argument("box: malformed bounds");
  }
  for (std::size_t i = 0; i < lo_.size(); ++i) {
    if (!(lo_[i] <= hi_[i])) throw std::invalid_argument("box: lo > hi");
  }
}

double BoxConstraint::residual(std::span<const double> x) const {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += std::max(0.0, x[i] - hi_[i]) + std::max(0.0, lo_[i] - x[i]);
  }
  return s;
}

void BoxConstraint::residual_gradient(std::span<const double> x,
                                      std::span<double> grad) const {
  for (std::size_t i = 0; i < x.size(); ++i) {
    grad[i] = x[i] > hi_[i] ? 1.0 : (x[i] < lo_[i] ? -1.0 : 0.0);
  }
}

void BoxConstraint::component_residuals(std::span<const double> x,
                                        std::span<double> out) const {
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::max(0.0, x[i] - hi_[i]) + std::max(0.0, lo_[i] - x[i]);
  }
}

void BoxConstraint::component_gradient(std::span<const double> x, std::size_t j,
                                       std::span<double> grad) const {
  std::fill(grad.begin(), grad.end(), 0.0);
  grad[j] = x[j] > hi_[j] ? 1.0 : (x[j] < lo_[j] ? -1.0 : 0.0);
}

Vec BoxConstraint::project_exact(std::span<const double> x) const {
  return project_box(x, lo_, hi_);
}

std::shared_ptr<LinearConstraint> residual_linear(Vec a, double b) {
  return std::make_shared<LinearConstraint>(std::move(a), b);
}

Vec project_box(std::span<const double> x, std::span<const double> lo,
                std::span<const double> hi) {
  if (lo.size() != x.size() || hi.size() != x.size()) {
    throw std::invalid_argument("project_box: dimension mismatch");
  }
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(lo[i] <= hi[i])) throw std::invalid_argument("project_box: lo > hi");
    y[i] = std::clamp(x[i], lo[i], hi[i]);
  }
  return y;
}

Vec project_halfspace(std::span<const double> x, std::span<const double> a,
                      double b) {
  if (a.size() != x.size()) throw std::invalid_argument("project_halfspace: dimension mismatch");
  const double aa = dot(a, a);
  if (aa == 0.0) throw std::invalid_argument("project_halfspace: zero normal vector");
  Vec y(x.begin(), x.end());
  double excess = dot(a, y) - b;
  if (excess <= 0.0) return y;
  axpy(-excess / aa, a, y);
  // Rounding can leave a . y a few ulps above b; step past the boundary.
  double nudge = std::numeric_limits<double>::epsilon() * (std::abs(b) + 1.0);
  for (int k = 0; k < 64 && (excess = dot(a, y) - b) > 0.0; ++k) {
    axpy(-(excess + nudge) / aa, a, y);
    nudge *= 2.0;
  }
  return y;
}

Vec project_topk_negative(std::span<const double> grid, std::size_t k,
                          double epsilon) {
  if (k > grid.size()) throw std::invalid_argument("project_topk_negative: K out of range");
  if (!(epsilon > 0.0 && epsilon <= 1.0)) {
    throw std::invalid_argument("project_topk_negative: epsilon must lie in (0, 1]");
  }
  for (double v : grid) {
    if (!(v >= -1.0 && v <= 1.0)) {
      throw std::invalid_argument("project_topk_negative: entries must lie in [-1, 1]");
    }
  }
  Vec out(grid.begin(), grid.end());
  std::vector<std::size_t> neg, nonneg;
  for (std::size_t i = 0; i < grid.size(); ++i) (grid[i] < 0.0 ? neg : nonneg).push_back(i);
  const auto closest_first = [&](std::vector<std::size_t>& idx) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(grid[a]) < std::abs(grid[b]);
    });
  };
  if (neg.size() > k) {
    closest_first(neg);
    for (std::size_t j = 0; j < neg.size() - k; ++j) out[neg[j]] = epsilon;
  } else if (neg.size() < k) {
    closest_first(nonneg);
    for (std::size_t j = 0; j < k - neg.size(); ++j) out[nonneg[j]] = -epsilon;
  }
  return out;
}

void AlmConfig::validate() const {
  const auto fail = [](const char* field, const char* what) {
    throw std::invalid_argument(std::string("alm config: ") + field + " " + what);
  };
  if (!(lambda0 >= 0.0)) fail("lambda0", "must be >= 0");
  if (!(mu0 > 0.0)) fail("mu0", "must be > 0");
  if (!(gamma > 0.0)) fail("gamma", "must be > 0");
  if (!(alpha > 1.0)) fail("alpha", "must be > 1");
  if (!(delta > 0.0)) fail("delta", "must be > 0");
  if (!(mu_max >= mu0)) fail("mu_max", "must be >= mu0");
  if (max_inner_iter < 1) fail("max_inner_iter", "must be >= 1");
  if (max_outer_iter < 1) fail("max_outer_iter", "must be >= 1");
}

namespace {

constexpr double kArmijo = 1e-4;
constexpr double kMinStep = 1e-16;
constexpr int kPolishSteps = 20;
constexpr std::size_t kMemory = 8;
// Inner loop stops once an accepted step decreases L by less than this
// fraction of |L|.
constexpr double kStallDecrease = 1e-14;

class AlmSolver {
 public:
  AlmSolver(const AlmProblem& p, const ConstraintSet& cs, const AlmConfig& cfg)
      : p_(p), cs_(cs), cfg_(cfg) {}

  ProjectionResult run(Vec z, AlmWarmState* warm) {
    offsets_.assign(1, 0);
    for (const auto& c : cs_.items()) offsets_.push_back(offsets_.back() + c->num_components());
    const std::size_t n = offsets_.back();
    comp_.assign(n, 0.0);
    lambda_.assign(n, cfg_.lambda0);
    if (warm && warm->lambda.size() == n) lambda_ = warm->lambda;
    mu_ = cfg_.mu0;

    ProjectionResult result;
    Vec best = z;
    double best_residual = p_.final_residual(z);
    int inner_total = 0;
    int outer = 0;
    for (;; ++outer) {
      if (p_.on_outer) p_.on_outer(outer);
      if (converged(z)) {
        result.converged = true;
        break;
      }
      if (p_.polish && p_.final_residual(z) <= cfg_.delta && polish(z)) {
        result.converged = true;
        break;
      }
      const double r = p_.final_residual(z);
      if (r < best_residual) {
        best_residual = r;
        best = z;
      }
      if (outer == cfg_.max_outer_iter) break;
      inner_total += inner_loop(z);
      to_point(z);
      eval_components();
      for (std::size_t i = 0; i < n; ++i) lambda_[i] += mu_ * comp_[i];
      mu_ = std::min(cfg_.alpha * mu_, cfg_.mu_max);
    }
    if (!result.converged && p_.final_residual(z) > best_residual) z = best;
    result.residual_final = p_.final_residual(z);
    result.iterations = outer;
    result.inner_iterations = inner_total;
    result.point = std::move(z);
    if (warm) {
      warm->lambda = lambda_;
      warm->mu = mu_;
      warm->point = result.point;
    }
    return result;
  }

 private:
  bool converged(std::span<const double> z) const {
    return p_.hard_check(z) && p_.final_residual(z) <= cfg_.delta;
  }

  void to_point(std::span<const double> z) { p_.to_point(z, point_); }

  void eval_components() {
    for (std::size_t c = 0; c < cs_.size(); ++c) {
      cs_[c].component_residuals(
          point_, std::span<double>(comp_).subspan(offsets_[c], offsets_[c + 1] - offsets_[c]));
    }
  }

  // Augmented Lagrangian value; gradient written to `grad` when non-empty.
  double lagrangian(std::span<const double> z, std::span<double> grad) {
    double f = p_.cost(z, grad);
    to_point(z);
    const bool want_grad = !grad.empty();
    if (want_grad) point_grad_.assign(point_.size(), 0.0);
    eval_components();
    for (std::size_t c = 0; c < cs_.size(); ++c) {
      for (std::size_t i = offsets_[c]; i < offsets_[c + 1]; ++i) {
        const double r = comp_[i];
        f += lambda_[i] * r + 0.5 * mu_ * r * r;
        if (!want_grad || r <= 0.0) continue;
        scratch_.assign(point_.size(), 0.0);
        cs_[c].component_gradient(point_, i - offsets_[c], scratch_);
        axpy(lambda_[i] + mu_ * r, scratch_, point_grad_);
      }
    }
    if (want_grad) {
      z_grad_.assign(z.size(), 0.0);
      p_.pullback(z, point_grad_, z_grad_);
      axpy(1.0, z_grad_, grad);
    }
    return f;
  }

  // Limited-memory BFGS directions with Armijo backtracking. The first step
  // of each inner loop is a scaled gradient step starting from gamma.
  int inner_loop(Vec& z) {
    const std::size_t n = z.size();
    Vec grad(n), trial(n), trial_grad(n), dir(n);
    std::deque<std::pair<Vec, Vec>> memory;  // (s_k, y_k)
    double f = lagrangian(z, grad);
    int used = 0;
    for (int j = 0; j < cfg_.max_inner_iter; ++j) {
      if (!std::isfinite(f) || !all_finite(grad)) {
        throw NumericalError("alm: non-finite augmented Lagrangian gradient (mu = " +
                             std::to_string(mu_) + ")");
      }
      if (dot(grad, grad) <= 1e-30) break;
      lbfgs_direction(grad, memory, dir);
      double slope = dot(grad, dir);
      if (!(slope < 0.0)) {
        memory.clear();
        for (std::size_t i = 0; i < n; ++i) dir[i] = -grad[i];
        slope = -dot(grad, grad);
      }
      double s = memory.empty() ? std::max(1.0, cfg_.gamma) : 1.0;
      bool accepted = false;
      double ft = 0.0;
      while (s >= kMinStep) {
        for (std::size_t i = 0; i < n; ++i) trial[i] = z[i] + s * dir[i];
        ft = lagrangian(trial, trial_grad);
        if (ft <= f + kArmijo * s * slope) {
          accepted = true;
          break;
        }
        s *= 0.5;
      }
      if (!accepted) break;
      Vec sk(n), yk(n);
      for (std::size_t i = 0; i < n; ++i) {
        sk[i] = trial[i] - z[i];
        yk[i] = trial_grad[i] - grad[i];
      }
      if (dot(sk, yk) > 1e-12 * norm(sk) * norm(yk)) {
        memory.emplace_back(std::move(sk), std::move(yk));
        if (memory.size() > kMemory) memory.pop_front();
      }
      const double decrease = f - ft;
      z.swap(trial);
      grad.swap(trial_grad);
      f = ft;
      ++used;
      if (decrease <= kStallDecrease * std::max(1.0, std::abs(f))) break;
      if (p_.check_every_inner_step && p_.hard_check(z)) break;
    }
    return used;
  }

  static void lbfgs_direction(const Vec& grad, const std::deque<std::pair<Vec, Vec>>& memory,
                              Vec& dir) {
    dir = grad;
    std::vector<double> alpha(memory.size());
    for (std::size_t k = memory.size(); k-- > 0;) {
      const auto& [sk, yk] = memory[k];
      alpha[k] = dot(sk, dir) / dot(yk, sk);
      axpy(-alpha[k], yk, dir);
    }
    if (!memory.empty()) {
      const auto& [sk, yk] = memory.back();
      const double scale = dot(sk, yk) / dot(yk, yk);
      for (double& d : dir) d *= scale;
    }
    for (std::size_t k = 0; k < memory.size(); ++k) {
      const auto& [sk, yk] = memory[k];
      const double b = dot(yk, dir) / dot(yk, sk);
      axpy(alpha[k] - b, sk, dir);
    }
    for (double& d : dir) d = -d;
  }

  // Polyak steps z -= r / |grad r|^2 grad r on the aggregate residual.
  bool polish(Vec& z) {
    Vec candidate = z;
    for (int k = 0; k < kPolishSteps; ++k) {
      to_point(candidate);
      double r = 0.0;
      point_grad_.assign(point_.size(), 0.0);
      for (std::size_t i = 0; i < cs_.size(); ++i) {
        const double ri = cs_[i].residual(point_);
        if (ri <= 0.0) continue;
        r += ri;
        scratch_.assign(point_.size(), 0.0);
        cs_[i].residual_gradient(point_, scratch_);
        axpy(1.0, scratch_, point_grad_);
      }
      if (r <= 0.0) break;
      z_grad_.assign(candidate.size(), 0.0);
      p_.pullback(candidate, point_grad_, z_grad_);
      const double gg = dot(z_grad_, z_grad_);
      if (!(gg > 0.0) || !std::isfinite(gg)) break;
      axpy(-r / gg, z_grad_, candidate);
      if (converged(candidate)) {
        z = std::move(candidate);
        return true;
      }
    }
    return false;
  }

  const AlmProblem& p_;
  const ConstraintSet& cs_;
  const AlmConfig& cfg_;
  std::vector<std::size_t> offsets_;
  std::vector<double> comp_;
  std::vector<double> lambda_;
  double mu_ = 0.0;
  Vec point_, point_grad_, scratch_, z_grad_;
};

}  // namespace

ProjectionResult alm_solve(const AlmProblem& problem, const ConstraintSet& cs,
                           Vec z0, const AlmConfig& cfg, AlmWarmState* warm) {
  cfg.validate();
  if (z0.size() != problem.num_vars) throw std::invalid_argument("alm: start point size mismatch");
  if (!all_finite(z0)) throw NumericalError("alm: non-finite start point");
  AlmSolver solver(problem, cs, cfg);
  return solver.run(std::move(z0), warm);
}

namespace {

ProjectionResult alm_project_from(std::span<const double> x, Vec start,
                                  const ConstraintSet& cs, const AlmConfig& cfg,
                                  AlmWarmState* warm) {
  const Vec anchor(x.begin(), x.end());
  AlmProblem problem;
  problem.num_vars = anchor.size();
  problem.cost = [&anchor](std::span<const double> z, std::span<double> grad) {
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double d = z[i] - anchor[i];
      s += d * d;
      if (!grad.empty()) grad[i] = 2.0 * d;
    }
    return s;
  };
  problem.to_point = [](std::span<const double> z, Vec& point) {
    point.assign(z.begin(), z.end());
  };
  problem.pullback = [](std::span<const double>, std::span<const double> g,
                        std::span<double> out) { std::copy(g.begin(), g.end(), out.begin()); };
  problem.hard_check = [&cs](std::span<const double> z) { return cs.satisfied(z); };
  problem.final_residual = [&cs](std::span<const double> z) { return cs.residual(z); };
  return alm_solve(problem, cs, std::move(start), cfg, warm);
}

}  // namespace

ProjectionResult alm_project(std::span<const double> x, const ConstraintSet& cs,
                             const AlmConfig& cfg, AlmWarmState* warm) {
  return alm_project_from(x, Vec(x.begin(), x.end()), cs, cfg, warm);
}

ProjectionResult project_onto(std::span<const double> x, const ConstraintSet& cs,
                              const AlmConfig& cfg, AlmWarmState* warm) {
  ProjectionResult result;
  result.point.assign(x.begin(), x.end());
  if (cs.satisfied(result.point)) {
    result.converged = true;
    result.residual_final = cs.residual(result.point);
    return result;
  }
  for (const auto& c : cs.items()) {
    if (c->supports_exact_projection() && !c->satisfied(result.point)) {
      result.point = c->project_exact(result.point);
    }
  }
  if (cs.satisfied(result.point)) {
    result.converged = true;
    result.residual_final = cs.residual(result.point);
    return result;
  }
  return alm_project_from(x, std::move(result.point), cs, cfg, warm);
}

ProjectionResult project_pinned(std::span<const double> x, const Pins& pins,
                                const ConstraintSet& cs, const AlmConfig& cfg,
                                AlmWarmState* warm) {
  if (pins.size() != x.size()) throw std::invalid_argument("project_pinned: pin mask size mismatch");
  Vec full(x.begin(), x.end());
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (pins[i]) full[i] = *pins[i];
    else free.push_back(i);
  }
  ProjectionResult result;
  if (cs.satisfied(full) || free.empty()) {
    result.converged = cs.satisfied(full);
    result.residual_final = cs.residual(full);
    result.point = std::move(full);
    return result;
  }
  const auto expand = [&](std::span<const double> z, Vec& point) {
    point = full;
    for (std::size_t k = 0; k < free.size(); ++k) point[free[k]] = z[k];
  };
  Vec scratch;
  AlmProblem problem;
  problem.num_vars = free.size();
  problem.cost = [&](std::span<const double> z, std::span<double> grad) {
    double s = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double d = z[k] - x[free[k]];
      s += d * d;
      if (!grad.empty()) grad[k] = 2.0 * d;
    }
    return s;
  };
  problem.to_point = expand;
  problem.pullback = [&](std::span<const double>, std::span<const double> g,
                         std::span<double> out) {
    for (std::size_t k = 0; k < free.size(); ++k) out[k] = g[free[k]];
  };
  problem.hard_check = [&](std::span<const double> z) {
    expand(z, scratch);
    return cs.satisfied(scratch);
  };
  problem.final_residual = [&](std::span<const double> z) {
    expand(z, scratch);
    return cs.residual(scratch);
  };
  Vec z0(free.size());
  for (std::size_t k = 0; k < free.size(); ++k) z0[k] = full[free[k]];
  result = alm_solve(problem, cs, std::move(z0), cfg, warm);
  expand(Vec(result.point), result.point);
  return result;
}

}  // namespace nsd
