#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsd/numerics.hpp"

namespace nsd {

/// Checking tolerance tying predicates to residuals: for the continuous
/// constraint families phi(x) = 1 exactly when residual(x) <= kCheckTol.
inline constexpr double kCheckTol = 1e-8;

/// A predicate phi paired with a differentiable, nonnegative residual.
class Constraint {
 public:
  virtual ~Constraint() = default;

  virtual std::string name() const = 0;
  virtual double residual(std::span<const double> x) const = 0;
  /// Overwrites `grad` (same size as x) with d residual / dx.
  virtual void residual_gradient(std::span<const double> x,
                                 std::span<double> grad) const = 0;
  /// Hard predicate. Default: residual(x) <= kCheckTol.
  virtual bool satisfied(std::span<const double> x) const;

  /// Residual split into independent nonnegative parts, each of which gets
  /// its own multiplier in the augmented Lagrangian. They sum to residual().
  virtual std::size_t num_components() const { return 1; }
  virtual void component_residuals(std::span<const double> x,
                                   std::span<double> out) const;
  virtual void component_gradient(std::span<const double> x, std::size_t j,
                                  std::span<double> grad) const;

  virtual bool is_convex() const { return false; }
  virtual bool supports_exact_projection() const { return false; }
  /// Exact projection onto {phi = 1}; std::logic_error when unsupported.
  virtual Vec project_exact(std::span<const double> x) const;
};

using ConstraintPtr = std::shared_ptr<Constraint>;

/// Conjunction of constraints. The aggregate residual is the plain sum.
class ConstraintSet {
 public:
  ConstraintSet() = default;
  ConstraintSet(std::initializer_list<ConstraintPtr> items) : items_(items) {}

  void add(ConstraintPtr c);
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const Constraint& operator[](std::size_t i) const { return *items_[i]; }
  const std::vector<ConstraintPtr>& items() const { return items_; }

  double residual(std::span<const double> x) const;
  std::vector<double> residuals(std::span<const double> x) const;
  bool satisfied(std::span<const double> x) const;

 private:
  std::vector<ConstraintPtr> items_;
};

/// a . x <= b with residual max(0, a . x - b).
class LinearConstraint final : public Constraint {
 public:
  LinearConstraint(Vec normal, double offset);

  std::string name() const override { return "linear"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x,
                         std::span<double> grad) const override;
  bool is_convex() const override { return true; }
  bool supports_exact_projection() const override { return true; }
  Vec project_exact(std::span<const double> x) const override;

  const Vec& normal() const { return normal_; }
  double offset() const { return offset_; }

 private:
  Vec normal_;
  double offset_;
};

/// lo <= x <= hi componentwise; residual sum of per-coordinate hinges.
class BoxConstraint final : public Constraint {
 public:
  BoxConstraint(Vec lo, Vec hi);

  std::string name() const override { return "box"; }
  double residual(std::span<const double> x) const override;
  void residual_gradient(std::span<const double> x,
                         std::span<double> grad) const override;
  /// One hinge per coordinate.
  std::size_t num_components() const override { return lo_.size(); }
  void component_residuals(std::span<const double> x,
                           std::span<double> out) const override;
  void component_gradient(std::span<const double> x, std::size_t j,
                          std::span<double> grad) const override;
  bool is_convex() const override { return true; }
  bool supports_exact_projection() const override { return true; }
  Vec project_exact(std::span<const double> x) const override;

 private:
  Vec lo_;
  Vec hi_;
};

/// residual_linear: hinge constraint a . x <= b. Throws on a zero normal.
std::shared_ptr<LinearConstraint> residual_linear(Vec a, double b);

/// Euclidean projection onto the box [lo, hi].
Vec project_box(std::span<const double> x, std::span<const double> lo,
                std::span<const double> hi);

/// Euclidean projection onto {y : a . y <= b}. The result satisfies
/// a . y <= b in floating point, and feasible inputs are returned unchanged.
Vec project_halfspace(std::span<const double> x, std::span<const double> a,
                      double b);

/// Minimal change that leaves exactly `k` entries < 0: entries closest to
/// the sign boundary are flipped (ties: lowest index), becoming -epsilon or
/// +epsilon. Entries must lie in [-1, 1].
Vec project_topk_negative(std::span<const double> grid, std::size_t k,
                          double epsilon);

struct AlmConfig {
  double lambda0 = 0.0;
  double mu0 = 1.0;
  /// Initial inner step; backtracking adapts it per iteration.
  double gamma = 0.05;
  double alpha = 2.0;
  double delta = 1e-6;
  double mu_max = 1e6;
  int max_inner_iter = 100;
  int max_outer_iter = 50;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

enum class ProjectionCost { kEuclidean, kKl };

/// Dual state carried between successive projections of one chain.
struct AlmWarmState {
  std::vector<double> lambda;
  double mu = 0.0;
  Vec point;
};

struct ProjectionResult {
  Vec point;
  double residual_final = 0.0;
  /// Outer (dual) iterations used.
  int iterations = 0;
  int inner_iterations = 0;
  bool converged = false;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Projection failed to reach the feasible set. Carries the unprojected
/// candidate and the best point the solver found.
class NonConvergence : public std::runtime_error {
 public:
  NonConvergence(Vec candidate, ProjectionResult result);
  const Vec& candidate() const { return candidate_; }
  const ProjectionResult& result() const { return result_; }

 private:
  Vec candidate_;
  ProjectionResult result_;
};

class RetryExhausted : public std::runtime_error {
 public:
  explicit RetryExhausted(std::size_t failed_chains);
  std::size_t failed_chains() const { return failed_; }

 private:
  std::size_t failed_;
};

/// Generic augmented-Lagrangian problem over decision variables z.
///
/// Constraint residuals are evaluated at point(z); `pullback` maps a
/// gradient with respect to that point back to z. `hard_check` is the
/// termination predicate and `final_residual` the reported residual.
struct AlmProblem {
  std::size_t num_vars = 0;
  std::function<double(std::span<const double> z, std::span<double> grad)> cost;
  std::function<void(std::span<const double> z, Vec& point)> to_point;
  std::function<void(std::span<const double> z, std::span<const double> point_grad,
                     std::span<double> z_grad)>
      pullback;
  std::function<bool(std::span<const double> z)> hard_check;
  std::function<double(std::span<const double> z)> final_residual;
  /// Called before every outer iteration (e.g. to redraw relaxation noise).
  std::function<void(int outer)> on_outer;
  /// Stop the inner loop as soon as hard_check passes.
  bool check_every_inner_step = false;
  /// Allow Polyak steps on the aggregate residual once it is below delta.
  bool polish = true;
};

/// Runs the augmented-Lagrangian projection:
///   L(z) = cost(z) + sum_i lambda_i r_i + mu/2 r_i^2,  r_i = residual_i(point(z))
/// with backtracking gradient descent inside, lambda_i += mu r_i and
/// mu = min(alpha mu, mu_max) outside, until hard_check(z) holds with
/// final_residual(z) <= delta. Throws NumericalError on a non-finite
/// gradient.
ProjectionResult alm_solve(const AlmProblem& problem, const ConstraintSet& cs,
                           Vec z0, const AlmConfig& cfg, AlmWarmState* warm);

/// alm_project with Euclidean cost ||y - x||^2 (KL cost on sequences lives
/// in kl_project_sequence). A result with converged = false is the
/// non-convergence outcome and carries the best point found.
ProjectionResult alm_project(std::span<const double> x, const ConstraintSet& cs,
                             const AlmConfig& cfg, AlmWarmState* warm = nullptr);

/// Sampler-side projection: identity when feasible, otherwise the exact
/// projections that are available (in set order). If anything is still
/// violated, the augmented-Lagrangian solver minimizes ||y - x||^2 starting
/// from that partial result.
ProjectionResult project_onto(std::span<const double> x, const ConstraintSet& cs,
                              const AlmConfig& cfg, AlmWarmState* warm = nullptr);

/// Coordinate i is fixed to pins[i] when that holds a value.
using Pins = std::vector<std::optional<double>>;

/// Euclidean projection over the unpinned coordinates only. Pinned entries
/// are overwritten first and never move afterwards; if the set is still
/// violated the augmented-Lagrangian solver runs over the free coordinates.
ProjectionResult project_pinned(std::span<const double> x, const Pins& pins,
                                const ConstraintSet& cs, const AlmConfig& cfg,
                                AlmWarmState* warm = nullptr);

}  // namespace nsd
