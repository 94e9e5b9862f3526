#include "nsd/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nsd {

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::kLinear ? "linear" : "cosine";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear") return ScheduleKind::kLinear;
  if (name == "cosine") return ScheduleKind::kCosine;
  throw std::invalid_argument("unknown schedule kind '" + name + "'");
}

NoiseSchedule::NoiseSchedule(ScheduleKind kind, int steps, double beta_max,
                             double gamma_max, double gamma_power)
    : kind_(kind),
      steps_(steps),
      beta_max_(beta_max),
      gamma_max_(gamma_max),
      gamma_power_(gamma_power) {
  if (steps < 1) throw std::invalid_argument("schedule: steps must be >= 1");
  if (!(beta_max > 0.0 && beta_max <= 1.0)) {
    throw std::invalid_argument("schedule: beta_max must lie in (0, 1]");
  }
  if (!(gamma_max > 0.0)) {
    throw std::invalid_argument("schedule: gamma_max must be positive");
  }
  if (!(gamma_power > 0.0)) {
    throw std::invalid_argument("schedule: gamma_power must be positive");
  }
}

double NoiseSchedule::beta(int t) const {
  if (t < 0 || t > steps_) throw std::out_of_range("schedule: t outside [0, T]");
  if (t == 0) return 0.0;
  const double frac = static_cast<double>(t) / steps_;
  if (kind_ == ScheduleKind::kLinear) return beta_max_ * frac;
  const double s = kCosineOffset;
  const auto f = [s](double u) {
    const double c = std::cos((u + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double alpha_bar = f(frac) / f(0.0);
  return beta_max_ * std::clamp(1.0 - alpha_bar, 0.0, 1.0);
}

double NoiseSchedule::gamma(int t) const {
  if (t < 1 || t > steps_) throw std::out_of_range("schedule: t outside [1, T]");
  return gamma_max_ * std::pow(beta(t) / beta(steps_), gamma_power_);
}

ScheduleValues NoiseSchedule::eval(int t) const {
  if (t < 1 || t > steps_) throw std::out_of_range("schedule: t outside [1, T]");
  return {beta(t), gamma(t)};
}

}  // namespace nsd
