#pragma once

#include <string>

namespace nsd {

enum class ScheduleKind { kLinear, kCosine };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct ScheduleValues {
  double beta;
  double gamma;
};

/// Corruption level beta(t) and reverse step size gamma(t) over reverse-step
/// indices t = 1..T.
///
/// beta(0) = 0 is the clean level and beta(T) = beta_max. Linear:
/// beta(t) = beta_max * t / T. Cosine: beta(t) = beta_max * (1 - abar(t))
/// with abar(t) = cos^2(((t/T + s)/(1 + s)) pi/2) / cos^2((s/(1 + s)) pi/2).
///
/// gamma(t) = gamma_max * (beta(t) / beta(T))^gamma_power, so it shrinks
/// strictly as t -> 0. A larger gamma_power sends the final step sizes toward
/// zero faster.
class NoiseSchedule {
 public:
  static constexpr double kDefaultBetaMax = 0.999;
  static constexpr double kCosineOffset = 0.008;

  NoiseSchedule(ScheduleKind kind, int steps, double beta_max = kDefaultBetaMax,
                double gamma_max = 0.1, double gamma_power = 1.0);

  static NoiseSchedule linear(int steps) {
    return NoiseSchedule(ScheduleKind::kLinear, steps);
  }

  ScheduleKind kind() const { return kind_; }
  int steps() const { return steps_; }
  double beta_max() const { return beta_max_; }
  double gamma_max() const { return gamma_max_; }
  double gamma_power() const { return gamma_power_; }

  /// Defined on 0 <= t <= T.
  double beta(int t) const;
  /// Defined on 1 <= t <= T.
  double gamma(int t) const;
  /// (beta(t), gamma(t)); throws std::out_of_range unless 1 <= t <= T.
  ScheduleValues eval(int t) const;

 private:
  ScheduleKind kind_;
  int steps_;
  double beta_max_;
  double gamma_max_;
  double gamma_power_;
};

}  // namespace nsd
