#pragma once

#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace sfd {

enum class ScheduleKind { polynomial, uniform };

/// Increasing noise levels t_0 = t_min < ... < t_N = t_max. Sampling walks the
/// values from the back.
class TimeSchedule {
 public:
  TimeSchedule(std::vector<double> values, ScheduleKind kind, double rho);

  const std::vector<double>& values() const { return values_; }
  int steps() const { return static_cast<int>(values_.size()) - 1; }
  double operator[](int n) const { return values_[static_cast<std::size_t>(n)]; }
  double t_min() const { return values_.front(); }
  double t_max() const { return values_.back(); }
  ScheduleKind kind() const { return kind_; }
  /// Polynomial exponent; 1 for uniform schedules.
  double rho() const { return rho_; }

  /// Values from t_max down to t_min, the order a sampler visits them.
  std::vector<double> descending() const;

  nlohmann::json to_json() const;

 private:
  std::vector<double> values_;
  ScheduleKind kind_;
  double rho_;
};

/// t_n = (t_min^(1/rho) + n/N (t_max^(1/rho) - t_min^(1/rho)))^rho.
TimeSchedule make_polynomial(int steps, double t_min, double t_max, double rho);

TimeSchedule make_uniform(int steps, double t_min, double t_max);

/// K sub-segments per segment, interior points following the schedule's own
/// polynomial law restricted to each segment. Parent points are kept exactly.
TimeSchedule subdivide(const TimeSchedule& schedule, int sub_steps);

/// Descending sub-times from t_from to t_to (both included, K+1 points).
std::vector<double> segment_times(double t_from, double t_to, int sub_steps, double rho);

}  // namespace sfd
