#include "sfd/schedule.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "sfd/common.hpp"

namespace sfd {

TimeSchedule::TimeSchedule(std::vector<double> values, ScheduleKind kind, double rho)
    : values_(std::move(values)), kind_(kind), rho_(rho) {
  require(values_.size() >= 2, "TimeSchedule: at least two time points required");
  require(values_.front() > 0.0, "TimeSchedule: t_min must be positive");
  for (std::size_t i = 1; i < values_.size(); ++i)
    require(values_[i] > values_[i - 1], "TimeSchedule: values must be strictly increasing");
}

std::vector<double> TimeSchedule::descending() const { return {values_.rbegin(), values_.rend()}; }

nlohmann::json TimeSchedule::to_json() const { return nlohmann::json(values_); }

namespace {

// Point n of K on the polynomial law between lo and hi; endpoints returned exactly.
double poly_point(double lo, double hi, int n, int count, double rho) {
  if (n == 0) return lo;
  if (n == count) return hi;
  const double a = std::pow(lo, 1.0 / rho);
  const double b = std::pow(hi, 1.0 / rho);
  return std::pow(a + (static_cast<double>(n) / count) * (b - a), rho);
}

}  // namespace

TimeSchedule make_polynomial(int steps, double t_min, double t_max, double rho) {
  require(steps >= 1, "make_polynomial: steps must be >= 1");
  require(t_min > 0.0 && t_min < t_max, "make_polynomial: require 0 < t_min < t_max");
  require(rho > 0.0 && std::isfinite(rho), "make_polynomial: rho must be positive");
  std::vector<double> v(static_cast<std::size_t>(steps) + 1);
  for (int n = 0; n <= steps; ++n) v[static_cast<std::size_t>(n)] = poly_point(t_min, t_max, n, steps, rho);
  return TimeSchedule(std::move(v), rho == 1.0 ? ScheduleKind::uniform : ScheduleKind::polynomial, rho);
}

TimeSchedule make_uniform(int steps, double t_min, double t_max) {
  return make_polynomial(steps, t_min, t_max, 1.0);
}

std::vector<double> segment_times(double t_from, double t_to, int sub_steps, double rho) {
  require(sub_steps >= 1, "segment_times: K must be >= 1");
  require(rho > 0.0, "segment_times: rho must be positive");
  std::vector<double> out(static_cast<std::size_t>(sub_steps) + 1);
  // Built ascending from t_to so that interior points match subdivide().
  for (int k = 0; k <= sub_steps; ++k)
    out[static_cast<std::size_t>(sub_steps - k)] = poly_point(t_to, t_from, k, sub_steps, rho);
  return out;
}

TimeSchedule subdivide(const TimeSchedule& schedule, int sub_steps) {
  require(sub_steps >= 1, "subdivide: K must be >= 1");
  const auto& v = schedule.values();
  std::vector<double> out;
  out.reserve((v.size() - 1) * static_cast<std::size_t>(sub_steps) + 1);
  out.push_back(v.front());
  for (std::size_t i = 0; i + 1 < v.size(); ++i)
    for (int k = 1; k <= sub_steps; ++k) out.push_back(poly_point(v[i], v[i + 1], k, sub_steps, schedule.rho()));
  return TimeSchedule(std::move(out), schedule.kind(), schedule.rho());
}

}  // namespace sfd
