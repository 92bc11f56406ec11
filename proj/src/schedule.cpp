#include "charflow/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "charflow/errors.hpp"

namespace charflow {

namespace {

void check_time(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0))
    throw DomainError(std::string(what) + ": time " + std::to_string(t) + " outside [0, 1]");
}

}  // namespace

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "follmer") return ScheduleKind::Follmer;
  throw ParseError("unknown schedule '" + std::string(name) + "' (expected linear | follmer)");
}

std::string_view to_string(ScheduleKind kind) {
  return kind == ScheduleKind::Linear ? "linear" : "follmer";
}

bool ValidationReport::all_passed() const {
  return std::all_of(clauses.begin(), clauses.end(), [](const ClauseCheck& c) { return c.passed; });
}

double Schedule::alpha(double t) const {
  check_time(t, "alpha");
  return kind_ == ScheduleKind::Linear ? 1.0 - t : std::sqrt(1.0 - t * t);
}

double Schedule::beta(double t) const {
  check_time(t, "beta");
  return t;
}

Coefficients Schedule::coeffs(double t) const {
  check_time(t, "coeffs");
  if (kind_ == ScheduleKind::Linear) return {1.0 - t, t, -1.0, 1.0};
  if (t == 1.0) throw SingularityError("coeffs: Follmer alpha'(t) diverges at t = 1");
  const double a = std::sqrt(1.0 - t * t);
  return {a, t, -t / a, 1.0};
}

EiKernels Schedule::ei_coeffs(double t, double s) const {
  check_time(t, "ei_coeffs");
  check_time(s, "ei_coeffs");
  if (s < t) throw ContractError("ei_coeffs: requires t <= s");
  if (s >= 1.0) throw SingularityError("ei_coeffs: requires s < 1");
  if (kind_ == ScheduleKind::Linear) {
    const double phi = (1.0 - s) / (1.0 - t);
    return {phi, 1.0 - phi};
  }
  const double phi = std::sqrt((1.0 - s * s) / (1.0 - t * t));
  return {phi, s - t * phi};
}

DenoiserScaling Schedule::denoiser_coeffs(double t, double sigma_data) const {
  check_time(t, "denoiser_coeffs");
  if (!(sigma_data > 0.0)) throw DomainError("denoiser_coeffs: sigma_data must be positive");
  const double a = alpha(t);
  const double b = beta(t);
  if (a == 0.0) throw SingularityError("denoiser_coeffs: c_out vanishes at alpha(t) = 0");
  const double s2 = sigma_data * sigma_data;
  const double var = a * a + b * b * s2;
  const double c_out = a * sigma_data / std::sqrt(var);
  return {1.0 / std::sqrt(var), c_out, b * s2 / var, t, 1.0 / (c_out * c_out)};
}

double Schedule::log_rate(double t) const {
  check_time(t, "log_rate");
  if (t == 1.0) throw SingularityError("log_rate: alpha vanishes at t = 1");
  return kind_ == ScheduleKind::Linear ? -1.0 / (1.0 - t) : -t / (1.0 - t * t);
}

double Schedule::denoiser_gain(double t) const {
  check_time(t, "denoiser_gain");
  if (t == 1.0) throw SingularityError("denoiser_gain: diverges at t = 1");
  return kind_ == ScheduleKind::Linear ? 1.0 / (1.0 - t) : 1.0 / (1.0 - t * t);
}

double Schedule::kappa(double stop_time, std::size_t grid_size) const {
  if (!(stop_time >= 0.0 && stop_time < 1.0)) throw DomainError("kappa: requires 0 <= T < 1");
  if (grid_size < 2) throw ContractError("kappa: grid_size must be >= 2");
  double sup = 0.0;
  for (std::size_t i = 0; i < grid_size; ++i) {
    const double t = stop_time * static_cast<double>(i) / static_cast<double>(grid_size - 1);
    const double one_minus = kind_ == ScheduleKind::Linear ? 1.0 - t : 1.0 - t * t;
    const double value = kind_ == ScheduleKind::Linear ? 1.0 / (one_minus * one_minus)
                                                       : (1.0 + t * t) / (one_minus * one_minus);
    sup = std::max(sup, value);
  }
  return sup;
}

ValidationReport validate_schedule(const Schedule& schedule, std::size_t grid_size) {
  if (grid_size < 2) throw ContractError("validate_schedule: grid_size must be >= 2");
  ValidationReport report;

  const double boundary = std::max({std::abs(schedule.alpha(0.0) - 1.0), std::abs(schedule.beta(1.0) - 1.0),
                                    std::abs(schedule.alpha(1.0)), std::abs(schedule.beta(0.0))});
  report.clauses.push_back({"boundary values", boundary == 0.0, boundary});

  const auto grid_time = [grid_size](std::size_t i) {
    return static_cast<double>(i) / static_cast<double>(grid_size - 1);
  };

  double min_norm2 = schedule.alpha(0.0) * schedule.alpha(0.0) + schedule.beta(0.0) * schedule.beta(0.0);
  bool strict = true;
  double monotone = 0.0;
  for (std::size_t i = 1; i < grid_size; ++i) {
    const double t0 = grid_time(i - 1);
    const double t1 = grid_time(i);
    const double a = schedule.alpha(t1);
    const double b = schedule.beta(t1);
    min_norm2 = std::min(min_norm2, a * a + b * b);
    const double rise = a - schedule.alpha(t0);
    const double drop = schedule.beta(t0) - b;
    if (rise >= 0.0 || drop >= 0.0) strict = false;
    monotone = std::max({monotone, rise, drop});
  }
  report.clauses.push_back({"alpha^2 + beta^2 > 0", min_norm2 > 0.0, min_norm2 > 0.0 ? 0.0 : -min_norm2});
  report.clauses.push_back({"alpha decreasing, beta increasing", strict, monotone});
  return report;
}

double default_stop_time(ScheduleKind kind) { return kind == ScheduleKind::Linear ? 0.99 : 0.999; }

}  // namespace charflow
