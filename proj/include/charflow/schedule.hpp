#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace charflow {

/// Interpolant family X_t = alpha(t) X0 + beta(t) X1.
///   Linear:  alpha = 1 - t,          beta = t
///   Follmer: alpha = sqrt(1 - t^2),  beta = t
enum class ScheduleKind { Linear, Follmer };

/// Accepts "linear" | "follmer"; anything else is a ParseError naming the value.
ScheduleKind parse_schedule_kind(std::string_view name);
std::string_view to_string(ScheduleKind kind);

struct Coefficients {
  double alpha;
  double beta;
  double dalpha;
  double dbeta;
};

/// Exponential-integrator kernels for one step t -> s.
struct EiKernels {
  double phi;
  double psi;
};

/// Preconditioning for a denoiser D(t, x) = c_skip x + c_out F(c_noise, c_in x),
/// assuming X0 ~ N(0, I) and data with per-coordinate std sigma_data.
struct DenoiserScaling {
  double c_in;
  double c_out;
  double c_skip;
  double c_noise;
  double omega;
};

struct ClauseCheck {
  std::string clause;
  bool passed;
  double worst_violation;
};

struct ValidationReport {
  std::vector<ClauseCheck> clauses;
  bool all_passed() const;
};

class Schedule {
 public:
  explicit Schedule(ScheduleKind kind = ScheduleKind::Linear) : kind_(kind) {}

  ScheduleKind kind() const { return kind_; }

  double alpha(double t) const;
  double beta(double t) const;

  /// (alpha, beta, alpha', beta'). Throws DomainError outside [0, 1] and
  /// SingularityError for Follmer at t = 1, where alpha' diverges.
  Coefficients coeffs(double t) const;

  /// Phi(t, s) and Psi(t, s) in closed form; requires 0 <= t <= s < 1.
  EiKernels ei_coeffs(double t, double s) const;

  /// Requires 0 <= t < 1 and sigma_data > 0. c_noise is the raw time.
  DenoiserScaling denoiser_coeffs(double t, double sigma_data) const;

  /// alpha'/alpha, the linear part of the velocity. Singular at t = 1.
  double log_rate(double t) const;

  /// beta (beta'/beta - alpha'/alpha), pre-simplified so that t = 0 is regular:
  /// Linear 1/(1-t), Follmer 1/(1-t^2).
  double denoiser_gain(double t) const;

  /// kappa(T) = sup_{t in [0,T]} (alpha'^2/alpha^2 + |alpha''|/alpha) on a uniform grid.
  /// Diagnostic only.
  double kappa(double stop_time, std::size_t grid_size = 1001) const;

  friend bool operator==(const Schedule&, const Schedule&) = default;

 private:
  ScheduleKind kind_;
};

/// Checks boundary values, positivity of alpha^2 + beta^2 and strict
/// monotonicity on a uniform grid of grid_size >= 2 points.
ValidationReport validate_schedule(const Schedule& schedule, std::size_t grid_size);

/// Default stop time per family: Linear 0.99, Follmer 0.999.
double default_stop_time(ScheduleKind kind);

}  // namespace charflow
