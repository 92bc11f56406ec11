#pragma once

#include <cstddef>
#include <span>

#include "charflow/points.hpp"
#include "charflow/schedule.hpp"
#include "charflow/target.hpp"

namespace charflow {

/// Closed-form ground truth for Gaussian-smoothed atomic targets.
///
/// Given X_t = x, the data point decomposes as
///   X_1 = a_t U + sqrt(sigma^2 a_t) eps + (sigma^2 beta / V) x,   a_t = alpha^2 / V,
/// with V = alpha^2 + sigma^2 beta^2 and U distributed over the atoms with
/// log-weights log w_j - |x - beta u_j|^2 / (2 V).
class OracleContext {
 public:
  OracleContext(TargetSpec spec, Schedule schedule);

  const TargetSpec& spec() const { return spec_; }
  const Schedule& schedule() const { return schedule_; }
  std::size_t dim() const { return spec_.atoms.dim(); }

 private:
  TargetSpec spec_;
  Schedule schedule_;
};

/// Posterior weights of U_{t,x} over the atoms (log-sum-exp stabilized).
Vec atom_posterior(const OracleContext& ctx, double t, std::span<const double> x);

/// E[X_1 | X_t = x]. Requires 0 <= t < 1.
Vec denoiser_exact(const OracleContext& ctx, double t, std::span<const double> x);

/// b*(t, x) = (alpha'/alpha) x + beta (beta'/beta - alpha'/alpha) E[X_1 | X_t = x].
Vec velocity_exact(const OracleContext& ctx, double t, std::span<const double> x);

/// grad log rho_t(x) = -x / alpha^2 + (beta / alpha^2) E[X_1 | X_t = x]. Requires 0 < t < 1.
Vec score_exact(const OracleContext& ctx, double t, std::span<const double> x);

/// cov(X_1 | X_t = x) as a row-major d x d matrix.
Vec conditional_covariance(const OracleContext& ctx, double t, std::span<const double> x);

/// (alpha alpha' + sigma^2 beta beta') / (alpha^2 + sigma^2 beta^2): the velocity's
/// rate in directions carrying no atom structure.
double gaussian_rate(const Schedule& schedule, double sigma, double t);

/// sqrt(alpha_t^2 + sigma^2 beta_t^2), the marginal std of X_t for a single atom at 0.
double gaussian_marginal_std(const Schedule& schedule, double sigma, double t);

/// Reference flow map x_t -> x_s: classical RK4, doubling the step count until two
/// successive endpoints agree within tol in the max norm. Requires 0 <= t <= s <= 0.999.
Vec flow_exact(const OracleContext& ctx, double t, double s, std::span<const double> x, double tol = 1e-10);

struct ManifoldParts {
  Vec tangential;
  Vec normal;
  double gamma;
};

/// Splits b*(t, x) on an embedded target into P b~(t, P^T x) and gamma(t) (I - P P^T) x.
ManifoldParts manifold_decompose(const OracleContext& ctx, double t, std::span<const double> x);

/// Central-difference Jacobian of velocity_exact, h = 1e-5 (1 + |x|_inf). Row-major d x d.
Vec velocity_jacobian_fd(const OracleContext& ctx, double t, std::span<const double> x);

}  // namespace charflow
