#include "charflow/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "charflow/errors.hpp"

namespace charflow {

namespace {

void require_open_time(double t, const char* what) {
  if (!(t >= 0.0 && t < 1.0)) throw DomainError(std::string(what) + ": requires 0 <= t < 1");
}

void require_dim(const OracleContext& ctx, std::span<const double> x, const char* what) {
  if (x.size() != ctx.dim()) throw ContractError(std::string(what) + ": dimension mismatch");
}

double smoothed_variance(const Schedule& schedule, double sigma, double t) {
  const double a = schedule.alpha(t);
  const double b = schedule.beta(t);
  return a * a + sigma * sigma * b * b;
}

Vec posterior_mean_atom(const OracleContext& ctx, const Vec& weights) {
  const PointSet& atoms = ctx.spec().atoms;
  Vec mean(ctx.dim(), 0.0);
  for (std::size_t j = 0; j < atoms.size(); ++j)
    for (std::size_t k = 0; k < ctx.dim(); ++k) mean[k] += weights[j] * atoms(j, k);
  return mean;
}

}  // namespace

OracleContext::OracleContext(TargetSpec spec, Schedule schedule) : spec_(std::move(spec)), schedule_(schedule) {
  if (spec_.kind == TargetKind::SwissRoll) throw ContractError("OracleContext: no closed form for the Swiss roll");
  validate(spec_);
}

Vec atom_posterior(const OracleContext& ctx, double t, std::span<const double> x) {
  require_open_time(t, "atom_posterior");
  require_dim(ctx, x, "atom_posterior");
  const TargetSpec& spec = ctx.spec();
  const double b = ctx.schedule().beta(t);
  const double var = smoothed_variance(ctx.schedule(), spec.sigma, t);

  Vec logits(spec.atoms.size());
  double max_logit = -INFINITY;
  for (std::size_t j = 0; j < spec.atoms.size(); ++j) {
    double dist2 = 0.0;
    for (std::size_t k = 0; k < ctx.dim(); ++k) {
      const double diff = x[k] - b * spec.atoms(j, k);
      dist2 += diff * diff;
    }
    logits[j] = spec.weights[j] > 0.0 ? std::log(spec.weights[j]) - dist2 / (2.0 * var) : -INFINITY;
    max_logit = std::max(max_logit, logits[j]);
  }
  double total = 0.0;
  for (double& l : logits) total += (l = std::exp(l - max_logit));
  for (double& l : logits) l /= total;
  return logits;
}

Vec denoiser_exact(const OracleContext& ctx, double t, std::span<const double> x) {
  require_open_time(t, "denoiser_exact");
  const double a = ctx.schedule().alpha(t);
  const double b = ctx.schedule().beta(t);
  const double s2 = ctx.spec().sigma * ctx.spec().sigma;
  const double var = a * a + s2 * b * b;
  const Vec mean_u = posterior_mean_atom(ctx, atom_posterior(ctx, t, x));
  Vec out(ctx.dim());
  for (std::size_t k = 0; k < ctx.dim(); ++k) out[k] = (a * a / var) * mean_u[k] + (s2 * b / var) * x[k];
  return out;
}

Vec velocity_exact(const OracleContext& ctx, double t, std::span<const double> x) {
  require_open_time(t, "velocity_exact");
  const double rate = ctx.schedule().log_rate(t);
  const double gain = ctx.schedule().denoiser_gain(t);
  Vec out = denoiser_exact(ctx, t, x);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = rate * x[k] + gain * out[k];
  return out;
}

Vec score_exact(const OracleContext& ctx, double t, std::span<const double> x) {
  require_open_time(t, "score_exact");
  if (t == 0.0) throw SingularityError("score_exact: beta(0) = 0");
  const double a2 = ctx.schedule().alpha(t) * ctx.schedule().alpha(t);
  const double b = ctx.schedule().beta(t);
  Vec out = denoiser_exact(ctx, t, x);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = (-x[k] + b * out[k]) / a2;
  return out;
}

Vec conditional_covariance(const OracleContext& ctx, double t, std::span<const double> x) {
  const std::size_t d = ctx.dim();
  const double a = ctx.schedule().alpha(t);
  const double s2 = ctx.spec().sigma * ctx.spec().sigma;
  const double var = smoothed_variance(ctx.schedule(), ctx.spec().sigma, t);
  const Vec w = atom_posterior(ctx, t, x);
  const Vec mean_u = posterior_mean_atom(ctx, w);
  const PointSet& atoms = ctx.spec().atoms;

  const double shrink = a * a / var;
  Vec cov(d * d, 0.0);
  for (std::size_t j = 0; j < atoms.size(); ++j)
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = 0; q < d; ++q)
        cov[p * d + q] += w[j] * (atoms(j, p) - mean_u[p]) * (atoms(j, q) - mean_u[q]);
  for (double& c : cov) c *= shrink * shrink;
  for (std::size_t p = 0; p < d; ++p) cov[p * d + p] += s2 * a * a / var;
  return cov;
}

double gaussian_rate(const Schedule& schedule, double sigma, double t) {
  const Coefficients c = schedule.coeffs(t);
  const double s2 = sigma * sigma;
  return (c.alpha * c.dalpha + s2 * c.beta * c.dbeta) / (c.alpha * c.alpha + s2 * c.beta * c.beta);
}

double gaussian_marginal_std(const Schedule& schedule, double sigma, double t) {
  return std::sqrt(smoothed_variance(schedule, sigma, t));
}

Vec flow_exact(const OracleContext& ctx, double t, double s, std::span<const double> x, double tol) {
  require_dim(ctx, x, "flow_exact");
  if (!(t >= 0.0 && s <= 0.999)) throw DomainError("flow_exact: requires 0 <= t <= s <= 0.999");
  if (s < t) throw ContractError("flow_exact: requires t <= s");
  if (t == s) return Vec(x.begin(), x.end());

  const std::size_t d = ctx.dim();
  auto integrate = [&](std::size_t steps) {
    Vec state(x.begin(), x.end());
    Vec probe(d);
    const double h = (s - t) / static_cast<double>(steps);
    for (std::size_t n = 0; n < steps; ++n) {
      const double tau = t + h * static_cast<double>(n);
      const Vec k1 = velocity_exact(ctx, tau, state);
      for (std::size_t i = 0; i < d; ++i) probe[i] = state[i] + 0.5 * h * k1[i];
      const Vec k2 = velocity_exact(ctx, tau + 0.5 * h, probe);
      for (std::size_t i = 0; i < d; ++i) probe[i] = state[i] + 0.5 * h * k2[i];
      const Vec k3 = velocity_exact(ctx, tau + 0.5 * h, probe);
      for (std::size_t i = 0; i < d; ++i) probe[i] = state[i] + h * k3[i];
      const Vec k4 = velocity_exact(ctx, std::min(tau + h, s), probe);
      for (std::size_t i = 0; i < d; ++i) state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    return state;
  };

  constexpr std::size_t kMaxSteps = std::size_t{1} << 20;
  Vec coarse = integrate(8);
  for (std::size_t steps = 16; steps <= kMaxSteps; steps *= 2) {
    Vec fine = integrate(steps);
    if (!all_finite(fine)) throw NumericError("flow_exact: non-finite state");
    double diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) diff = std::max(diff, std::abs(fine[i] - coarse[i]));
    if (diff < tol) return fine;
    coarse = std::move(fine);
  }
  throw NumericError("flow_exact: step halving did not converge within the step budget");
}

ManifoldParts manifold_decompose(const OracleContext& ctx, double t, std::span<const double> x) {
  const TargetSpec& spec = ctx.spec();
  if (spec.kind != TargetKind::EmbeddedMixture || !spec.frame)
    throw ContractError("manifold_decompose: target carries no frame");
  require_open_time(t, "manifold_decompose");
  require_dim(ctx, x, "manifold_decompose");
  const Frame& frame = *spec.frame;

  TargetSpec low;
  low.kind = TargetKind::AtomicMixture;
  low.atoms = spec.low_atoms;
  low.weights = spec.weights;
  low.sigma = spec.sigma;
  const OracleContext low_ctx(std::move(low), ctx.schedule());

  ManifoldParts parts;
  parts.gamma = gaussian_rate(ctx.schedule(), spec.sigma, t);
  const Vec low_x = frame.project(x);
  parts.tangential = frame.lift(velocity_exact(low_ctx, t, low_x));
  const Vec on_manifold = frame.lift(low_x);
  parts.normal.resize(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) parts.normal[k] = parts.gamma * (x[k] - on_manifold[k]);
  return parts;
}

Vec velocity_jacobian_fd(const OracleContext& ctx, double t, std::span<const double> x) {
  const std::size_t d = ctx.dim();
  const double h = 1e-5 * (1.0 + norm_inf(x));
  Vec jac(d * d);
  Vec probe(x.begin(), x.end());
  for (std::size_t q = 0; q < d; ++q) {
    probe[q] = x[q] + h;
    const Vec plus = velocity_exact(ctx, t, probe);
    probe[q] = x[q] - h;
    const Vec minus = velocity_exact(ctx, t, probe);
    probe[q] = x[q];
    for (std::size_t p = 0; p < d; ++p) jac[p * d + q] = (plus[p] - minus[p]) / (2.0 * h);
  }
  return jac;
}

}  // namespace charflow
