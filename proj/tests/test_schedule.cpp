#include <doctest.h>

#include <cmath>

#include "charflow/errors.hpp"
#include "charflow/rng.hpp"
#include "charflow/schedule.hpp"

using namespace charflow;

namespace {

const Schedule kLinear(ScheduleKind::Linear);
const Schedule kFollmer(ScheduleKind::Follmer);

// exp of the integral of alpha'/alpha over [t, s] by composite Simpson
double phi_quadrature(const Schedule& sch, double t, double s, int n = 2000) {
  const double h = (s - t) / n;
  double acc = sch.log_rate(t) + sch.log_rate(s);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * sch.log_rate(t + i * h);
  return std::exp(acc * h / 3.0);
}

double psi_quadrature(const Schedule& sch, double t, double s, int n = 20000) {
  const double h = (s - t) / n;
  auto f = [&](double tau) { return phi_quadrature(sch, tau, s, 1000) * sch.denoiser_gain(tau); };
  double acc = f(t) + f(s);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(t + i * h);
  return acc * h / 3.0;
}

}  // namespace

TEST_CASE("coefficients at the documented points") {
  auto c = kLinear.coeffs(0.25);
  CHECK(c.alpha == 0.75);
  CHECK(c.beta == 0.25);
  CHECK(c.dalpha == -1.0);
  CHECK(c.dbeta == 1.0);

  c = kFollmer.coeffs(0.6);
  CHECK(c.alpha == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(c.beta == 0.6);
  CHECK(c.dalpha == doctest::Approx(-0.75).epsilon(1e-15));
  CHECK(c.dbeta == 1.0);

  c = kLinear.coeffs(0.0);
  CHECK(c.alpha == 1.0);
  CHECK(c.beta == 0.0);
  CHECK(c.dalpha == -1.0);
  CHECK(c.dbeta == 1.0);
}

TEST_CASE("coefficient errors") {
  CHECK_THROWS_AS(kLinear.coeffs(-0.1), DomainError);
  CHECK_THROWS_AS(kLinear.coeffs(1.1), DomainError);
  CHECK_THROWS_AS(kFollmer.coeffs(1.0), SingularityError);
  CHECK_NOTHROW(kLinear.coeffs(1.0));
}

TEST_CASE("exponential integrator kernels") {
  auto k = kLinear.ei_coeffs(0.0, 0.5);
  CHECK(k.phi == 0.5);
  CHECK(k.psi == 0.5);
  k = kFollmer.ei_coeffs(0.0, 0.6);
  CHECK(k.phi == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(k.psi == doctest::Approx(0.6).epsilon(1e-15));
  for (const Schedule& s : {kLinear, kFollmer}) {
    k = s.ei_coeffs(0.37, 0.37);
    CHECK(k.phi == 1.0);
    CHECK(k.psi == 0.0);
  }
  CHECK_THROWS_AS(kLinear.ei_coeffs(0.5, 0.4), ContractError);
  CHECK_THROWS_AS(kLinear.ei_coeffs(0.5, 1.0), SingularityError);
}

TEST_CASE("closed-form kernels agree with quadrature") {
  for (const Schedule& s : {kLinear, kFollmer})
    for (const auto& [t, u] : {std::pair{0.0, 0.5}, std::pair{0.2, 0.9}, std::pair{0.5, 0.99}}) {
      const auto k = s.ei_coeffs(t, u);
      CHECK(k.phi == doctest::Approx(phi_quadrature(s, t, u)).epsilon(1e-9));
      CHECK(k.psi == doctest::Approx(psi_quadrature(s, t, u)).epsilon(1e-7));
    }
}

TEST_CASE("kernel invariants") {
  Rng rng(1);
  for (const Schedule& s : {kLinear, kFollmer})
    for (int i = 0; i < 200; ++i) {
      double a = rng.uniform(0.0, 0.999), b = rng.uniform(0.0, 0.999), c = rng.uniform(0.0, 0.999);
      if (a > b) std::swap(a, b);
      if (b > c) std::swap(b, c);
      if (a > b) std::swap(a, b);
      const double lhs = s.ei_coeffs(a, b).phi * s.ei_coeffs(b, c).phi;
      CHECK(std::abs(lhs - s.ei_coeffs(a, c).phi) < 1e-12);
      const auto near = s.ei_coeffs(a, a + 1e-6);
      CHECK(std::abs(near.psi) < 1e-5);
      CHECK(std::abs(near.phi - 1.0) < 1e-5);
      if (s.kind() == ScheduleKind::Linear) {
        const auto k = s.ei_coeffs(a, c);
        CHECK(std::abs(k.phi + k.psi - 1.0) < 1e-12);
      }
    }
  for (double t = 0.0; t <= 0.999; t += 0.001) {
    CHECK(std::isfinite(kLinear.denoiser_gain(t)));
    CHECK(std::isfinite(kFollmer.denoiser_gain(t)));
  }
  CHECK(kLinear.denoiser_gain(0.5) == doctest::Approx(2.0));
  CHECK(kFollmer.denoiser_gain(0.5) == doctest::Approx(1.0 / 0.75));
}

TEST_CASE("denoiser scaling") {
  const auto c = kLinear.denoiser_coeffs(0.0, 0.5);
  CHECK(c.c_in == 1.0);
  CHECK(c.c_skip == 0.0);
  CHECK(c.c_out == 0.5);
  CHECK(c.omega == 4.0);
  CHECK(c.c_noise == 0.0);
  CHECK_THROWS_AS(kLinear.denoiser_coeffs(1.0, 0.5), SingularityError);

  // Var[c_in X_t] = 1 by Monte Carlo on a Gaussian target with std sigma_d
  const double sd = 0.7;
  Rng rng(4);
  for (const Schedule& s : {kLinear, kFollmer})
    for (double t : {0.0, 0.3, 0.6, 0.9, 0.99}) {
      const auto k = s.coeffs(t);
      const double c_in = s.denoiser_coeffs(t, sd).c_in;
      double sum2 = 0.0;
      const int n = 100000;
      for (int i = 0; i < n; ++i) {
        const double xt = k.alpha * rng.normal() + k.beta * sd * rng.normal();
        sum2 += c_in * c_in * xt * xt;
      }
      CHECK(sum2 / n == doctest::Approx(1.0).epsilon(0.02));

      // c_out^2 = Var[X1 - c X_t] is stationary in c at c_skip
      const auto scale = s.denoiser_coeffs(t, sd);
      const double var = k.alpha * k.alpha + k.beta * k.beta * sd * sd;
      auto target_var = [&](double c) { return sd * sd - 2.0 * c * k.beta * sd * sd + c * c * var; };
      const double h = 1e-5;
      CHECK(std::abs((target_var(scale.c_skip + h) - target_var(scale.c_skip - h)) / (2 * h)) < 1e-8);
      CHECK(target_var(scale.c_skip) == doctest::Approx(scale.c_out * scale.c_out).epsilon(1e-12));
    }
}

TEST_CASE("schedule validation") {
  for (const Schedule& s : {kLinear, kFollmer}) {
    const auto report = validate_schedule(s, 101);
    CHECK(report.all_passed());
    CHECK(report.clauses.size() == 3);
    for (const auto& clause : report.clauses) CHECK(clause.worst_violation == 0.0);
  }
  CHECK(kLinear.alpha(0.0) == 1.0);
  CHECK(kFollmer.alpha(0.0) == 1.0);
  CHECK(kFollmer.beta(1.0) == 1.0);
  CHECK(kFollmer.alpha(1.0) == 0.0);
}

TEST_CASE("kappa grows toward the endpoint") {
  for (const Schedule& s : {kLinear, kFollmer}) {
    CHECK(std::isfinite(s.kappa(0.99)));
    CHECK(s.kappa(0.99) > s.kappa(0.9));
  }
  CHECK(kLinear.kappa(0.5) == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("schedule names") {
  CHECK(parse_schedule_kind("linear") == ScheduleKind::Linear);
  CHECK(parse_schedule_kind("follmer") == ScheduleKind::Follmer);
  CHECK_THROWS_AS(parse_schedule_kind("cosine"), ParseError);
  CHECK(default_stop_time(ScheduleKind::Linear) == 0.99);
  CHECK(default_stop_time(ScheduleKind::Follmer) == 0.999);
}
