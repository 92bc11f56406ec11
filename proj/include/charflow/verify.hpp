#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "charflow/oracle.hpp"
#include "charflow/points.hpp"
#include "charflow/target.hpp"

namespace charflow {

/// Target families with closed-form oracles: a 1-D two-atom mixture, a 2-D
/// weighted three-atom mixture and a 1-D mixture embedded in R^3.
std::vector<std::pair<std::string, TargetSpec>> oracle_families();

/// Max over probes of |lhs - rhs|_inf / (1 + |rhs|_inf) for the three closed-form
/// cross-identities. Probes are t ~ U[0.001, 0.99], x ~ X_t.
struct IdentityErrors {
  double velocity_from_denoiser = 0.0;  // velocity_from_denoiser(denoiser_exact) vs velocity_exact
  double denoiser_from_velocity = 0.0;  // denoiser_from_velocity(velocity_exact) vs denoiser_exact
  double score_relation = 0.0;          // b = (beta'/beta) x + alpha^2 (beta'/beta - alpha'/alpha) score
  double max() const;
};
IdentityErrors oracle_identity_errors(const OracleContext& ctx, std::size_t probes, std::uint64_t seed);

/// Max over probes of |tangential + normal - b*|_inf / (1 + |b*|_inf).
double manifold_decomposition_error(const OracleContext& ctx, std::size_t probes, std::uint64_t seed);

/// |g - fd|_2 / max(|g|_2, |fd|_2, 1e-12) with central differences of f at params.
double gradient_relative_error(const std::function<double(std::span<const double>)>& f, std::span<const double> params,
                               std::span<const double> analytic, double h = 1e-6);

struct GradientCheck {
  std::string loss;
  std::size_t config;
  double relative_error;
};

/// Finite-difference checks of every training loss on `configs` random small
/// configurations each (dimension, widths, time features, schedule vary).
std::vector<GradientCheck> gradient_checks(std::size_t configs, std::uint64_t seed);

struct CheckResult {
  std::string name;
  bool passed;
  double value;
  double tolerance;
  std::string detail;
};

/// Runs every oracle and property check that finishes in seconds.
std::vector<CheckResult> run_verify_suite(std::uint64_t seed = 0);

/// Fixed-width table, one check per line, then a summary line.
void print_check_table(std::ostream& out, const std::vector<CheckResult>& results);

}  // namespace charflow
