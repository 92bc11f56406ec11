#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "charflow/points.hpp"

namespace charflow {

/// Largest n accepted by w2_exact.
inline constexpr std::size_t kW2ExactMaxSize = 4096;

/// W2 between two equal-size empirical measures by an exact assignment solve.
double w2_exact(const PointSet& a, const PointSet& b);

/// Optimal permutation for w2_exact: a_i is matched with b_{perm[i]}.
std::vector<std::size_t> optimal_assignment(const PointSet& a, const PointSet& b);

/// Closed-form W2 between N(m1, C1) and N(m2, C2). Covariances are d x d row-major.
double w2_gaussian(const Vec& m1, const Vec& c1, const Vec& m2, const Vec& c2);

/// Root-mean over random unit directions of the squared 1-D W2 of the projections.
/// Unequal sizes are compared through their quantile functions.
double sliced_w2(const PointSet& a, const PointSet& b, std::size_t projections, std::uint64_t seed);

struct Moments {
  Vec mean;
  Vec covariance;  // d x d row-major, divisor n - 1
};

Moments fit_moments(const PointSet& points);

struct OrderFit {
  double slope;
  double intercept;
  double r2;
};

/// Least squares of log(err) against log(h).
OrderFit order_fit(const std::vector<double>& h, const std::vector<double>& err);

/// One metric record. Serialized as a single line of space-separated key=value
/// tokens: metric=<name> value=<v> n_a=<n> n_b=<n> seed=<u64> then any extra
/// entries in key order. Names and keys contain no spaces or '='.
struct MetricReport {
  std::string metric;
  double value = 0.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
  std::uint64_t seed = 0;
  std::map<std::string, double> extra;

  std::string to_line() const;
  static MetricReport from_line(const std::string& line);

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

void write_reports(std::ostream& out, const std::vector<MetricReport>& reports);
std::vector<MetricReport> read_reports(std::istream& in);

}  // namespace charflow
