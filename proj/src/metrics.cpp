#include "charflow/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

#include "charflow/errors.hpp"
#include "charflow/rng.hpp"

namespace charflow {

namespace {

void check_pair(const PointSet& a, const PointSet& b, const char* who) {
  if (a.size() != b.size()) throw ContractError(std::string(who) + ": point sets differ in size");
  if (a.dim() != b.dim() && !a.empty()) throw ContractError(std::string(who) + ": point sets differ in dimension");
  if (a.size() > kW2ExactMaxSize)
    throw ContractError(std::string(who) + ": n exceeds the exact solver cap, use sliced_w2");
}

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) throw NumericError(std::string("w2_gaussian: eigen solve failed on ") + what);
  Eigen::VectorXd values = solver.eigenvalues();
  const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values[i] < -1e-10 * scale) throw DomainError(std::string("w2_gaussian: ") + what + " is not positive semidefinite");
    values[i] = std::sqrt(std::max(values[i], 0.0));
  }
  return solver.eigenvectors() * values.asDiagonal() * solver.eigenvectors().transpose();
}

Eigen::MatrixXd covariance_matrix(const Vec& c, std::size_t d, const char* what) {
  if (c.size() != d * d) throw ContractError(std::string("w2_gaussian: ") + what + " has the wrong size");
  Eigen::MatrixXd m(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) m(i, j) = c[i * d + j];
  if (!m.allFinite()) throw DomainError(std::string("w2_gaussian: ") + what + " is not finite");
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff()))
    throw DomainError(std::string("w2_gaussian: ") + what + " is not symmetric");
  return 0.5 * (m + m.transpose());
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::size_t> optimal_assignment(const PointSet& a, const PointSet& b) {
  check_pair(a, b, "optimal_assignment");
  const std::size_t n = a.size();
  if (n == 0) return {};
  Matrix cost(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) cost(i, j) = squared_distance(a.row(i), b.row(j));

  // Shortest augmenting paths with row/column potentials, 1-based with a sentinel column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      const double* row = cost.data() + (i0 - 1) * n;
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> perm(n);
  for (std::size_t j = 1; j <= n; ++j) perm[match[j] - 1] = j - 1;
  return perm;
}

double w2_exact(const PointSet& a, const PointSet& b) {
  check_pair(a, b, "w2_exact");
  if (a.empty()) throw ContractError("w2_exact: empty point sets");
  const std::vector<std::size_t> perm = optimal_assignment(a, b);
  // summed in sorted order so that swapping a and b gives the same bits
  Vec costs(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) costs[i] = squared_distance(a.row(i), b.row(perm[i]));
  std::sort(costs.begin(), costs.end());
  double total = 0.0;
  for (const double c : costs) total += c;
  return std::sqrt(total / static_cast<double>(a.size()));
}

double w2_gaussian(const Vec& m1, const Vec& c1, const Vec& m2, const Vec& c2) {
  const std::size_t d = m1.size();
  if (m2.size() != d) throw ContractError("w2_gaussian: means differ in dimension");
  const Eigen::MatrixXd a = covariance_matrix(c1, d, "C1");
  const Eigen::MatrixXd b = covariance_matrix(c2, d, "C2");
  const Eigen::MatrixXd root_b = symmetric_sqrt(b, "C2");
  // C1 passes its own PSD check before the product is formed.
  symmetric_sqrt(a, "C1");
  const Eigen::MatrixXd inner = root_b * a * root_b;
  const Eigen::MatrixXd cross = symmetric_sqrt(0.5 * (inner + inner.transpose()), "C2^1/2 C1 C2^1/2");
  double mean_term = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_term += (m1[i] - m2[i]) * (m1[i] - m2[i]);
  const double trace_term = (a + b - 2.0 * cross).trace();
  return std::sqrt(std::max(mean_term + trace_term, 0.0));
}

double sliced_w2(const PointSet& a, const PointSet& b, std::size_t projections, std::uint64_t seed) {
  if (a.empty() || b.empty()) throw ContractError("sliced_w2: empty point set");
  if (a.dim() != b.dim()) throw ContractError("sliced_w2: point sets differ in dimension");
  if (projections == 0) throw ContractError("sliced_w2: need at least one projection");
  const std::size_t d = a.dim();
  Rng rng(seed);
  Vec direction(d), pa(a.size()), pb(b.size());
  double total = 0.0;
  for (std::size_t p = 0; p < projections; ++p) {
    if (d == 1) {
      direction[0] = 1.0;
    } else {
      double norm2 = 0.0;
      while (norm2 < 1e-24) {
        norm2 = 0.0;
        for (double& c : direction) {
          c = rng.normal();
          norm2 += c * c;
        }
      }
      const double inv = 1.0 / std::sqrt(norm2);
      for (double& c : direction) c *= inv;
    }
    for (std::size_t i = 0; i < a.size(); ++i) pa[i] = dot(a.row(i), direction);
    for (std::size_t i = 0; i < b.size(); ++i) pb[i] = dot(b.row(i), direction);
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    double sq = 0.0;
    if (pa.size() == pb.size()) {
      for (std::size_t i = 0; i < pa.size(); ++i) sq += (pa[i] - pb[i]) * (pa[i] - pb[i]);
      sq /= static_cast<double>(pa.size());
    } else {
      // integrate the squared quantile difference over the merged breakpoints
      const double na = static_cast<double>(pa.size());
      const double nb = static_cast<double>(pb.size());
      std::size_t i = 0, j = 0;
      double level = 0.0;
      while (i < pa.size() && j < pb.size()) {
        const double next = std::min(static_cast<double>(i + 1) / na, static_cast<double>(j + 1) / nb);
        sq += (next - level) * (pa[i] - pb[j]) * (pa[i] - pb[j]);
        level = next;
        if (static_cast<double>(i + 1) / na <= next) ++i;
        if (static_cast<double>(j + 1) / nb <= next) ++j;
      }
    }
    total += sq;
  }
  return std::sqrt(total / static_cast<double>(projections));
}

Moments fit_moments(const PointSet& points) {
  if (points.size() < 2) throw ContractError("fit_moments: need at least two points");
  const std::size_t d = points.dim();
  Moments m{column_mean(points), Vec(d * d, 0.0)};
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c)
        m.covariance[r * d + c] += (points(i, r) - m.mean[r]) * (points(i, c) - m.mean[c]);
  for (double& v : m.covariance) v /= static_cast<double>(points.size() - 1);
  return m;
}

OrderFit order_fit(const std::vector<double>& h, const std::vector<double>& err) {
  if (h.size() != err.size()) throw ContractError("order_fit: h and err differ in length");
  if (h.size() < 3) throw ContractError("order_fit: need at least three points");
  const std::size_t n = h.size();
  Vec lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(h[i] > 0.0) || !(err[i] > 0.0)) throw DomainError("order_fit: values must be positive");
    lx[i] = std::log(h[i]);
    ly[i] = std::log(err[i]);
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw DomainError("order_fit: all h values are equal");
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ly[i] - (intercept + slope * lx[i]);
    ss_res += r * r;
  }
  // a constant series is fitted perfectly by slope 0
  const double r2 = syy == 0.0 ? 1.0 : 1.0 - ss_res / syy;
  return {slope, intercept, r2};
}

std::string MetricReport::to_line() const {
  std::string line = "metric=" + metric + " value=" + format_double(value) + " n_a=" + std::to_string(n_a) +
                     " n_b=" + std::to_string(n_b) + " seed=" + std::to_string(seed);
  for (const auto& [key, v] : extra) line += " " + key + "=" + format_double(v);
  return line;
}

MetricReport MetricReport::from_line(const std::string& line) {
  MetricReport report;
  std::istringstream tokens(line);
  std::string token;
  bool seen_metric = false, seen_value = false;
  while (tokens >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0) throw ParseError("metric report: malformed token '" + token + "'");
    const std::string key = token.substr(0, eq);
    const std::string text = token.substr(eq + 1);
    try {
      if (key == "metric") {
        report.metric = text;
        seen_metric = true;
      } else if (key == "value") {
        report.value = std::stod(text);
        seen_value = true;
      } else if (key == "n_a") {
        report.n_a = std::stoull(text);
      } else if (key == "n_b") {
        report.n_b = std::stoull(text);
      } else if (key == "seed") {
        report.seed = std::stoull(text);
      } else {
        report.extra[key] = std::stod(text);
      }
    } catch (const std::logic_error&) {
      throw ParseError("metric report: bad value for '" + key + "'");
    }
  }
  if (!seen_metric || !seen_value) throw ParseError("metric report: missing metric or value");
  return report;
}

void write_reports(std::ostream& out, const std::vector<MetricReport>& reports) {
  for (const MetricReport& r : reports) out << r.to_line() << '\n';
}

std::vector<MetricReport> read_reports(std::istream& in) {
  std::vector<MetricReport> reports;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    reports.push_back(MetricReport::from_line(line));
  }
  return reports;
}

}  // namespace charflow
