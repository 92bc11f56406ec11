#include "charflow/points.hpp"

#include <cmath>

#include "charflow/errors.hpp"

namespace charflow {

PointSet::PointSet(std::size_t n, std::size_t dim, std::vector<double> data)
    : n_(n), dim_(dim), data_(std::move(data)) {
  if (data_.size() != n_ * dim_) throw ContractError("PointSet: data length does not match n * dim");
}

void PointSet::push_back(std::span<const double> point) {
  if (n_ == 0 && dim_ == 0) dim_ = point.size();
  if (point.size() != dim_) throw ContractError("PointSet::push_back: dimension mismatch");
  data_.insert(data_.end(), point.begin(), point.end());
  ++n_;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(std::span<const double> a) {
  for (double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

Vec column_mean(const PointSet& points) {
  Vec mean(points.dim(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = 0; j < points.dim(); ++j) mean[j] += points(i, j);
  for (double& m : mean) m /= static_cast<double>(points.size());
  return mean;
}

Vec column_std(const PointSet& points) {
  const Vec mean = column_mean(points);
  Vec var(points.dim(), 0.0);
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = 0; j < points.dim(); ++j) {
      const double diff = points(i, j) - mean[j];
      var[j] += diff * diff;
    }
  for (double& v : var) v = std::sqrt(v / static_cast<double>(points.size() - 1));
  return var;
}

}  // namespace charflow
