#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace charflow {

using Vec = std::vector<double>;

/// n points in R^dim, stored row-major (one point per row).
class PointSet {
 public:
  PointSet() = default;
  PointSet(std::size_t n, std::size_t dim) : n_(n), dim_(dim), data_(n * dim, 0.0) {}
  PointSet(std::size_t n, std::size_t dim, std::vector<double> data);

  std::size_t size() const { return n_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return n_ == 0; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * dim_, dim_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * dim_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * dim_ + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void push_back(std::span<const double> point);

  friend bool operator==(const PointSet&, const PointSet&) = default;

 private:
  std::size_t n_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);
double norm_inf(std::span<const double> a);
bool all_finite(std::span<const double> a);

/// Per-coordinate sample mean.
Vec column_mean(const PointSet& points);
/// Per-coordinate sample standard deviation (divisor n - 1).
Vec column_std(const PointSet& points);

}  // namespace charflow
