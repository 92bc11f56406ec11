#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>

#include "charflow/points.hpp"

namespace charflow {

/// d x k matrix with orthonormal columns, row-major.
class Frame {
 public:
  Frame() = default;
  Frame(std::size_t ambient_dim, std::size_t intrinsic_dim, Vec entries);

  std::size_t ambient_dim() const { return rows_; }
  std::size_t intrinsic_dim() const { return cols_; }
  double operator()(std::size_t i, std::size_t j) const { return entries_[i * cols_ + j]; }
  std::span<const double> entries() const { return entries_; }

  /// P x_low
  Vec lift(std::span<const double> low) const;
  /// P^T x
  Vec project(std::span<const double> x) const;
  /// max |P^T P - I|
  double orthonormality_error() const;

  /// First k standard basis vectors of R^d as columns.
  static Frame axes(std::size_t ambient_dim, std::size_t intrinsic_dim);

  friend bool operator==(const Frame&, const Frame&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec entries_;
};

enum class TargetKind { AtomicMixture, EmbeddedMixture, SwissRoll };

std::string_view to_string(TargetKind kind);
/// "mixture" | "embedded" | "swiss_roll"
TargetKind parse_target_kind(std::string_view name);

/// Gaussian-smoothed weighted atoms N(0, sigma^2 I) * sum_j w_j delta_{u_j},
/// the same mixture embedded through an orthonormal frame, or the Swiss roll.
struct TargetSpec {
  TargetKind kind = TargetKind::AtomicMixture;
  PointSet atoms;  // ambient coordinates (already lifted for EmbeddedMixture)
  Vec weights;
  double sigma = 0.5;
  std::optional<Frame> frame;  // EmbeddedMixture only
  PointSet low_atoms;          // EmbeddedMixture only: atoms before lifting
  double swiss_noise = 0.05;

  std::size_t dim() const;
};

TargetSpec make_mixture(PointSet atoms, Vec weights, double sigma);
TargetSpec make_swiss_roll(double noise = 0.05);

/// Throws ValidationError on negative/unnormalized weights, sigma <= 0,
/// non-orthonormal frames or inconsistent shapes.
void validate(const TargetSpec& spec);

/// Whether all (pre-embedding) atoms lie in the unit cube. Reported, not enforced.
bool atoms_in_unit_cube(const TargetSpec& spec);

/// Maps u_j -> P u_j; sigma unchanged (the smoothing stays isotropic in R^d).
TargetSpec embed_target(const TargetSpec& low, const Frame& frame);

/// n draws, deterministic in seed. Mixture draws consume one uniform for the
/// atom index, then d normals; Swiss-roll draws consume one uniform for the
/// angle, then two normals.
PointSet sample_target(const TargetSpec& spec, std::size_t n, std::uint64_t seed);

}  // namespace charflow
