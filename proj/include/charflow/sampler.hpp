#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>

#include "charflow/points.hpp"
#include "charflow/schedule.hpp"
#include "charflow/velocity.hpp"

namespace charflow {

/// Field evaluated on a batch of points at a common time; returns one row per input row.
using Field = std::function<PointSet(double t, const PointSet& x)>;

/// Lifts a pointwise field to a batched one.
Field batched(PointField field);

/// Uniform nodes t_k = T k / K, k = 0..K.
class TimeGrid {
 public:
  TimeGrid(double stop_time, std::size_t steps);

  double stop_time() const { return stop_time_; }
  std::size_t steps() const { return steps_; }
  double step_size() const { return stop_time_ / static_cast<double>(steps_); }
  double node(std::size_t k) const;

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;

 private:
  double stop_time_;
  std::size_t steps_;
};

/// States x_from .. x_to of x_k = x_{k-1} + tau b(t_{k-1}, x_{k-1}), starting
/// from x at node `from`. Returns (to - from + 1) rows.
PointSet euler_flow(const Field& velocity, std::span<const double> x, const TimeGrid& grid, std::size_t from,
                    std::size_t to);
PointSet euler_flow(const Field& velocity, std::span<const double> x0, const TimeGrid& grid);

/// x_{k+1} = Phi(t_k, t_{k+1}) x_k + Psi(t_k, t_{k+1}) D(t_k, x_k).
PointSet ei_flow(const Field& denoiser, const Schedule& schedule, std::span<const double> x0, const TimeGrid& grid);

/// One step of either scheme applied to every row of x in place.
void euler_step(const Field& velocity, double t, double s, PointSet& x);
void ei_step(const Field& denoiser, const Schedule& schedule, double t, double s, PointSet& x);

enum class SamplerKind { Euler, ExponentialIntegrator };

SamplerKind parse_sampler_kind(std::string_view name);
std::string_view to_string(SamplerKind kind);

/// m particles x (K + 1) states in R^d, stored particle-major.
class TrajectoryBatch {
 public:
  TrajectoryBatch(TimeGrid grid, ScheduleKind schedule, std::uint64_t seed, std::size_t particles, std::size_t dim);
  TrajectoryBatch(TimeGrid grid, ScheduleKind schedule, std::uint64_t seed, std::size_t particles, std::size_t dim,
                  Vec states);

  const TimeGrid& grid() const { return grid_; }
  ScheduleKind schedule() const { return schedule_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t particles() const { return particles_; }
  std::size_t dim() const { return dim_; }

  std::span<double> state(std::size_t particle, std::size_t k);
  std::span<const double> state(std::size_t particle, std::size_t k) const;
  std::span<const double> states() const { return states_; }

  /// States at node k for all particles.
  PointSet slice(std::size_t k) const;
  PointSet endpoints() const { return slice(grid_.steps()); }

  friend bool operator==(const TrajectoryBatch&, const TrajectoryBatch&) = default;

 private:
  TimeGrid grid_;
  ScheduleKind schedule_;
  std::uint64_t seed_;
  std::size_t particles_;
  std::size_t dim_;
  Vec states_;
};

/// Particle i starts from d normals of Rng(derive_seed(seed, i)).
PointSet prior_draws(std::size_t m, std::size_t dim, std::uint64_t seed);

/// Draws m prior points and integrates them all on the grid. `field` is the
/// velocity for Euler and the denoiser for the exponential integrator.
TrajectoryBatch push_samples(SamplerKind kind, const Field& field, const Schedule& schedule, std::size_t m,
                             std::size_t dim, const TimeGrid& grid, std::uint64_t seed);

/// Binary layout after an optional '#' provenance line: "CHARFLOW-TRAJ 1",
/// key=value lines m, K, d, T, schedule, seed, then "data" and m (K+1) d
/// little-endian float64 values, particle-major.
void write_trajectories(std::ostream& out, const TrajectoryBatch& batch, std::string_view provenance = {});
TrajectoryBatch read_trajectories(std::istream& in);
void save_trajectories(const std::string& path, const TrajectoryBatch& batch, std::string_view provenance = {});
TrajectoryBatch load_trajectories(const std::string& path);

}  // namespace charflow
