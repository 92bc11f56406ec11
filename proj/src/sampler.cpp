#include "charflow/sampler.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "charflow/errors.hpp"
#include "charflow/rng.hpp"

namespace charflow {

namespace {

constexpr std::string_view kTrajMagic = "CHARFLOW-TRAJ 1";

void check_finite_rows(const PointSet& x, std::size_t step) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!all_finite(x.row(i)))
      throw NumericError("non-finite state for particle " + std::to_string(i) + " at step " + std::to_string(step));
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  char bytes[8];
  std::memcpy(bytes, &bits, 8);
  out.write(bytes, 8);
}

double read_f64(std::istream& in) {
  char bytes[8];
  if (!in.read(bytes, 8)) throw ParseError("trajectory file: truncated data block");
  std::uint64_t bits = 0;
  std::memcpy(&bits, bytes, 8);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

}  // namespace

Field batched(PointField field) {
  return [field = std::move(field)](double t, const PointSet& x) {
    PointSet out(x.size(), x.dim());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Vec v = field(t, x.row(i));
      if (v.size() != x.dim()) throw ContractError("field output dimension mismatch");
      std::copy(v.begin(), v.end(), out.row(i).begin());
    }
    return out;
  };
}

TimeGrid::TimeGrid(double stop_time, std::size_t steps) : stop_time_(stop_time), steps_(steps) {
  if (steps_ == 0) throw ContractError("TimeGrid: need at least one step");
  if (!(stop_time_ > 0.0 && stop_time_ < 1.0)) throw DomainError("TimeGrid: stop time must lie in (0, 1)");
}

double TimeGrid::node(std::size_t k) const {
  if (k > steps_) throw ContractError("TimeGrid::node: index beyond K");
  if (k == steps_) return stop_time_;
  return stop_time_ * static_cast<double>(k) / static_cast<double>(steps_);
}

void euler_step(const Field& velocity, double t, double s, PointSet& x) {
  const PointSet v = velocity(t, x);
  if (v.size() != x.size() || v.dim() != x.dim()) throw ContractError("euler_step: field output shape mismatch");
  const double tau = s - t;
  for (std::size_t i = 0; i < x.data().size(); ++i) x.data()[i] += tau * v.data()[i];
}

void ei_step(const Field& denoiser, const Schedule& schedule, double t, double s, PointSet& x) {
  const EiKernels kernels = schedule.ei_coeffs(t, s);
  const PointSet dn = denoiser(t, x);
  if (dn.size() != x.size() || dn.dim() != x.dim()) throw ContractError("ei_step: field output shape mismatch");
  for (std::size_t i = 0; i < x.data().size(); ++i)
    x.data()[i] = kernels.phi * x.data()[i] + kernels.psi * dn.data()[i];
}

PointSet euler_flow(const Field& velocity, std::span<const double> x, const TimeGrid& grid, std::size_t from,
                    std::size_t to) {
  if (from > to || to > grid.steps()) throw ContractError("euler_flow: requires from <= to <= K");
  PointSet state(1, x.size(), Vec(x.begin(), x.end()));
  PointSet out(0, x.size());
  out.push_back(state.row(0));
  for (std::size_t k = from + 1; k <= to; ++k) {
    euler_step(velocity, grid.node(k - 1), grid.node(k), state);
    check_finite_rows(state, k);
    out.push_back(state.row(0));
  }
  return out;
}

PointSet euler_flow(const Field& velocity, std::span<const double> x0, const TimeGrid& grid) {
  return euler_flow(velocity, x0, grid, 0, grid.steps());
}

PointSet ei_flow(const Field& denoiser, const Schedule& schedule, std::span<const double> x0, const TimeGrid& grid) {
  PointSet state(1, x0.size(), Vec(x0.begin(), x0.end()));
  PointSet out(0, x0.size());
  out.push_back(state.row(0));
  for (std::size_t k = 1; k <= grid.steps(); ++k) {
    ei_step(denoiser, schedule, grid.node(k - 1), grid.node(k), state);
    check_finite_rows(state, k);
    out.push_back(state.row(0));
  }
  return out;
}

SamplerKind parse_sampler_kind(std::string_view name) {
  if (name == "euler") return SamplerKind::Euler;
  if (name == "ei") return SamplerKind::ExponentialIntegrator;
  throw ParseError("unknown sampler '" + std::string(name) + "' (expected euler | ei)");
}

std::string_view to_string(SamplerKind kind) { return kind == SamplerKind::Euler ? "euler" : "ei"; }

TrajectoryBatch::TrajectoryBatch(TimeGrid grid, ScheduleKind schedule, std::uint64_t seed, std::size_t particles,
                                 std::size_t dim)
    : TrajectoryBatch(grid, schedule, seed, particles, dim, Vec(particles * (grid.steps() + 1) * dim, 0.0)) {}

TrajectoryBatch::TrajectoryBatch(TimeGrid grid, ScheduleKind schedule, std::uint64_t seed, std::size_t particles,
                                 std::size_t dim, Vec states)
    : grid_(grid), schedule_(schedule), seed_(seed), particles_(particles), dim_(dim), states_(std::move(states)) {
  if (states_.size() != particles_ * (grid_.steps() + 1) * dim_)
    throw ContractError("TrajectoryBatch: state count does not match m (K + 1) d");
}

std::span<double> TrajectoryBatch::state(std::size_t particle, std::size_t k) {
  if (particle >= particles_ || k > grid_.steps()) throw ContractError("TrajectoryBatch: index out of range");
  return {states_.data() + (particle * (grid_.steps() + 1) + k) * dim_, dim_};
}

std::span<const double> TrajectoryBatch::state(std::size_t particle, std::size_t k) const {
  if (particle >= particles_ || k > grid_.steps()) throw ContractError("TrajectoryBatch: index out of range");
  return {states_.data() + (particle * (grid_.steps() + 1) + k) * dim_, dim_};
}

PointSet TrajectoryBatch::slice(std::size_t k) const {
  PointSet out(0, dim_);
  for (std::size_t i = 0; i < particles_; ++i) out.push_back(state(i, k));
  return out;
}

PointSet prior_draws(std::size_t m, std::size_t dim, std::uint64_t seed) {
  PointSet out(m, dim);
  for (std::size_t i = 0; i < m; ++i) {
    Rng rng(derive_seed(seed, i));
    for (std::size_t k = 0; k < dim; ++k) out(i, k) = rng.normal();
  }
  return out;
}

TrajectoryBatch push_samples(SamplerKind kind, const Field& field, const Schedule& schedule, std::size_t m,
                             std::size_t dim, const TimeGrid& grid, std::uint64_t seed) {
  if (m == 0) throw ContractError("push_samples: need at least one particle");
  TrajectoryBatch batch(grid, schedule.kind(), seed, m, dim);
  PointSet state = prior_draws(m, dim, seed);
  const auto record = [&](std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
      auto dst = batch.state(i, k);
      std::copy(state.row(i).begin(), state.row(i).end(), dst.begin());
    }
  };
  record(0);
  for (std::size_t k = 1; k <= grid.steps(); ++k) {
    if (kind == SamplerKind::Euler)
      euler_step(field, grid.node(k - 1), grid.node(k), state);
    else
      ei_step(field, schedule, grid.node(k - 1), grid.node(k), state);
    check_finite_rows(state, k);
    record(k);
  }
  return batch;
}

void write_trajectories(std::ostream& out, const TrajectoryBatch& batch, std::string_view provenance) {
  if (!provenance.empty()) out << provenance << '\n';
  char stop[32];
  std::snprintf(stop, sizeof stop, "%.17g", batch.grid().stop_time());
  out << kTrajMagic << '\n'
      << "m=" << batch.particles() << '\n'
      << "K=" << batch.grid().steps() << '\n'
      << "d=" << batch.dim() << '\n'
      << "T=" << stop << '\n'
      << "schedule=" << to_string(batch.schedule()) << '\n'
      << "seed=" << batch.seed() << '\n'
      << "data\n";
  for (double v : batch.states()) write_f64(out, v);
  if (!out) throw std::runtime_error("write_trajectories: stream failure");
}

TrajectoryBatch read_trajectories(std::istream& in) {
  std::string line;
  while (std::getline(in, line) && line.starts_with('#')) {
  }
  if (line != kTrajMagic) throw ParseError("trajectory file: missing '" + std::string(kTrajMagic) + "' header");
  std::size_t m = 0, steps = 0, d = 0;
  double stop = 0.0;
  std::uint64_t seed = 0;
  ScheduleKind schedule = ScheduleKind::Linear;
  while (std::getline(in, line) && line != "data") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("trajectory file: malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "m") m = std::stoul(value);
    else if (key == "K") steps = std::stoul(value);
    else if (key == "d") d = std::stoul(value);
    else if (key == "T") stop = std::stod(value);
    else if (key == "schedule") schedule = parse_schedule_kind(value);
    else if (key == "seed") seed = std::stoull(value);
    else throw ParseError("trajectory file: unknown header key '" + key + "'");
  }
  if (line != "data") throw ParseError("trajectory file: missing data marker");
  const TimeGrid grid(stop, steps);
  Vec states(m * (steps + 1) * d);
  for (double& v : states) v = read_f64(in);
  return TrajectoryBatch(grid, schedule, seed, m, d, std::move(states));
}

void save_trajectories(const std::string& path, const TrajectoryBatch& batch, std::string_view provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_trajectories(out, batch, provenance);
}

TrajectoryBatch load_trajectories(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open trajectory file '" + path + "'");
  return read_trajectories(in);
}

}  // namespace charflow
