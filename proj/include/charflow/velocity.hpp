#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>

#include "charflow/errors.hpp"
#include "charflow/net.hpp"
#include "charflow/oracle.hpp"
#include "charflow/points.hpp"
#include "charflow/rng.hpp"
#include "charflow/schedule.hpp"

namespace charflow {

/// Pointwise field (t, x) -> R^d.
using PointField = std::function<Vec(double, std::span<const double>)>;

enum class LossKind { Velocity, Denoiser };

LossKind parse_loss_kind(std::string_view name);
std::string_view to_string(LossKind kind);

/// Rows of (t, X0, X1) with X_t = alpha X0 + beta X1 and regression target
/// Y_t = alpha' X0 + beta' X1.
struct InterpolantBatch {
  Schedule schedule;
  Vec times;
  PointSet x0;
  PointSet x1;
  PointSet xt;
  PointSet target;

  std::size_t size() const { return times.size(); }
  std::size_t dim() const { return x0.dim(); }
};

/// Builds a batch from explicit (t, X0, X1) rows.
InterpolantBatch make_batch(const Schedule& schedule, Vec times, PointSet x0, PointSet x1);

/// t ~ U[0, T], X0 ~ N(0, I), X1 drawn with replacement from data. Per row the
/// stream consumes t, the data index, then d normals.
InterpolantBatch draw_batch(const PointSet& data, const Schedule& schedule, double stop_time, std::size_t m,
                            Rng& rng);
InterpolantBatch draw_batch(const PointSet& data, const Schedule& schedule, double stop_time, std::size_t m,
                            std::uint64_t seed);

/// Network input rows [features(t_i), scale_i * x_i].
PointSet time_conditioned_inputs(const TimeFeatures& features, std::span<const double> times, const PointSet& x,
                                 std::span<const double> scales = {});

struct LossResult {
  double loss = 0.0;
  Vec grad;
};

/// (1/m) sum |Y_t - b(t, X_t)|^2 and its parameter gradient.
LossResult velocity_loss(const Net& net, const InterpolantBatch& batch);

/// (1/m) sum |F(c_noise, c_in X_t) - (X1 - c_skip X_t) / c_out|^2 and its parameter gradient.
LossResult denoiser_loss(const Net& net, const InterpolantBatch& batch, double sigma_data);

/// b(t, x) = (alpha'/alpha) x + beta (beta'/beta - alpha'/alpha) D(t, x).
Vec velocity_from_denoiser(const PointField& denoiser, const Schedule& schedule, double t,
                           std::span<const double> x);

/// Inverse of velocity_from_denoiser.
Vec denoiser_from_velocity(const PointField& velocity, const Schedule& schedule, double t,
                           std::span<const double> x);

/// Average per-coordinate standard deviation of a data set.
double estimate_sigma_data(const PointSet& data);

/// A trained velocity or denoiser network plus everything needed to evaluate it.
class LearnedField {
 public:
  LearnedField(Net net, LossKind kind, Schedule schedule, double sigma_data);

  const Net& net() const { return net_; }
  LossKind kind() const { return kind_; }
  const Schedule& schedule() const { return schedule_; }
  double sigma_data() const { return sigma_data_; }
  std::size_t dim() const { return net_.spec().output_dim; }

  /// Per-row times.
  PointSet velocity(std::span<const double> times, const PointSet& x) const;
  PointSet denoiser(std::span<const double> times, const PointSet& x) const;
  /// Common time for all rows.
  PointSet velocity(double t, const PointSet& x) const;
  PointSet denoiser(double t, const PointSet& x) const;

  Checkpoint to_checkpoint() const;
  static LearnedField from_checkpoint(const Checkpoint& checkpoint);

 private:
  PointSet raw(std::span<const double> times, const PointSet& x) const;

  Net net_;
  LossKind kind_;
  Schedule schedule_;
  double sigma_data_;
};

struct TrainConfig {
  ScheduleKind schedule = ScheduleKind::Linear;
  double stop_time = 0.99;
  std::size_t batch_size = 256;
  std::size_t iterations = 5000;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::vector<std::size_t> hidden_dims = {64, 64};
  Activation activation = Activation::SiLU;
  TimeFeatures time_features;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::Velocity;
  std::optional<double> sigma_data;  // estimated from data when unset
  double clip_grad_norm = 0.0;       // 0 disables clipping
  double ema_rate = 0.0;             // > 0: the result holds the EMA of the weights instead of the last iterate

  /// Throws ValidationError unless 0.5 < T < 1 and sizes are positive.
  void validate() const;
  NetSpec net_spec(std::size_t dim) const;
};

struct TrainResult {
  LearnedField field;
  Vec losses;
};

/// Training stopped on a non-finite loss; carries the log up to that point.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, Vec partial_log)
      : NumericError(what), partial_log_(std::move(partial_log)) {}
  const Vec& partial_log() const { return partial_log_; }

 private:
  Vec partial_log_;
};

/// Adam on fresh batches for config.iterations steps. The net is initialized
/// with derive_seed(seed, 0); batches come from derive_seed(seed, 1).
TrainResult train(const TrainConfig& config, const PointSet& data);

/// sqrt of the mean of |b_hat - b*|^2 over t ~ U[0, t_max] and x ~ X_t
/// (X0 ~ N(0, I), X1 from the oracle's target).
double velocity_oracle_error(const LearnedField& field, const OracleContext& ctx, double t_max, std::size_t probes,
                             std::uint64_t seed);

}  // namespace charflow
