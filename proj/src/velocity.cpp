#include "charflow/velocity.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include "charflow/target.hpp"

namespace charflow {

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

LossKind parse_loss_kind(std::string_view name) {
  if (name == "velocity") return LossKind::Velocity;
  if (name == "denoiser") return LossKind::Denoiser;
  throw ParseError("unknown loss '" + std::string(name) + "' (expected velocity | denoiser)");
}

std::string_view to_string(LossKind kind) { return kind == LossKind::Velocity ? "velocity" : "denoiser"; }

InterpolantBatch make_batch(const Schedule& schedule, Vec times, PointSet x0, PointSet x1) {
  if (x0.size() != times.size() || x1.size() != times.size() || x0.dim() != x1.dim())
    throw ContractError("make_batch: inconsistent row counts or dimensions");
  InterpolantBatch batch{schedule, std::move(times), std::move(x0), std::move(x1), {}, {}};
  const std::size_t m = batch.size();
  const std::size_t d = batch.x0.dim();
  batch.xt = PointSet(m, d);
  batch.target = PointSet(m, d);
  for (std::size_t i = 0; i < m; ++i) {
    const Coefficients c = schedule.coeffs(batch.times[i]);
    for (std::size_t k = 0; k < d; ++k) {
      batch.xt(i, k) = c.alpha * batch.x0(i, k) + c.beta * batch.x1(i, k);
      batch.target(i, k) = c.dalpha * batch.x0(i, k) + c.dbeta * batch.x1(i, k);
    }
  }
  return batch;
}

InterpolantBatch draw_batch(const PointSet& data, const Schedule& schedule, double stop_time, std::size_t m,
                            Rng& rng) {
  if (data.empty()) throw ContractError("draw_batch: empty data set");
  if (!(stop_time >= 0.0 && stop_time < 1.0)) throw DomainError("draw_batch: stop time must lie in [0, 1)");
  const std::size_t d = data.dim();
  Vec times(m);
  PointSet x0(m, d);
  PointSet x1(m, d);
  for (std::size_t i = 0; i < m; ++i) {
    times[i] = rng.uniform(0.0, stop_time);
    const std::size_t row = rng.below(data.size());
    for (std::size_t k = 0; k < d; ++k) x1(i, k) = data(row, k);
    for (std::size_t k = 0; k < d; ++k) x0(i, k) = rng.normal();
  }
  return make_batch(schedule, std::move(times), std::move(x0), std::move(x1));
}

InterpolantBatch draw_batch(const PointSet& data, const Schedule& schedule, double stop_time, std::size_t m,
                            std::uint64_t seed) {
  Rng rng(seed);
  return draw_batch(data, schedule, stop_time, m, rng);
}

PointSet time_conditioned_inputs(const TimeFeatures& features, std::span<const double> times, const PointSet& x,
                                 std::span<const double> scales) {
  if (times.size() != x.size()) throw ContractError("time_conditioned_inputs: times and points differ in count");
  const std::size_t tw = features.width();
  PointSet inputs(x.size(), tw + x.dim());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto row = inputs.row(i);
    features.embed(times[i], row.subspan(0, tw));
    const double scale = scales.empty() ? 1.0 : scales[i];
    for (std::size_t k = 0; k < x.dim(); ++k) row[tw + k] = scale * x(i, k);
  }
  return inputs;
}

LossResult velocity_loss(const Net& net, const InterpolantBatch& batch) {
  if (batch.size() == 0) throw ContractError("velocity_loss: empty batch");
  const NetSpec& spec = net.spec();
  if (spec.input_dim != spec.time_features.width() + batch.dim() || spec.output_dim != batch.dim())
    throw ContractError("velocity_loss: net shape does not match batch dimension");
  Tape tape;
  const PointSet out = net.forward(time_conditioned_inputs(spec.time_features, batch.times, batch.xt), tape);

  const double inv_m = 1.0 / static_cast<double>(batch.size());
  PointSet upstream(batch.size(), batch.dim());
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t k = 0; k < batch.dim(); ++k) {
      const double r = out(i, k) - batch.target(i, k);
      loss += r * r;
      upstream(i, k) = 2.0 * r * inv_m;
    }
  loss *= inv_m;
  if (!std::isfinite(loss)) throw NumericError("velocity_loss: non-finite loss");
  LossResult result{loss, Vec(net.params().size(), 0.0)};
  net.backward(tape, upstream, result.grad);
  return result;
}

LossResult denoiser_loss(const Net& net, const InterpolantBatch& batch, double sigma_data) {
  if (batch.size() == 0) throw ContractError("denoiser_loss: empty batch");
  const NetSpec& spec = net.spec();
  if (spec.input_dim != spec.time_features.width() + batch.dim() || spec.output_dim != batch.dim())
    throw ContractError("denoiser_loss: net shape does not match batch dimension");

  const std::size_t m = batch.size();
  const std::size_t d = batch.dim();
  Vec noise(m);
  Vec c_in(m);
  PointSet f_target(m, d);
  for (std::size_t i = 0; i < m; ++i) {
    const DenoiserScaling c = batch.schedule.denoiser_coeffs(batch.times[i], sigma_data);
    noise[i] = c.c_noise;
    c_in[i] = c.c_in;
    for (std::size_t k = 0; k < d; ++k) f_target(i, k) = (batch.x1(i, k) - c.c_skip * batch.xt(i, k)) / c.c_out;
  }
  Tape tape;
  const PointSet out = net.forward(time_conditioned_inputs(spec.time_features, noise, batch.xt, c_in), tape);

  const double inv_m = 1.0 / static_cast<double>(m);
  PointSet upstream(m, d);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double r = out(i, k) - f_target(i, k);
      loss += r * r;
      upstream(i, k) = 2.0 * r * inv_m;
    }
  loss *= inv_m;
  if (!std::isfinite(loss)) throw NumericError("denoiser_loss: non-finite loss");
  LossResult result{loss, Vec(net.params().size(), 0.0)};
  net.backward(tape, upstream, result.grad);
  return result;
}

Vec velocity_from_denoiser(const PointField& denoiser, const Schedule& schedule, double t,
                           std::span<const double> x) {
  const double rate = schedule.log_rate(t);
  const double gain = schedule.denoiser_gain(t);
  Vec out = denoiser(t, x);
  if (out.size() != x.size()) throw ContractError("velocity_from_denoiser: denoiser output dimension mismatch");
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = rate * x[k] + gain * out[k];
  return out;
}

Vec denoiser_from_velocity(const PointField& velocity, const Schedule& schedule, double t,
                           std::span<const double> x) {
  const double rate = schedule.log_rate(t);
  const double gain = schedule.denoiser_gain(t);
  Vec out = velocity(t, x);
  if (out.size() != x.size()) throw ContractError("denoiser_from_velocity: velocity output dimension mismatch");
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = (out[k] - rate * x[k]) / gain;
  return out;
}

double estimate_sigma_data(const PointSet& data) {
  if (data.size() < 2) throw ContractError("estimate_sigma_data: need at least two points");
  const Vec std_dev = column_std(data);
  double total = 0.0;
  for (double s : std_dev) total += s;
  return total / static_cast<double>(std_dev.size());
}

LearnedField::LearnedField(Net net, LossKind kind, Schedule schedule, double sigma_data)
    : net_(std::move(net)), kind_(kind), schedule_(schedule), sigma_data_(sigma_data) {
  const NetSpec& spec = net_.spec();
  if (spec.input_dim != spec.time_features.width() + spec.output_dim)
    throw ContractError("LearnedField: net input must be time features + output dimension");
  if (kind_ == LossKind::Denoiser && !(sigma_data_ > 0.0))
    throw ValidationError("LearnedField: denoiser needs a positive sigma_data");
}

PointSet LearnedField::raw(std::span<const double> times, const PointSet& x) const {
  if (kind_ == LossKind::Velocity) return net_.forward(time_conditioned_inputs(net_.spec().time_features, times, x));
  Vec noise(x.size());
  Vec c_in(x.size());
  Vec c_skip(x.size());
  Vec c_out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const DenoiserScaling c = schedule_.denoiser_coeffs(times[i], sigma_data_);
    noise[i] = c.c_noise;
    c_in[i] = c.c_in;
    c_skip[i] = c.c_skip;
    c_out[i] = c.c_out;
  }
  PointSet out = net_.forward(time_conditioned_inputs(net_.spec().time_features, noise, x, c_in));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t k = 0; k < x.dim(); ++k) out(i, k) = c_skip[i] * x(i, k) + c_out[i] * out(i, k);
  return out;
}

PointSet LearnedField::velocity(std::span<const double> times, const PointSet& x) const {
  PointSet out = raw(times, x);
  if (kind_ == LossKind::Velocity) return out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double rate = schedule_.log_rate(times[i]);
    const double gain = schedule_.denoiser_gain(times[i]);
    for (std::size_t k = 0; k < x.dim(); ++k) out(i, k) = rate * x(i, k) + gain * out(i, k);
  }
  return out;
}

PointSet LearnedField::denoiser(std::span<const double> times, const PointSet& x) const {
  PointSet out = raw(times, x);
  if (kind_ == LossKind::Denoiser) return out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double rate = schedule_.log_rate(times[i]);
    const double gain = schedule_.denoiser_gain(times[i]);
    for (std::size_t k = 0; k < x.dim(); ++k) out(i, k) = (out(i, k) - rate * x(i, k)) / gain;
  }
  return out;
}

PointSet LearnedField::velocity(double t, const PointSet& x) const { return velocity(Vec(x.size(), t), x); }

PointSet LearnedField::denoiser(double t, const PointSet& x) const { return denoiser(Vec(x.size(), t), x); }

Checkpoint LearnedField::to_checkpoint() const {
  Checkpoint checkpoint{net_, {}};
  checkpoint.metadata["role"] = std::string(to_string(kind_));
  checkpoint.metadata["schedule"] = std::string(to_string(schedule_.kind()));
  checkpoint.metadata["sigma_data"] = format_double(sigma_data_);
  return checkpoint;
}

LearnedField LearnedField::from_checkpoint(const Checkpoint& checkpoint) {
  const auto get = [&](const std::string& key) {
    const auto it = checkpoint.metadata.find(key);
    if (it == checkpoint.metadata.end()) throw ParseError("checkpoint: missing '" + key + "' entry");
    return it->second;
  };
  return LearnedField(checkpoint.net, parse_loss_kind(get("role")), Schedule(parse_schedule_kind(get("schedule"))),
                      std::stod(get("sigma_data")));
}

void TrainConfig::validate() const {
  if (!(stop_time > 0.5 && stop_time < 1.0)) throw ValidationError("train: stop time must lie in (0.5, 1)");
  if (batch_size == 0) throw ValidationError("train: batch size must be positive");
  if (!(lr > 0.0)) throw ValidationError("train: learning rate must be positive");
  if (sigma_data && !(*sigma_data > 0.0)) throw ValidationError("train: sigma_data must be positive");
  if (clip_grad_norm < 0.0) throw ValidationError("train: clip_grad_norm must be >= 0");
  if (!(ema_rate >= 0.0 && ema_rate < 1.0)) throw ValidationError("train: ema_rate must lie in [0, 1)");
}

NetSpec TrainConfig::net_spec(std::size_t dim) const {
  return NetSpec{time_features.width() + dim, hidden_dims, dim, activation, time_features};
}

TrainResult train(const TrainConfig& config, const PointSet& data) {
  config.validate();
  if (data.empty()) throw ContractError("train: empty data set");
  const Schedule schedule(config.schedule);
  const double sigma_data = config.sigma_data ? *config.sigma_data : estimate_sigma_data(data);

  Net net = net_init(config.net_spec(data.dim()), derive_seed(config.seed, 0));
  AdamState adam = AdamState::for_net(net, config.lr);
  adam.beta1 = config.beta1;
  adam.beta2 = config.beta2;
  Rng rng(derive_seed(config.seed, 1));
  Net average = net;

  Vec losses;
  losses.reserve(config.iterations);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const InterpolantBatch batch = draw_batch(data, schedule, config.stop_time, config.batch_size, rng);
    LossResult step;
    try {
      step = config.loss == LossKind::Velocity ? velocity_loss(net, batch) : denoiser_loss(net, batch, sigma_data);
      if (config.clip_grad_norm > 0.0) clip_grad_norm(step.grad, config.clip_grad_norm);
      adam_step(adam, net, step.grad);
      if (config.ema_rate > 0.0) ema_update(average, net, config.ema_rate);
    } catch (const NumericError& e) {
      throw TrainingDiverged("train: diverged at iteration " + std::to_string(it) + ": " + e.what(), losses);
    }
    losses.push_back(step.loss);
  }
  if (config.ema_rate > 0.0) net = std::move(average);
  return {LearnedField(std::move(net), config.loss, schedule, sigma_data), std::move(losses)};
}

double velocity_oracle_error(const LearnedField& field, const OracleContext& ctx, double t_max, std::size_t probes,
                             std::uint64_t seed) {
  if (probes == 0) throw ContractError("velocity_oracle_error: need at least one probe");
  const PointSet x1 = sample_target(ctx.spec(), probes, derive_seed(seed, 1));
  Rng rng(derive_seed(seed, 0));
  const std::size_t d = x1.dim();
  Vec times(probes);
  PointSet x0(probes, d);
  for (std::size_t i = 0; i < probes; ++i) {
    times[i] = rng.uniform(0.0, t_max);
    for (std::size_t k = 0; k < d; ++k) x0(i, k) = rng.normal();
  }
  const InterpolantBatch probe = make_batch(ctx.schedule(), times, x0, x1);
  const PointSet predicted = field.velocity(probe.times, probe.xt);
  double total = 0.0;
  for (std::size_t i = 0; i < probes; ++i) {
    const Vec exact = velocity_exact(ctx, probe.times[i], probe.xt.row(i));
    total += squared_distance(predicted.row(i), exact);
  }
  return std::sqrt(total / static_cast<double>(probes));
}

}  // namespace charflow
