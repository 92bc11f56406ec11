#include "charflow/cgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "charflow/errors.hpp"

namespace charflow {

namespace {

constexpr double kTimeSlack = 1e-12;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void add_scaled(Vec& into, const Vec& from, double scale) {
  if (into.empty()) into.assign(from.size(), 0.0);
  for (std::size_t k = 0; k < from.size(); ++k) into[k] += scale * from[k];
}

}  // namespace

Parameterization parse_parameterization(std::string_view name) {
  if (name == "ei") return Parameterization::ExponentialIntegrator;
  if (name == "plain") return Parameterization::Plain;
  throw ParseError("unknown parameterization '" + std::string(name) + "' (expected ei | plain)");
}

std::string_view to_string(Parameterization p) { return p == Parameterization::Plain ? "plain" : "ei"; }

CgMode parse_cg_mode(std::string_view name) {
  if (name == "regression") return CgMode::Regression;
  if (name == "practical") return CgMode::Practical;
  if (name == "self_distill") return CgMode::SelfDistill;
  throw ParseError("unknown cg mode '" + std::string(name) + "' (expected regression | practical | self_distill)");
}

std::string_view to_string(CgMode mode) {
  switch (mode) {
    case CgMode::Regression: return "regression";
    case CgMode::Practical: return "practical";
    case CgMode::SelfDistill: return "self_distill";
  }
  return "?";
}

NetSpec student_spec(std::size_t dim, std::vector<std::size_t> hidden_dims, Activation activation,
                     TimeFeatures features) {
  return NetSpec{2 * features.width() + dim, std::move(hidden_dims), dim, activation, features};
}

StudentNet::StudentNet(Net net, Schedule schedule, double sigma_data, double stop_time,
                       Parameterization parameterization)
    : net_(std::move(net)),
      schedule_(schedule),
      sigma_data_(sigma_data),
      stop_time_(stop_time),
      dim_(net_.spec().output_dim),
      parameterization_(parameterization) {
  const NetSpec& spec = net_.spec();
  if (spec.input_dim != 2 * spec.time_features.width() + spec.output_dim)
    throw ContractError("StudentNet: input must be two time embeddings plus the state dimension");
  if (!(sigma_data_ > 0.0)) throw ValidationError("StudentNet: sigma_data must be positive");
  if (!(stop_time_ > 0.0 && stop_time_ < 1.0)) throw ValidationError("StudentNet: stop time must lie in (0, 1)");
}

StudentNet StudentNet::from_function(Direction direction, std::size_t dim, Schedule schedule, double stop_time) {
  StudentNet student;
  student.direction_ = std::move(direction);
  student.schedule_ = schedule;
  student.stop_time_ = stop_time;
  student.dim_ = dim;
  return student;
}

void StudentNet::check_times(std::span<const double> t, std::span<const double> s, std::size_t rows) const {
  if (t.size() != rows || s.size() != rows) throw ContractError("StudentNet: one (t, s) pair per row required");
  for (std::size_t i = 0; i < rows; ++i) {
    if (t[i] > s[i]) throw ContractError("StudentNet: requires t <= s");
    if (t[i] < 0.0 || s[i] > stop_time_ + kTimeSlack) throw DomainError("StudentNet: times must lie in [0, T]");
  }
}

PointSet StudentNet::network_inputs(std::span<const double> t, std::span<const double> s, const PointSet& x,
                                    StudentPass& pass) const {
  const TimeFeatures& features = net_.spec().time_features;
  const std::size_t tw = features.width();
  const std::size_t rows = x.size();
  pass.gain_x.resize(rows);
  pass.gain_f.resize(rows);
  pass.in_scale.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (parameterization_ == Parameterization::Plain) {
      pass.gain_x[i] = 0.0;
      pass.gain_f[i] = 1.0;
      pass.in_scale[i] = 1.0;
    } else {
      const EiKernels kernels = schedule_.ei_coeffs(t[i], s[i]);
      const DenoiserScaling c = schedule_.denoiser_coeffs(t[i], sigma_data_);
      pass.gain_x[i] = kernels.phi + kernels.psi * c.c_skip;
      pass.gain_f[i] = kernels.psi * c.c_out;
      pass.in_scale[i] = c.c_in;
    }
  }
  PointSet inputs(rows, 2 * tw + x.dim());
  for (std::size_t i = 0; i < rows; ++i) {
    auto row = inputs.row(i);
    features.embed(t[i], row.subspan(0, tw));
    features.embed(s[i], row.subspan(tw, tw));
    for (std::size_t k = 0; k < x.dim(); ++k) row[2 * tw + k] = pass.in_scale[i] * x(i, k);
  }
  return inputs;
}

PointSet StudentNet::apply(std::span<const double> t, std::span<const double> s, const PointSet& x) const {
  if (x.dim() != dim_) throw ContractError("StudentNet::apply: dimension mismatch");
  check_times(t, s, x.size());
  ++evaluations_;
  if (direction_) {
    PointSet out = direction_(t, s, x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const EiKernels kernels = schedule_.ei_coeffs(t[i], s[i]);
      for (std::size_t k = 0; k < dim_; ++k) out(i, k) = kernels.phi * x(i, k) + kernels.psi * out(i, k);
    }
    return out;
  }
  StudentPass pass;
  PointSet out = net_.forward(network_inputs(t, s, x, pass));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t k = 0; k < dim_; ++k) out(i, k) = pass.gain_x[i] * x(i, k) + pass.gain_f[i] * out(i, k);
  return out;
}

PointSet StudentNet::apply(double t, double s, const PointSet& x) const {
  return apply(Vec(x.size(), t), Vec(x.size(), s), x);
}

PointSet StudentNet::forward(std::span<const double> t, std::span<const double> s, const PointSet& x,
                             StudentPass& pass) const {
  if (direction_) throw ContractError("StudentNet::forward: function students carry no parameters");
  if (x.dim() != dim_) throw ContractError("StudentNet::forward: dimension mismatch");
  check_times(t, s, x.size());
  ++evaluations_;
  PointSet out = net_.forward(network_inputs(t, s, x, pass), pass.tape);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t k = 0; k < dim_; ++k) out(i, k) = pass.gain_x[i] * x(i, k) + pass.gain_f[i] * out(i, k);
  return out;
}

void StudentNet::backward(const StudentPass& pass, const PointSet& upstream, std::span<double> param_grad,
                          PointSet* input_grad) const {
  const std::size_t rows = upstream.size();
  PointSet net_upstream(rows, dim_);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < dim_; ++k) net_upstream(i, k) = pass.gain_f[i] * upstream(i, k);
  if (input_grad == nullptr) {
    net_.backward(pass.tape, net_upstream, param_grad);
    return;
  }
  PointSet net_input_grad;
  net_.backward(pass.tape, net_upstream, param_grad, &net_input_grad);
  const std::size_t offset = 2 * net_.spec().time_features.width();
  *input_grad = PointSet(rows, dim_);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < dim_; ++k)
      (*input_grad)(i, k) = pass.gain_x[i] * upstream(i, k) + pass.in_scale[i] * net_input_grad(i, offset + k);
}

Checkpoint StudentNet::to_checkpoint() const {
  if (direction_) throw ContractError("StudentNet::to_checkpoint: function students cannot be serialized");
  Checkpoint checkpoint{net_, {}};
  checkpoint.metadata["role"] = "student";
  checkpoint.metadata["schedule"] = std::string(to_string(schedule_.kind()));
  checkpoint.metadata["sigma_data"] = format_double(sigma_data_);
  checkpoint.metadata["stop_time"] = format_double(stop_time_);
  checkpoint.metadata["parameterization"] = std::string(to_string(parameterization_));
  return checkpoint;
}

StudentNet StudentNet::from_checkpoint(const Checkpoint& checkpoint) {
  const auto get = [&](const std::string& key) {
    const auto it = checkpoint.metadata.find(key);
    if (it == checkpoint.metadata.end()) throw ParseError("student checkpoint: missing '" + key + "' entry");
    return it->second;
  };
  if (get("role") != "student") throw ParseError("checkpoint does not hold a student network");
  return StudentNet(checkpoint.net, Schedule(parse_schedule_kind(get("schedule"))), std::stod(get("sigma_data")),
                    std::stod(get("stop_time")), parse_parameterization(get("parameterization")));
}

Vec g_apply(const StudentNet& student, double t, double s, std::span<const double> x) {
  const PointSet out = student.apply(t, s, PointSet(1, x.size(), Vec(x.begin(), x.end())));
  return Vec(out.data().begin(), out.data().end());
}

TwoTimeMap trajectory_lookup(const TrajectoryBatch& corpus) {
  return [&corpus](std::span<const double> t, std::span<const double> s, const PointSet& x) {
    const TimeGrid& grid = corpus.grid();
    const auto node_of = [&](double time) {
      for (std::size_t k = 0; k <= grid.steps(); ++k)
        if (grid.node(k) == time) return k;
      throw ContractError("trajectory_lookup: time is not a grid node");
    };
    PointSet out(x.size(), x.dim());
    for (std::size_t r = 0; r < x.size(); ++r) {
      const std::size_t k = node_of(t[r]);
      const std::size_t l = node_of(s[r]);
      std::size_t hit = corpus.particles();
      for (std::size_t i = 0; i < corpus.particles() && hit == corpus.particles(); ++i) {
        const auto z = corpus.state(i, k);
        if (std::equal(z.begin(), z.end(), x.row(r).begin())) hit = i;
      }
      if (hit == corpus.particles()) throw ContractError("trajectory_lookup: state not in the corpus");
      const auto z = corpus.state(hit, l);
      std::copy(z.begin(), z.end(), out.row(r).begin());
    }
    return out;
  };
}

double regression_loss_value(const TwoTimeMap& g, const TrajectoryBatch& corpus, std::span<const PairIndex> pairs) {
  if (pairs.empty()) throw ContractError("regression_loss: empty pair set");
  const std::size_t n = pairs.size();
  Vec t(n), s(n);
  PointSet x(n, corpus.dim());
  for (std::size_t p = 0; p < n; ++p) {
    const PairIndex& pair = pairs[p];
    if (pair.particle >= corpus.particles() || pair.from > pair.to || pair.to > corpus.grid().steps())
      throw ContractError("regression_loss: pair index out of range");
    t[p] = corpus.grid().node(pair.from);
    s[p] = corpus.grid().node(pair.to);
    const auto from = corpus.state(pair.particle, pair.from);
    std::copy(from.begin(), from.end(), x.row(p).begin());
  }
  const PointSet out = g(t, s, x);
  double loss = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const double w = pairs[p].from == pairs[p].to ? 0.5 : 1.0;
    loss += w * squared_distance(out.row(p), corpus.state(pairs[p].particle, pairs[p].to));
  }
  return loss / static_cast<double>(n);
}

double semigroup_penalty_value(const TwoTimeMap& g, const TrajectoryBatch& corpus,
                               std::span<const TripleIndex> triples) {
  if (triples.empty()) throw ContractError("semigroup_penalty: empty triple set");
  const std::size_t n = triples.size();
  Vec t_long(n), t_short(n), s(n);
  PointSet x_long(n, corpus.dim()), x_short(n, corpus.dim());
  for (std::size_t p = 0; p < n; ++p) {
    const TripleIndex& tr = triples[p];
    if (tr.particle >= corpus.particles() || tr.from > tr.mid || tr.mid > tr.to || tr.to > corpus.grid().steps())
      throw ContractError("semigroup_penalty: triple must satisfy k <= j <= l <= K");
    t_long[p] = corpus.grid().node(tr.from);
    t_short[p] = corpus.grid().node(tr.mid);
    s[p] = corpus.grid().node(tr.to);
    const auto zk = corpus.state(tr.particle, tr.from);
    const auto zj = corpus.state(tr.particle, tr.mid);
    std::copy(zk.begin(), zk.end(), x_long.row(p).begin());
    std::copy(zj.begin(), zj.end(), x_short.row(p).begin());
  }
  const PointSet a = g(t_long, s, x_long);
  const PointSet b = g(t_short, s, x_short);
  double penalty = 0.0;
  for (std::size_t p = 0; p < n; ++p) penalty += squared_distance(a.row(p), b.row(p));
  return penalty / static_cast<double>(n);
}

LossResult regression_loss(const StudentNet& student, const TrajectoryBatch& corpus,
                           std::span<const PairIndex> pairs) {
  if (pairs.empty()) throw ContractError("regression_loss: empty pair set");
  const std::size_t n = pairs.size();
  const std::size_t d = corpus.dim();
  Vec t(n), s(n), weight(n);
  PointSet x(n, d), target(n, d);
  for (std::size_t p = 0; p < n; ++p) {
    const PairIndex& pair = pairs[p];
    if (pair.particle >= corpus.particles() || pair.from > pair.to || pair.to > corpus.grid().steps())
      throw ContractError("regression_loss: pair index out of range");
    t[p] = corpus.grid().node(pair.from);
    s[p] = corpus.grid().node(pair.to);
    weight[p] = pair.from == pair.to ? 0.5 : 1.0;
    const auto from = corpus.state(pair.particle, pair.from);
    const auto to = corpus.state(pair.particle, pair.to);
    std::copy(from.begin(), from.end(), x.row(p).begin());
    std::copy(to.begin(), to.end(), target.row(p).begin());
  }

  StudentPass pass;
  const PointSet out = student.has_params() ? student.forward(t, s, x, pass) : student.apply(t, s, x);
  const double inv_n = 1.0 / static_cast<double>(n);
  PointSet upstream(n, d);
  double loss = 0.0;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < d; ++k) {
      const double r = out(p, k) - target(p, k);
      loss += weight[p] * r * r;
      upstream(p, k) = 2.0 * weight[p] * r * inv_n;
    }
  LossResult result{loss * inv_n, Vec(student.has_params() ? student.net().params().size() : 0, 0.0)};
  if (!std::isfinite(result.loss)) throw NumericError("regression_loss: non-finite loss");
  if (student.has_params()) student.backward(pass, upstream, result.grad);
  return result;
}

LossResult semigroup_penalty(const StudentNet& student, const TrajectoryBatch& corpus,
                             std::span<const TripleIndex> triples) {
  if (triples.empty()) throw ContractError("semigroup_penalty: empty triple set");
  const std::size_t n = triples.size();
  const std::size_t d = corpus.dim();
  Vec t_long(n), t_short(n), s(n);
  PointSet x_long(n, d), x_short(n, d);
  for (std::size_t p = 0; p < n; ++p) {
    const TripleIndex& tr = triples[p];
    if (tr.particle >= corpus.particles() || tr.from > tr.mid || tr.mid > tr.to || tr.to > corpus.grid().steps())
      throw ContractError("semigroup_penalty: triple must satisfy k <= j <= l <= K");
    t_long[p] = corpus.grid().node(tr.from);
    t_short[p] = corpus.grid().node(tr.mid);
    s[p] = corpus.grid().node(tr.to);
    const auto zk = corpus.state(tr.particle, tr.from);
    const auto zj = corpus.state(tr.particle, tr.mid);
    std::copy(zk.begin(), zk.end(), x_long.row(p).begin());
    std::copy(zj.begin(), zj.end(), x_short.row(p).begin());
  }

  StudentPass pass_long, pass_short;
  const bool trainable = student.has_params();
  const PointSet a = trainable ? student.forward(t_long, s, x_long, pass_long) : student.apply(t_long, s, x_long);
  const PointSet b = trainable ? student.forward(t_short, s, x_short, pass_short) : student.apply(t_short, s, x_short);
  const double inv_n = 1.0 / static_cast<double>(n);
  PointSet up_a(n, d), up_b(n, d);
  double penalty = 0.0;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t k = 0; k < d; ++k) {
      const double r = a(p, k) - b(p, k);
      penalty += r * r;
      up_a(p, k) = 2.0 * r * inv_n;
      up_b(p, k) = -2.0 * r * inv_n;
    }
  LossResult result{penalty * inv_n, Vec(trainable ? student.net().params().size() : 0, 0.0)};
  if (!std::isfinite(result.loss)) throw NumericError("semigroup_penalty: non-finite penalty");
  if (trainable) {
    student.backward(pass_long, up_a, result.grad);
    student.backward(pass_short, up_b, result.grad);
  }
  return result;
}

LossResult local_loss(const StudentNet& student, const InterpolantBatch& batch) {
  if (batch.size() == 0) throw ContractError("local_loss: empty batch");
  if (student.parameterization() != Parameterization::ExponentialIntegrator)
    throw ContractError("local_loss: needs the exponential-integrator parameterization");
  if (batch.dim() != student.dim()) throw ContractError("local_loss: dimension mismatch");
  const std::size_t n = batch.size();
  const std::size_t d = batch.dim();
  const double inv_n = 1.0 / static_cast<double>(n);

  if (!student.has_params()) throw ContractError("local_loss: function students have no network to fit");

  const Net& net = student.net();
  const TimeFeatures& features = net.spec().time_features;
  const std::size_t tw = features.width();
  PointSet inputs(n, 2 * tw + d);
  PointSet f_target(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const DenoiserScaling c = student.schedule().denoiser_coeffs(batch.times[i], student.sigma_data());
    auto row = inputs.row(i);
    features.embed(batch.times[i], row.subspan(0, tw));
    features.embed(batch.times[i], row.subspan(tw, tw));
    for (std::size_t k = 0; k < d; ++k) {
      row[2 * tw + k] = c.c_in * batch.xt(i, k);
      f_target(i, k) = (batch.x1(i, k) - c.c_skip * batch.xt(i, k)) / c.c_out;
    }
  }
  Tape tape;
  const PointSet f_pred = net.forward(inputs, tape);
  PointSet upstream(n, d);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double r = f_pred(i, k) - f_target(i, k);
      loss += r * r;
      upstream(i, k) = 2.0 * r * inv_n;
    }
  LossResult result{loss * inv_n, Vec(net.params().size(), 0.0)};
  if (!std::isfinite(result.loss)) throw NumericError("local_loss: non-finite loss");
  net.backward(tape, upstream, result.grad);
  return result;
}

TimeTriple draw_time_triple(double t, double stop_time, Rng& rng) {
  if (!(t >= 0.0 && t <= stop_time)) throw DomainError("draw_time_triple: requires 0 <= t <= T");
  const double first = rng.uniform(t, stop_time);
  const double second = rng.uniform(first, stop_time);
  return {t, first, second};
}

PointSet teacher_flow(const TimedField& denoiser, const Schedule& schedule, std::span<const double> t,
                      std::span<const double> u, const PointSet& x, std::size_t steps) {
  if (steps == 0) throw ContractError("teacher_flow: need at least one step");
  if (t.size() != x.size() || u.size() != x.size()) throw ContractError("teacher_flow: one (t, u) per row required");
  const std::size_t n = x.size();
  PointSet y = x;
  Vec from(n), to(n);
  for (std::size_t j = 0; j < steps; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      if (u[i] < t[i]) throw ContractError("teacher_flow: requires t <= u");
      const double width = u[i] - t[i];
      from[i] = t[i] + width * static_cast<double>(j) / static_cast<double>(steps);
      to[i] = j + 1 == steps ? u[i] : t[i] + width * static_cast<double>(j + 1) / static_cast<double>(steps);
    }
    const PointSet dn = denoiser(from, y);
    for (std::size_t i = 0; i < n; ++i) {
      const EiKernels kernels = schedule.ei_coeffs(from[i], to[i]);
      for (std::size_t k = 0; k < y.dim(); ++k) y(i, k) = kernels.phi * y(i, k) + kernels.psi * dn(i, k);
    }
  }
  return y;
}

LossResult global_loss_from_reference(const StudentNet& student, const StudentNet& offline, const PointSet& reference,
                                      std::span<const double> t, std::span<const TimeTriple> triples,
                                      const PointSet& xt) {
  const std::size_t n = xt.size();
  if (n == 0) throw ContractError("global_loss: empty batch");
  if (triples.size() != n || t.size() != n || reference.size() != n)
    throw ContractError("global_loss: one time triple and reference per row required");
  Vec u(n), s(n), end(n, student.stop_time());
  for (std::size_t i = 0; i < n; ++i) {
    if (!(t[i] <= triples[i].u && triples[i].u <= triples[i].s))
      throw ContractError("global_loss: requires t <= u <= s");
    u[i] = triples[i].u;
    s[i] = triples[i].s;
  }

  const PointSet target = offline.apply(s, end, offline.apply(t, s, xt));
  const bool trainable = student.has_params();
  StudentPass student_pass, offline_pass;
  PointSet middle = trainable ? student.forward(u, s, reference, student_pass) : student.apply(u, s, reference);
  const PointSet pred =
      trainable ? offline.forward(s, end, middle, offline_pass) : offline.apply(s, end, middle);

  const std::size_t d = xt.dim();
  const double inv_n = 1.0 / static_cast<double>(n);
  PointSet upstream(n, d);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) {
      const double r = pred(i, k) - target(i, k);
      loss += r * r;
      upstream(i, k) = 2.0 * r * inv_n;
    }
  LossResult result{loss * inv_n, Vec(trainable ? student.net().params().size() : 0, 0.0)};
  if (!std::isfinite(result.loss)) throw NumericError("global_loss: non-finite loss");
  if (trainable) {
    PointSet through_offline;
    offline.backward(offline_pass, upstream, {}, &through_offline);
    student.backward(student_pass, through_offline, result.grad);
  }
  return result;
}

LossResult global_loss(const StudentNet& student, const StudentNet& offline, const TimedField& teacher,
                       const InterpolantBatch& batch, std::span<const TimeTriple> triples, std::size_t teacher_steps) {
  if (!teacher) throw ContractError("global_loss: missing teacher");
  if (triples.size() != batch.size()) throw ContractError("global_loss: one time triple per row required");
  Vec u(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) u[i] = triples[i].u;
  const PointSet reference = teacher_flow(teacher, student.schedule(), batch.times, u, batch.xt, teacher_steps);
  return global_loss_from_reference(student, offline, reference, batch.times, triples, batch.xt);
}

PointSet self_distill_reference(const StudentNet& student, std::span<const double> t, std::span<const double> s,
                                const PointSet& x) {
  if (t.size() != x.size() || s.size() != x.size()) throw ContractError("self_distill_reference: one (t, s) per row");
  Vec mid(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (t[i] > s[i]) throw ContractError("self_distill_reference: requires t <= s");
    mid[i] = 0.5 * (t[i] + s[i]);
  }
  return student.apply(mid, s, student.apply(t, mid, x));
}

Vec self_distill_reference(const StudentNet& student, double t, double s, std::span<const double> x) {
  const PointSet out = self_distill_reference(student, Vec{t}, Vec{s}, PointSet(1, x.size(), Vec(x.begin(), x.end())));
  return Vec(out.data().begin(), out.data().end());
}

void CgTrainConfig::validate() const {
  if (lambda_local < 0.0 || lambda_semigroup < 0.0) throw ValidationError("cg: loss weights must be >= 0");
  if (!(ema_rate >= 0.0 && ema_rate <= 1.0)) throw ValidationError("cg: ema rate must lie in [0, 1]");
  if (batch_size == 0 || pairs_per_particle == 0) throw ValidationError("cg: batch size and pair count must be positive");
  if (teacher_steps == 0) throw ValidationError("cg: teacher_steps must be positive");
  if (!(stop_time > 0.0 && stop_time < 1.0)) throw ValidationError("cg: stop time must lie in (0, 1)");
  if (!(lr > 0.0)) throw ValidationError("cg: learning rate must be positive");
  if (mode != CgMode::Regression && parameterization != Parameterization::ExponentialIntegrator)
    throw ValidationError("cg: practical and self-distill training need the ei parameterization");
}

PairIndex draw_pair(std::size_t particle, std::size_t steps, Rng& rng) {
  const std::size_t n = steps + 1;
  std::uint64_t r = rng.below(n * (n + 1) / 2);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t row = n - k;
    if (r < row) return {particle, k, k + r};
    r -= row;
  }
  return {particle, steps, steps};
}

TripleIndex draw_triple(std::size_t particle, std::size_t steps, Rng& rng) {
  const std::size_t n = steps + 1;
  std::uint64_t r = rng.below(n * (n + 1) * (n + 2) / 6);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t rest = n - k;
    const std::size_t block = rest * (rest + 1) / 2;
    if (r >= block) {
      r -= block;
      continue;
    }
    for (std::size_t j = k; j < n; ++j) {
      const std::size_t row = n - j;
      if (r < row) return {particle, k, j, j + r};
      r -= row;
    }
  }
  return {particle, steps, steps, steps};
}

namespace {

CgResult train_regression(const CgTrainConfig& config, const TrajectoryBatch& corpus) {
  if (corpus.schedule() != config.schedule) throw ValidationError("train_cg: corpus schedule differs from config");
  const std::size_t d = corpus.dim();
  const std::size_t steps = corpus.grid().steps();
  const Schedule schedule(corpus.schedule());
  const double sigma_data = estimate_sigma_data(corpus.endpoints());
  StudentNet student(net_init(student_spec(d, config.hidden_dims, config.activation, config.time_features),
                              derive_seed(config.seed, 0)),
                     schedule, sigma_data, corpus.grid().stop_time(), config.parameterization);
  AdamState adam = AdamState::for_net(student.net(), config.lr);
  Rng rng(derive_seed(config.seed, 1));

  Vec losses;
  losses.reserve(config.iterations);
  std::vector<PairIndex> pairs;
  std::vector<TripleIndex> triples;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    pairs.clear();
    triples.clear();
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::size_t particle = rng.below(corpus.particles());
      if (config.full_pairs) {
        for (std::size_t k = 0; k <= steps; ++k)
          for (std::size_t l = k; l <= steps; ++l) {
            pairs.push_back({particle, k, l});
            if (config.lambda_semigroup > 0.0)
              for (std::size_t j = k; j <= l; ++j) triples.push_back({particle, k, j, l});
          }
        continue;
      }
      for (std::size_t p = 0; p < config.pairs_per_particle; ++p) pairs.push_back(draw_pair(particle, steps, rng));
      if (config.lambda_semigroup > 0.0)
        for (std::size_t p = 0; p < config.pairs_per_particle; ++p)
          triples.push_back(draw_triple(particle, steps, rng));
    }
    try {
      LossResult total = regression_loss(student, corpus, pairs);
      if (!triples.empty()) {
        const LossResult penalty = semigroup_penalty(student, corpus, triples);
        total.loss += config.lambda_semigroup * penalty.loss;
        add_scaled(total.grad, penalty.grad, config.lambda_semigroup);
      }
      if (config.clip_grad_norm > 0.0) clip_grad_norm(total.grad, config.clip_grad_norm);
      adam_step(adam, student.net(), total.grad);
      losses.push_back(total.loss);
    } catch (const NumericError& e) {
      throw TrainingDiverged("train_cg: diverged at iteration " + std::to_string(it) + ": " + e.what(), losses);
    }
  }
  return {std::move(student), std::move(losses)};
}

CgResult train_distill(const CgTrainConfig& config, const PointSet& data, const LearnedField* teacher) {
  const Schedule schedule(config.schedule);
  if (teacher && teacher->schedule().kind() != schedule.kind()) throw ValidationError("train_cg: teacher schedule differs from config");
  const std::size_t d = data.dim();
  const double sigma_data = estimate_sigma_data(data);
  StudentNet student(net_init(student_spec(d, config.hidden_dims, config.activation, config.time_features),
                              derive_seed(config.seed, 0)),
                     schedule, sigma_data, config.stop_time, config.parameterization);
  StudentNet offline = student;
  AdamState adam = AdamState::for_net(student.net(), config.lr);
  Rng rng(derive_seed(config.seed, 1));

  TimedField teacher_field;
  if (teacher) teacher_field = [teacher](std::span<const double> times, const PointSet& x) {
    return teacher->denoiser(times, x);
  };

  Vec losses;
  losses.reserve(config.iterations);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    const InterpolantBatch batch = draw_batch(data, schedule, config.stop_time, config.batch_size, rng);
    std::vector<TimeTriple> triples(batch.size());
    Vec u(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      triples[i] = draw_time_triple(batch.times[i], config.stop_time, rng);
      u[i] = triples[i].u;
    }
    try {
      LossResult total = local_loss(student, batch);
      total.loss *= config.lambda_local;
      for (double& g : total.grad) g *= config.lambda_local;
      const PointSet reference =
          teacher ? teacher_flow(teacher_field, schedule, batch.times, u, batch.xt, config.teacher_steps)
                  : self_distill_reference(student, batch.times, u, batch.xt);
      const LossResult global = global_loss_from_reference(student, offline, reference, batch.times, triples, batch.xt);
      total.loss += global.loss;
      add_scaled(total.grad, global.grad, 1.0);
      if (config.clip_grad_norm > 0.0) clip_grad_norm(total.grad, config.clip_grad_norm);
      adam_step(adam, student.net(), total.grad);
      ema_update(offline.net(), student.net(), config.ema_rate);
      losses.push_back(total.loss);
    } catch (const NumericError& e) {
      throw TrainingDiverged("train_cg: diverged at iteration " + std::to_string(it) + ": " + e.what(), losses);
    }
  }
  return {std::move(student), std::move(losses)};
}

}  // namespace

CgResult train_cg(const CgTrainConfig& config, const CgInputs& inputs) {
  config.validate();
  switch (config.mode) {
    case CgMode::Regression:
      if (!inputs.corpus) throw ContractError("train_cg: regression mode needs a trajectory corpus");
      return train_regression(config, *inputs.corpus);
    case CgMode::Practical:
      if (!inputs.teacher) throw ContractError("train_cg: practical mode needs a teacher");
      if (!inputs.data || inputs.data->empty()) throw ContractError("train_cg: practical mode needs data");
      return train_distill(config, *inputs.data, inputs.teacher);
    case CgMode::SelfDistill:
      if (inputs.teacher) throw ContractError("train_cg: self-distillation takes no teacher");
      if (!inputs.data || inputs.data->empty()) throw ContractError("train_cg: self-distillation needs data");
      return train_distill(config, *inputs.data, nullptr);
  }
  throw ContractError("train_cg: unknown mode");
}

PointSet one_step(const StudentNet& student, std::size_t m, double stop_time, std::uint64_t seed) {
  if (m == 0) return PointSet(0, student.dim());
  return student.apply(0.0, stop_time, prior_draws(m, student.dim(), seed));
}

PointSet multi_step(const StudentNet& student, std::span<const double> nodes, std::size_t m, std::uint64_t seed) {
  if (nodes.size() < 2 || nodes.front() != 0.0) throw ContractError("multi_step: nodes must start at 0 and have length >= 2");
  for (std::size_t k = 1; k < nodes.size(); ++k)
    if (!(nodes[k] > nodes[k - 1])) throw ContractError("multi_step: nodes must be strictly increasing");
  if (m == 0) return PointSet(0, student.dim());
  PointSet state = prior_draws(m, student.dim(), seed);
  for (std::size_t k = 1; k < nodes.size(); ++k) state = student.apply(nodes[k - 1], nodes[k], state);
  return state;
}

Vec uniform_nodes(double stop_time, std::size_t pieces) {
  if (pieces == 0) throw ContractError("uniform_nodes: need at least one piece");
  Vec nodes(pieces + 1);
  for (std::size_t k = 0; k <= pieces; ++k)
    nodes[k] = k == pieces ? stop_time : stop_time * static_cast<double>(k) / static_cast<double>(pieces);
  return nodes;
}

}  // namespace charflow
