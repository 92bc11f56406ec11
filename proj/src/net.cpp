#include "charflow/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "charflow/errors.hpp"
#include "charflow/rng.hpp"

namespace charflow {

namespace {

constexpr std::string_view kNetMagic = "CHARFLOW-NET 1";

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double activate(Activation a, double z) {
  return a == Activation::ReLU ? (z > 0.0 ? z : 0.0) : z * sigmoid(z);
}

double activate_grad(Activation a, double z) {
  if (a == Activation::ReLU) return z > 0.0 ? 1.0 : 0.0;
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

std::string join_dims(const std::vector<std::size_t>& dims) {
  std::string out;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(dims[i]);
  }
  return out;
}

std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> dims;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) dims.push_back(std::stoul(item));
  return dims;
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::ReLU;
  if (name == "silu") return Activation::SiLU;
  throw ParseError("unknown activation '" + std::string(name) + "' (expected relu | silu)");
}

std::string_view to_string(Activation activation) { return activation == Activation::ReLU ? "relu" : "silu"; }

void TimeFeatures::embed(double t, std::span<double> out) const {
  if (kind == Kind::Raw) {
    out[0] = t;
    return;
  }
  for (std::size_t k = 1; k <= frequencies; ++k) {
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(k) * t;
    out[2 * (k - 1)] = std::sin(phase);
    out[2 * (k - 1) + 1] = std::cos(phase);
  }
}

TimeFeatures TimeFeatures::parse(std::string_view text) {
  if (text == "raw") return {};
  constexpr std::string_view prefix = "fourier:";
  if (text.starts_with(prefix)) {
    const std::string count(text.substr(prefix.size()));
    std::size_t used = 0;
    long k = -1;
    try {
      k = std::stol(count, &used);
    } catch (const std::exception&) {
    }
    if (used == count.size() && k >= 1) return {Kind::Fourier, static_cast<std::size_t>(k)};
  }
  throw ParseError("invalid time features '" + std::string(text) + "' (expected raw | fourier:<k>, k >= 1)");
}

std::string TimeFeatures::str() const {
  return kind == Kind::Raw ? "raw" : "fourier:" + std::to_string(frequencies);
}

void NetSpec::validate() const {
  if (input_dim == 0 || output_dim == 0) throw ValidationError("NetSpec: input and output dims must be >= 1");
  for (std::size_t h : hidden_dims)
    if (h == 0) throw ValidationError("NetSpec: hidden dims must be >= 1");
  if (time_features.kind == TimeFeatures::Kind::Fourier && time_features.frequencies == 0)
    throw ValidationError("NetSpec: Fourier time features need k >= 1");
}

std::size_t NetSpec::layer_in(std::size_t layer) const { return layer == 0 ? input_dim : hidden_dims[layer - 1]; }

std::size_t NetSpec::layer_out(std::size_t layer) const {
  return layer == hidden_dims.size() ? output_dim : hidden_dims[layer];
}

std::size_t NetSpec::param_count() const {
  std::size_t total = 0;
  for (std::size_t l = 0; l < layer_count(); ++l) total += layer_out(l) * (layer_in(l) + 1);
  return total;
}

Net::Net(NetSpec spec, Vec params) : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  if (params_.size() != spec_.param_count())
    throw ContractError("Net: parameter vector has " + std::to_string(params_.size()) + " entries, spec needs " +
                        std::to_string(spec_.param_count()));
}

std::size_t Net::weight_offset(std::size_t layer) const {
  std::size_t offset = 0;
  for (std::size_t l = 0; l < layer; ++l) offset += spec_.layer_out(l) * (spec_.layer_in(l) + 1);
  return offset;
}

Vec Net::forward(std::span<const double> input) const {
  PointSet in(1, input.size(), Vec(input.begin(), input.end()));
  const PointSet out = forward(in);
  return Vec(out.data().begin(), out.data().end());
}

PointSet Net::forward(const PointSet& inputs) const {
  Tape tape;
  return forward(inputs, tape);
}

PointSet Net::forward(const PointSet& inputs, Tape& tape) const {
  if (inputs.dim() != spec_.input_dim)
    throw ContractError("Net::forward: input has " + std::to_string(inputs.dim()) + " features, net expects " +
                        std::to_string(spec_.input_dim));
  const std::size_t batch = inputs.size();
  const std::size_t layers = spec_.layer_count();
  tape.batch = batch;
  tape.pre.resize(layers);
  tape.post.resize(layers + 1);

  Vec& x0 = tape.post[0];
  x0.assign(spec_.input_dim * batch, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < spec_.input_dim; ++f) x0[f * batch + b] = inputs(b, f);

  std::size_t offset = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t n_in = spec_.layer_in(l);
    const std::size_t n_out = spec_.layer_out(l);
    const double* w = params_.data() + offset;
    const double* bias = w + n_out * n_in;
    const Vec& a = tape.post[l];
    Vec& z = tape.pre[l];
    z.assign(n_out * batch, 0.0);
    for (std::size_t o = 0; o < n_out; ++o) {
      double* zrow = z.data() + o * batch;
      std::fill(zrow, zrow + batch, bias[o]);
      for (std::size_t i = 0; i < n_in; ++i) {
        const double wi = w[o * n_in + i];
        const double* arow = a.data() + i * batch;
        for (std::size_t b = 0; b < batch; ++b) zrow[b] += wi * arow[b];
      }
    }
    Vec& next = tape.post[l + 1];
    if (l + 1 < layers) {
      next.resize(z.size());
      for (std::size_t k = 0; k < z.size(); ++k) next[k] = activate(spec_.activation, z[k]);
    } else {
      next = z;
    }
    offset += n_out * (n_in + 1);
  }

  PointSet out(batch, spec_.output_dim);
  const Vec& y = tape.post[layers];
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < spec_.output_dim; ++o) out(b, o) = y[o * batch + b];
  return out;
}

void Net::backward(const Tape& tape, const PointSet& upstream, std::span<double> param_grad,
                   PointSet* input_grad) const {
  const std::size_t batch = tape.batch;
  const std::size_t layers = spec_.layer_count();
  if (upstream.size() != batch || upstream.dim() != spec_.output_dim)
    throw ContractError("Net::backward: upstream shape does not match the recorded batch");
  const bool want_params = !param_grad.empty();
  if (want_params && param_grad.size() != params_.size())
    throw ContractError("Net::backward: gradient buffer has the wrong length");

  Vec delta(spec_.output_dim * batch);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < spec_.output_dim; ++o) delta[o * batch + b] = upstream(b, o);

  Vec delta_prev;
  for (std::size_t l = layers; l-- > 0;) {
    const std::size_t n_in = spec_.layer_in(l);
    const std::size_t n_out = spec_.layer_out(l);
    const std::size_t offset = weight_offset(l);
    const double* w = params_.data() + offset;
    double* gw = want_params ? param_grad.data() + offset : nullptr;
    double* gb = want_params ? gw + n_out * n_in : nullptr;

    if (l + 1 < layers) {
      const Vec& z = tape.pre[l];
      for (std::size_t k = 0; k < delta.size(); ++k) delta[k] *= activate_grad(spec_.activation, z[k]);
    }

    const Vec& a = tape.post[l];
    for (std::size_t o = 0; want_params && o < n_out; ++o) {
      const double* drow = delta.data() + o * batch;
      double bias_acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) bias_acc += drow[b];
      gb[o] += bias_acc;
      for (std::size_t i = 0; i < n_in; ++i) {
        const double* arow = a.data() + i * batch;
        double acc = 0.0;
        for (std::size_t b = 0; b < batch; ++b) acc += drow[b] * arow[b];
        gw[o * n_in + i] += acc;
      }
    }

    if (l == 0 && input_grad == nullptr) break;
    delta_prev.assign(n_in * batch, 0.0);
    for (std::size_t o = 0; o < n_out; ++o) {
      const double* drow = delta.data() + o * batch;
      for (std::size_t i = 0; i < n_in; ++i) {
        const double wi = w[o * n_in + i];
        double* prow = delta_prev.data() + i * batch;
        for (std::size_t b = 0; b < batch; ++b) prow[b] += wi * drow[b];
      }
    }
    delta.swap(delta_prev);
  }

  if (input_grad != nullptr) {
    *input_grad = PointSet(batch, spec_.input_dim);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < spec_.input_dim; ++f) (*input_grad)(b, f) = delta[f * batch + b];
  }
}

Net net_init(const NetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Vec params(spec.param_count(), 0.0);
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t n_in = spec.layer_in(l);
    const std::size_t n_out = spec.layer_out(l);
    const double limit = std::sqrt(6.0 / static_cast<double>(n_in + n_out));
    for (std::size_t k = 0; k < n_out * n_in; ++k) params[offset + k] = rng.uniform(-limit, limit);
    offset += n_out * (n_in + 1);
  }
  return Net(spec, std::move(params));
}

Vec net_forward(const Net& net, std::span<const double> input) { return net.forward(input); }

NetGradient net_grad(const Net& net, std::span<const double> input, std::span<const double> upstream) {
  if (input.size() != net.spec().input_dim) throw ContractError("net_grad: input dimension mismatch");
  if (upstream.size() != net.spec().output_dim) throw ContractError("net_grad: upstream dimension mismatch");
  Tape tape;
  net.forward(PointSet(1, input.size(), Vec(input.begin(), input.end())), tape);
  NetGradient grad;
  grad.params.assign(net.params().size(), 0.0);
  PointSet input_grad;
  net.backward(tape, PointSet(1, upstream.size(), Vec(upstream.begin(), upstream.end())), grad.params, &input_grad);
  grad.input.assign(input_grad.data().begin(), input_grad.data().end());
  return grad;
}

AdamState AdamState::for_net(const Net& net, double lr) {
  AdamState state;
  state.lr = lr;
  state.m.assign(net.params().size(), 0.0);
  state.v.assign(net.params().size(), 0.0);
  return state;
}

void adam_step(AdamState& state, Net& net, std::span<const double> grad) {
  const std::size_t n = net.params().size();
  if (grad.size() != n) throw ContractError("adam_step: gradient length does not match parameters");
  if (state.m.size() != n || state.v.size() != n) throw ContractError("adam_step: optimizer state not sized for net");
  for (std::size_t k = 0; k < n; ++k)
    if (!std::isfinite(grad[k]))
      throw NumericError("adam_step: non-finite gradient at index " + std::to_string(k) + " (step " +
                         std::to_string(state.step) + ")");

  ++state.step;
  const double correction1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  std::span<double> params = net.params();
  for (std::size_t k = 0; k < n; ++k) {
    state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * grad[k];
    state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * grad[k] * grad[k];
    const double m_hat = state.m[k] / correction1;
    const double v_hat = state.v[k] / correction2;
    params[k] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

void ema_update(Net& ema, const Net& live, double rate) {
  if (!(ema.spec() == live.spec())) throw ContractError("ema_update: network specs differ");
  if (!(rate >= 0.0 && rate <= 1.0)) throw DomainError("ema_update: rate must lie in [0, 1]");
  std::span<double> target = ema.params();
  std::span<const double> source = live.params();
  for (std::size_t k = 0; k < target.size(); ++k) target[k] = rate * target[k] + (1.0 - rate) * source[k];
}

double clip_grad_norm(std::span<double> grad, double max_norm) {
  double norm2 = 0.0;
  for (double g : grad) norm2 += g * g;
  const double norm = std::sqrt(norm2);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& g : grad) g *= scale;
  }
  return norm;
}

double lipschitz_upper_bound(const Net& net, std::size_t iterations) {
  const NetSpec& spec = net.spec();
  // sup of the SiLU derivative, attained near z = 2.4
  const double act_lip = spec.activation == Activation::ReLU ? 1.0 : 1.0998;
  double bound = 1.0;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t n_in = spec.layer_in(l);
    const std::size_t n_out = spec.layer_out(l);
    const double* w = net.params().data() + net.weight_offset(l);
    Vec v(n_in, 1.0 / std::sqrt(static_cast<double>(n_in)));
    Vec u(n_out);
    double sigma = 0.0;
    for (std::size_t it = 0; it < iterations; ++it) {
      for (std::size_t o = 0; o < n_out; ++o) {
        u[o] = 0.0;
        for (std::size_t i = 0; i < n_in; ++i) u[o] += w[o * n_in + i] * v[i];
      }
      std::fill(v.begin(), v.end(), 0.0);
      for (std::size_t o = 0; o < n_out; ++o)
        for (std::size_t i = 0; i < n_in; ++i) v[i] += w[o * n_in + i] * u[o];
      const double norm = std::sqrt(dot(v, v));
      if (norm == 0.0) {
        sigma = 0.0;
        break;
      }
      sigma = std::sqrt(norm);
      for (double& vi : v) vi /= norm;
    }
    bound *= sigma;
    if (l + 1 < spec.layer_count()) bound *= act_lip;
  }
  return bound;
}

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint, std::string_view provenance) {
  const NetSpec& spec = checkpoint.net.spec();
  if (!provenance.empty()) out << provenance << '\n';
  out << kNetMagic << '\n';
  out << "input_dim=" << spec.input_dim << '\n';
  out << "hidden=" << join_dims(spec.hidden_dims) << '\n';
  out << "output_dim=" << spec.output_dim << '\n';
  out << "activation=" << to_string(spec.activation) << '\n';
  out << "time_features=" << spec.time_features.str() << '\n';
  for (const auto& [key, value] : checkpoint.metadata) out << key << '=' << value << '\n';
  const auto params = checkpoint.net.params();
  out << "params=" << params.size() << '\n';
  for (double p : params) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(p);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    char bytes[8];
    std::memcpy(bytes, &bits, 8);
    out.write(bytes, 8);
  }
  if (!out) throw std::runtime_error("write_checkpoint: stream failure");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  while (std::getline(in, line) && line.starts_with('#')) {
  }
  if (line != kNetMagic) throw ParseError("checkpoint: missing '" + std::string(kNetMagic) + "' header");

  NetSpec spec;
  Checkpoint checkpoint;
  std::size_t count = 0;
  bool have_params = false;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("checkpoint: malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "input_dim") spec.input_dim = std::stoul(value);
    else if (key == "hidden") spec.hidden_dims = parse_dims(value);
    else if (key == "output_dim") spec.output_dim = std::stoul(value);
    else if (key == "activation") spec.activation = parse_activation(value);
    else if (key == "time_features") spec.time_features = TimeFeatures::parse(value);
    else if (key == "params") {
      count = std::stoul(value);
      have_params = true;
      break;
    } else {
      checkpoint.metadata[key] = value;
    }
  }
  if (!have_params) throw ParseError("checkpoint: missing params line");
  Vec params(count);
  for (double& p : params) {
    char bytes[8];
    if (!in.read(bytes, 8)) throw ParseError("checkpoint: truncated parameter block");
    std::uint64_t bits = 0;
    std::memcpy(&bits, bytes, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    p = std::bit_cast<double>(bits);
  }
  checkpoint.net = Net(spec, std::move(params));
  return checkpoint;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint, std::string_view provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_checkpoint(out, checkpoint, provenance);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace charflow
