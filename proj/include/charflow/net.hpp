#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "charflow/points.hpp"

namespace charflow {

enum class Activation { ReLU, SiLU };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation activation);

/// How a scalar time enters a network: the raw value, or
/// [sin(2 pi k t), cos(2 pi k t)] for k = 1..frequencies.
struct TimeFeatures {
  enum class Kind { Raw, Fourier };
  Kind kind = Kind::Raw;
  std::size_t frequencies = 0;

  std::size_t width() const { return kind == Kind::Raw ? 1 : 2 * frequencies; }
  void embed(double t, std::span<double> out) const;

  /// "raw" or "fourier:<k>"
  static TimeFeatures parse(std::string_view text);
  std::string str() const;

  friend bool operator==(const TimeFeatures&, const TimeFeatures&) = default;
};

struct NetSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 1;
  Activation activation = Activation::SiLU;
  TimeFeatures time_features;

  /// Throws ValidationError if any width is zero.
  void validate() const;
  std::size_t param_count() const;
  std::size_t layer_count() const { return hidden_dims.size() + 1; }
  std::size_t layer_in(std::size_t layer) const;
  std::size_t layer_out(std::size_t layer) const;

  friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

/// Activations recorded by a forward pass, feature-major (features x batch).
struct Tape {
  std::size_t batch = 0;
  std::vector<Vec> pre;   // pre-activations per layer
  std::vector<Vec> post;  // post[0] = input, post[l + 1] = output of layer l
};

/// Fully-connected network. Parameters are layer-major: for each layer the
/// out x in weight matrix row by row, then its out biases.
///
/// Batched kernels accumulate in a fixed order, so a sample's output does not
/// depend on which other samples share its batch.
class Net {
 public:
  Net() = default;
  Net(NetSpec spec, Vec params);

  const NetSpec& spec() const { return spec_; }
  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }

  /// Offset of layer l's weights in params(); biases follow the weights.
  std::size_t weight_offset(std::size_t layer) const;

  Vec forward(std::span<const double> input) const;
  /// inputs: batch x input_dim; returns batch x output_dim.
  PointSet forward(const PointSet& inputs) const;
  PointSet forward(const PointSet& inputs, Tape& tape) const;

  /// Accumulates d<upstream, f>/d params into param_grad (skipped when the span
  /// is empty) and, when input_grad is non-null, writes d<upstream, f>/d input
  /// (batch x input_dim).
  void backward(const Tape& tape, const PointSet& upstream, std::span<double> param_grad,
                PointSet* input_grad = nullptr) const;

  friend bool operator==(const Net&, const Net&) = default;

 private:
  NetSpec spec_;
  Vec params_;
};

/// Glorot-uniform weights, zero biases; deterministic in seed.
Net net_init(const NetSpec& spec, std::uint64_t seed);

Vec net_forward(const Net& net, std::span<const double> input);

struct NetGradient {
  Vec params;
  Vec input;
};

/// Exact gradients of <upstream, net(input)>.
NetGradient net_grad(const Net& net, std::span<const double> input, std::span<const double> upstream);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  Vec m;
  Vec v;

  static AdamState for_net(const Net& net, double lr);
};

/// Bias-corrected Adam update. Non-finite gradient entries raise NumericError
/// and leave both state and net untouched.
void adam_step(AdamState& state, Net& net, std::span<const double> grad);

/// ema <- rate * ema + (1 - rate) * live.
void ema_update(Net& ema, const Net& live, double rate);

/// Rescales grad in place so that its l2 norm is at most max_norm; returns the original norm.
double clip_grad_norm(std::span<double> grad, double max_norm);

/// Product over layers of a power-iteration estimate of each weight matrix's
/// spectral norm, times the activation's Lipschitz constant per hidden layer.
double lipschitz_upper_bound(const Net& net, std::size_t iterations = 100);

/// Checkpoint: text header (magic line, key=value lines, "params=<n>") followed
/// by n little-endian float64 values. Extra metadata keys are preserved.
struct Checkpoint {
  Net net;
  std::map<std::string, std::string> metadata;
};

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint, std::string_view provenance = {});
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint, std::string_view provenance = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace charflow
