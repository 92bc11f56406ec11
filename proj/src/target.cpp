#include "charflow/target.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "charflow/errors.hpp"
#include "charflow/rng.hpp"

namespace charflow {

namespace {

constexpr double kSwissThetaMin = 1.5 * std::numbers::pi;
constexpr double kSwissThetaMax = 4.5 * std::numbers::pi;

struct SwissAffine {
  double center_x;
  double center_y;
  double scale;
};

// Bounding box of the noiseless spiral, fixed once so the rescale does not
// depend on the sample.
const SwissAffine& swiss_affine() {
  static const SwissAffine affine = [] {
    double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
    constexpr int kGrid = 200001;
    for (int i = 0; i < kGrid; ++i) {
      const double theta = kSwissThetaMin + (kSwissThetaMax - kSwissThetaMin) * i / (kGrid - 1);
      const double r = theta / kSwissThetaMax;
      const double x = r * std::cos(theta);
      const double y = r * std::sin(theta);
      min_x = std::min(min_x, x);
      max_x = std::max(max_x, x);
      min_y = std::min(min_y, y);
      max_y = std::max(max_y, y);
    }
    const double half = std::max(max_x - min_x, max_y - min_y) / 2.0;
    return SwissAffine{(min_x + max_x) / 2.0, (min_y + max_y) / 2.0, 1.0 / half};
  }();
  return affine;
}

}  // namespace

Frame::Frame(std::size_t ambient_dim, std::size_t intrinsic_dim, Vec entries)
    : rows_(ambient_dim), cols_(intrinsic_dim), entries_(std::move(entries)) {
  if (entries_.size() != rows_ * cols_) throw ValidationError("Frame: entry count does not match d x k");
  if (cols_ == 0 || cols_ > rows_) throw ValidationError("Frame: requires 1 <= k <= d");
}

Vec Frame::lift(std::span<const double> low) const {
  if (low.size() != cols_) throw ContractError("Frame::lift: dimension mismatch");
  Vec out(rows_, 0.0);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) out[i] += (*this)(i, j) * low[j];
  return out;
}

Vec Frame::project(std::span<const double> x) const {
  if (x.size() != rows_) throw ContractError("Frame::project: dimension mismatch");
  Vec out(cols_, 0.0);
  for (std::size_t j = 0; j < cols_; ++j)
    for (std::size_t i = 0; i < rows_; ++i) out[j] += (*this)(i, j) * x[i];
  return out;
}

double Frame::orthonormality_error() const {
  double worst = 0.0;
  for (std::size_t a = 0; a < cols_; ++a)
    for (std::size_t b = 0; b < cols_; ++b) {
      double g = 0.0;
      for (std::size_t i = 0; i < rows_; ++i) g += (*this)(i, a) * (*this)(i, b);
      worst = std::max(worst, std::abs(g - (a == b ? 1.0 : 0.0)));
    }
  return worst;
}

Frame Frame::axes(std::size_t ambient_dim, std::size_t intrinsic_dim) {
  Vec entries(ambient_dim * intrinsic_dim, 0.0);
  for (std::size_t j = 0; j < intrinsic_dim && j < ambient_dim; ++j) entries[j * intrinsic_dim + j] = 1.0;
  return Frame(ambient_dim, intrinsic_dim, std::move(entries));
}

std::string_view to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::AtomicMixture: return "mixture";
    case TargetKind::EmbeddedMixture: return "embedded";
    case TargetKind::SwissRoll: return "swiss_roll";
  }
  return "?";
}

TargetKind parse_target_kind(std::string_view name) {
  if (name == "mixture") return TargetKind::AtomicMixture;
  if (name == "embedded") return TargetKind::EmbeddedMixture;
  if (name == "swiss_roll") return TargetKind::SwissRoll;
  throw ParseError("unknown target kind '" + std::string(name) + "' (expected mixture | embedded | swiss_roll)");
}

std::size_t TargetSpec::dim() const { return kind == TargetKind::SwissRoll ? 2 : atoms.dim(); }

TargetSpec make_mixture(PointSet atoms, Vec weights, double sigma) {
  TargetSpec spec;
  spec.kind = TargetKind::AtomicMixture;
  spec.atoms = std::move(atoms);
  spec.weights = std::move(weights);
  spec.sigma = sigma;
  validate(spec);
  return spec;
}

TargetSpec make_swiss_roll(double noise) {
  TargetSpec spec;
  spec.kind = TargetKind::SwissRoll;
  spec.swiss_noise = noise;
  validate(spec);
  return spec;
}

void validate(const TargetSpec& spec) {
  if (spec.kind == TargetKind::SwissRoll) {
    if (!(spec.swiss_noise >= 0.0) || !std::isfinite(spec.swiss_noise))
      throw ValidationError("target: swiss_noise must be finite and >= 0");
    return;
  }
  if (spec.atoms.empty() || spec.atoms.dim() == 0) throw ValidationError("target: mixture needs at least one atom");
  if (spec.weights.size() != spec.atoms.size())
    throw ValidationError("target: weights and atoms differ in length");
  double total = 0.0;
  for (double w : spec.weights) {
    if (!(w >= 0.0)) throw ValidationError("target: weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ValidationError("target: weights must sum to 1");
  if (!(spec.sigma > 0.0) || !std::isfinite(spec.sigma)) throw ValidationError("target: sigma must be positive");
  if (!all_finite(spec.atoms.data())) throw ValidationError("target: atoms must be finite");

  if (spec.kind == TargetKind::EmbeddedMixture) {
    if (!spec.frame) throw ValidationError("target: embedded mixture requires a frame");
    const Frame& frame = *spec.frame;
    if (frame.orthonormality_error() > 1e-10) throw ValidationError("target: frame columns are not orthonormal");
    if (frame.ambient_dim() != spec.atoms.dim() || frame.intrinsic_dim() != spec.low_atoms.dim() ||
        spec.low_atoms.size() != spec.atoms.size())
      throw ValidationError("target: frame shape inconsistent with atoms");
  } else if (spec.frame) {
    throw ValidationError("target: frame given for a non-embedded mixture");
  }
}

bool atoms_in_unit_cube(const TargetSpec& spec) {
  const PointSet& atoms = spec.kind == TargetKind::EmbeddedMixture ? spec.low_atoms : spec.atoms;
  for (double v : atoms.data())
    if (v < 0.0 || v > 1.0) return false;
  return true;
}

TargetSpec embed_target(const TargetSpec& low, const Frame& frame) {
  if (low.kind != TargetKind::AtomicMixture) throw ValidationError("embed_target: source must be an atomic mixture");
  validate(low);
  if (frame.orthonormality_error() > 1e-10) throw ValidationError("embed_target: frame columns are not orthonormal");
  if (frame.intrinsic_dim() != low.atoms.dim()) throw ValidationError("embed_target: frame width != atom dimension");

  TargetSpec out;
  out.kind = TargetKind::EmbeddedMixture;
  out.weights = low.weights;
  out.sigma = low.sigma;
  out.frame = frame;
  out.low_atoms = low.atoms;
  out.atoms = PointSet(0, frame.ambient_dim());
  for (std::size_t j = 0; j < low.atoms.size(); ++j) out.atoms.push_back(frame.lift(low.atoms.row(j)));
  validate(out);
  return out;
}

PointSet sample_target(const TargetSpec& spec, std::size_t n, std::uint64_t seed) {
  validate(spec);
  Rng rng(seed);
  const std::size_t d = spec.dim();
  PointSet out(n, d);

  if (spec.kind == TargetKind::SwissRoll) {
    const SwissAffine& affine = swiss_affine();
    for (std::size_t i = 0; i < n; ++i) {
      const double theta = rng.uniform(kSwissThetaMin, kSwissThetaMax);
      const double r = theta / kSwissThetaMax;
      const double x = r * std::cos(theta) + spec.swiss_noise * rng.normal();
      const double y = r * std::sin(theta) + spec.swiss_noise * rng.normal();
      out(i, 0) = (x - affine.center_x) * affine.scale;
      out(i, 1) = (y - affine.center_y) * affine.scale;
    }
    return out;
  }

  Vec cumulative(spec.weights.size());
  double acc = 0.0;
  for (std::size_t j = 0; j < spec.weights.size(); ++j) cumulative[j] = (acc += spec.weights[j]);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * acc;
    std::size_t atom = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                                cumulative.begin());
    atom = std::min(atom, spec.weights.size() - 1);
    for (std::size_t k = 0; k < d; ++k) out(i, k) = spec.atoms(atom, k) + spec.sigma * rng.normal();
  }
  return out;
}

}  // namespace charflow
