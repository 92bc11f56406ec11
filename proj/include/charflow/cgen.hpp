#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "charflow/net.hpp"
#include "charflow/points.hpp"
#include "charflow/rng.hpp"
#include "charflow/sampler.hpp"
#include "charflow/schedule.hpp"
#include "charflow/velocity.hpp"

namespace charflow {

/// Field with one time per row.
using TimedField = std::function<PointSet(std::span<const double> times, const PointSet& x)>;

/// How the two-time network produces g(t, s, x).
///   ExponentialIntegrator: g = Phi(t,s) x + Psi(t,s) D_S(t,s,x), with
///     D_S = c_skip(t) x + c_out(t) F(features(t), features(s), c_in(t) x);
///     g(t,t,x) = x holds by construction.
///   Plain: g = F(features(t), features(s), x), the unconstrained map.
enum class Parameterization { ExponentialIntegrator, Plain };

Parameterization parse_parameterization(std::string_view name);
std::string_view to_string(Parameterization p);

/// Recorded forward pass of a student, consumed by StudentNet::backward.
struct StudentPass {
  Tape tape;
  Vec gain_x;  // dg/dx outside the network: Phi + Psi c_skip (EI) or 0 (plain)
  Vec gain_f;  // dg/dF: Psi c_out (EI) or 1 (plain)
  Vec in_scale;  // scale applied to x before the network
};

/// The characteristic generator.
class StudentNet {
 public:
  /// D_S supplied as a plain function of (t, s, x); has no parameters.
  using Direction = std::function<PointSet(std::span<const double> t, std::span<const double> s, const PointSet& x)>;

  StudentNet(Net net, Schedule schedule, double sigma_data, double stop_time,
             Parameterization parameterization = Parameterization::ExponentialIntegrator);
  static StudentNet from_function(Direction direction, std::size_t dim, Schedule schedule, double stop_time);

  const Net& net() const { return net_; }
  Net& net() { return net_; }
  const Schedule& schedule() const { return schedule_; }
  double sigma_data() const { return sigma_data_; }
  double stop_time() const { return stop_time_; }
  std::size_t dim() const { return dim_; }
  Parameterization parameterization() const { return parameterization_; }
  bool has_params() const { return !direction_; }

  /// g(t_i, s_i, x_i) per row. Requires 0 <= t_i <= s_i <= T.
  PointSet apply(std::span<const double> t, std::span<const double> s, const PointSet& x) const;
  PointSet apply(double t, double s, const PointSet& x) const;

  /// Same as apply, recording what backward needs. Only for network students.
  PointSet forward(std::span<const double> t, std::span<const double> s, const PointSet& x,
                   StudentPass& pass) const;
  /// Accumulates the parameter gradient of <upstream, g> into param_grad; when
  /// input_grad is non-null it receives d<upstream, g>/dx.
  void backward(const StudentPass& pass, const PointSet& upstream, std::span<double> param_grad,
                PointSet* input_grad = nullptr) const;

  /// Network calls made so far (one per batched evaluation).
  std::size_t evaluations() const { return evaluations_; }
  void reset_evaluations() const { evaluations_ = 0; }

  Checkpoint to_checkpoint() const;
  static StudentNet from_checkpoint(const Checkpoint& checkpoint);

 private:
  StudentNet() = default;
  void check_times(std::span<const double> t, std::span<const double> s, std::size_t rows) const;
  PointSet network_inputs(std::span<const double> t, std::span<const double> s, const PointSet& x,
                          StudentPass& pass) const;

  Net net_;
  Direction direction_;
  Schedule schedule_;
  double sigma_data_ = 1.0;
  double stop_time_ = 0.99;
  std::size_t dim_ = 0;
  Parameterization parameterization_ = Parameterization::ExponentialIntegrator;
  mutable std::size_t evaluations_ = 0;
};

/// Network spec for a student in R^dim: input 2 * features + dim, output dim.
NetSpec student_spec(std::size_t dim, std::vector<std::size_t> hidden_dims, Activation activation,
                     TimeFeatures features);

/// g(t, s, x) for a single point.
Vec g_apply(const StudentNet& student, double t, double s, std::span<const double> x);

struct PairIndex {
  std::size_t particle;
  std::size_t from;  // k
  std::size_t to;    // l
};

struct TripleIndex {
  std::size_t particle;
  std::size_t from;  // k
  std::size_t mid;   // j
  std::size_t to;    // l
};

/// Any two-time map (t_i, s_i, x_i) -> R^d, row by row.
using TwoTimeMap = std::function<PointSet(std::span<const double> t, std::span<const double> s, const PointSet& x)>;

/// The table Z_k^(i) -> Z_l^(i) read off stored trajectories. Rows must be
/// stored states at stored nodes; anything else is a ContractError.
TwoTimeMap trajectory_lookup(const TrajectoryBatch& corpus);

/// Loss values for an arbitrary map (no gradient).
double regression_loss_value(const TwoTimeMap& g, const TrajectoryBatch& corpus, std::span<const PairIndex> pairs);
double semigroup_penalty_value(const TwoTimeMap& g, const TrajectoryBatch& corpus,
                               std::span<const TripleIndex> triples);

/// Mean over pairs of w |Z_l - g(t_k, t_l, Z_k)|^2 with w = 1/2 on k = l.
LossResult regression_loss(const StudentNet& student, const TrajectoryBatch& corpus, std::span<const PairIndex> pairs);

/// Mean over triples of |g(t_k, t_l, Z_k) - g(t_j, t_l, Z_j)|^2, using the
/// stored Euler state Z_j = E_{k,j}(Z_k).
LossResult semigroup_penalty(const StudentNet& student, const TrajectoryBatch& corpus,
                             std::span<const TripleIndex> triples);

/// Denoiser matching on the diagonal slice D_S(t, t, .), in the same scaled
/// output space as denoiser_loss. Requires the EI parameterization.
LossResult local_loss(const StudentNet& student, const InterpolantBatch& batch);

/// Times for one long-range draw, ordered t <= u <= s <= T.
struct TimeTriple {
  double t;
  double u;
  double s;
};

/// Given t: s' ~ U[t, T], u' ~ U[s', T]; returns {t, u = s', s = u'}.
TimeTriple draw_time_triple(double t, double stop_time, Rng& rng);

/// First-order exponential integrator over [t_i, u_i] per row, `steps` equal substeps.
PointSet teacher_flow(const TimedField& denoiser, const Schedule& schedule, std::span<const double> t,
                      std::span<const double> u, const PointSet& x, std::size_t steps = 1);

/// mean |g_off(s,T) g(u,s) y - g_off(s,T) g_off(t,s) X_t|^2, y = reference(t, u, X_t).
/// Gradient flows only through the middle student factor.
LossResult global_loss_from_reference(const StudentNet& student, const StudentNet& offline, const PointSet& reference,
                                      std::span<const double> t, std::span<const TimeTriple> triples,
                                      const PointSet& xt);

/// global_loss_from_reference with the teacher's EI path as the reference.
LossResult global_loss(const StudentNet& student, const StudentNet& offline, const TimedField& teacher,
                       const InterpolantBatch& batch, std::span<const TimeTriple> triples,
                       std::size_t teacher_steps = 1);

/// g(u, s, g(t, u, x)) with u = (t + s) / 2; no gradient is recorded.
PointSet self_distill_reference(const StudentNet& student, std::span<const double> t, std::span<const double> s,
                                const PointSet& x);
Vec self_distill_reference(const StudentNet& student, double t, double s, std::span<const double> x);

enum class CgMode { Regression, Practical, SelfDistill };

CgMode parse_cg_mode(std::string_view name);
std::string_view to_string(CgMode mode);

struct CgTrainConfig {
  CgMode mode = CgMode::Regression;
  ScheduleKind schedule = ScheduleKind::Follmer;
  Parameterization parameterization = Parameterization::ExponentialIntegrator;
  double lambda_local = 1.0;
  double lambda_semigroup = 0.1;
  double ema_rate = 0.999;
  std::size_t iterations = 4000;
  std::size_t batch_size = 64;
  std::size_t pairs_per_particle = 8;
  bool full_pairs = false;
  std::size_t teacher_steps = 1;
  double stop_time = 0.99;
  std::vector<std::size_t> hidden_dims = {64, 64};
  Activation activation = Activation::SiLU;
  TimeFeatures time_features;
  double lr = 1e-3;
  double clip_grad_norm = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CgInputs {
  const TrajectoryBatch* corpus = nullptr;  // Regression
  const PointSet* data = nullptr;           // Practical, SelfDistill
  const LearnedField* teacher = nullptr;    // Practical
};

struct CgResult {
  StudentNet student;
  Vec losses;
};

/// Uniform draw from {(k, l) : 0 <= k <= l <= K}.
PairIndex draw_pair(std::size_t particle, std::size_t steps, Rng& rng);
/// Uniform draw from {(k, j, l) : 0 <= k <= j <= l <= K}.
TripleIndex draw_triple(std::size_t particle, std::size_t steps, Rng& rng);

/// Regression: regression_loss + lambda_semigroup * semigroup_penalty on the corpus.
/// Practical: lambda_local * local_loss + global_loss against the teacher, then EMA of the offline copy.
/// SelfDistill: as Practical with self_distill_reference in place of the teacher path.
CgResult train_cg(const CgTrainConfig& config, const CgInputs& inputs);

/// One-step sampling: g(0, T, Z0) for Z0 = prior_draws(m, d, seed).
PointSet one_step(const StudentNet& student, std::size_t m, double stop_time, std::uint64_t seed);

/// Iterates Z <- g(t_{k-1}, t_k, Z) over nodes 0 = t_0 < ... < t_K.
PointSet multi_step(const StudentNet& student, std::span<const double> nodes, std::size_t m, std::uint64_t seed);

/// n + 1 uniform nodes on [0, T].
Vec uniform_nodes(double stop_time, std::size_t pieces);

}  // namespace charflow
