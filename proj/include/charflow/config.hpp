#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "charflow/cgen.hpp"
#include "charflow/net.hpp"
#include "charflow/sampler.hpp"
#include "charflow/schedule.hpp"
#include "charflow/target.hpp"
#include "charflow/velocity.hpp"

namespace charflow {

/// Run configuration. Text form is INI style:
///
///   # comment
///   [section]
///   key = value
///
/// Lists are comma separated; atom and frame matrices separate rows with ';'.
/// Every key is optional and unknown sections or keys are rejected. The
/// defaults below are the documented ones.
struct RunConfig {
  struct Run {
    std::uint64_t seed = 0;
    std::string out = "charflow-out";
    friend bool operator==(const Run&, const Run&) = default;
  } run;

  struct Target {
    TargetKind kind = TargetKind::SwissRoll;
    std::vector<Vec> atoms;  // low-dimensional for the embedded kind
    Vec weights;             // empty: uniform
    double sigma = 0.5;
    std::vector<Vec> frame;  // embedded kind; empty: first standard axes of R^ambient_dim
    std::size_t ambient_dim = 3;
    double swiss_noise = 0.05;
    std::size_t n_data = 8192;
    std::size_t n_holdout = 2048;
    friend bool operator==(const Target&, const Target&) = default;
  } target;

  struct ScheduleSection {
    ScheduleKind kind = ScheduleKind::Follmer;
    /// 0.99 for the Swiss roll, otherwise default_stop_time(kind), when left out.
    double stop_time = 0.99;
    friend bool operator==(const ScheduleSection&, const ScheduleSection&) = default;
  } schedule;

  struct Velocity {
    LossKind loss = LossKind::Denoiser;
    std::vector<std::size_t> hidden = {64, 64};
    Activation activation = Activation::SiLU;
    TimeFeatures time_features;
    std::size_t iterations = 5000;
    std::size_t batch_size = 256;
    double lr = 1e-3;
    double clip_grad_norm = 0.0;
    friend bool operator==(const Velocity&, const Velocity&) = default;
  } velocity;

  struct Trajectories {
    SamplerKind sampler = SamplerKind::Euler;
    std::size_t steps = 100;
    std::size_t particles = 2048;
    friend bool operator==(const Trajectories&, const Trajectories&) = default;
  } trajectories;

  struct Cg {
    CgMode mode = CgMode::Regression;
    Parameterization parameterization = Parameterization::ExponentialIntegrator;
    double lambda_local = 1.0;
    double lambda_semigroup = 0.1;
    double ema_rate = 0.999;
    std::size_t iterations = 4000;
    std::size_t batch_size = 64;
    std::size_t pairs_per_particle = 8;
    bool full_pairs = false;
    std::size_t teacher_steps = 1;
    std::vector<std::size_t> hidden = {64, 64};
    Activation activation = Activation::SiLU;
    TimeFeatures time_features;
    double lr = 1e-3;
    double clip_grad_norm = 0.0;
    friend bool operator==(const Cg&, const Cg&) = default;
  } cg;

  struct Sample {
    std::size_t particles = 2048;
    std::vector<std::size_t> pieces = {1, 4};  // multi-step node counts; 1 is one-step
    std::size_t euler_steps = 100;             // baseline sampler on the learned velocity
    bool count_nfe = true;
    friend bool operator==(const Sample&, const Sample&) = default;
  } sample;

  struct Eval {
    bool exact = true;  // w2_exact when both sides have equal size <= cap, else sliced
    std::size_t projections = 256;
    friend bool operator==(const Eval&, const Eval&) = default;
  } eval;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  TargetSpec target_spec() const;
  TrainConfig velocity_config() const;
  CgTrainConfig cg_config() const;
};

/// Parses and validates; errors name the offending key. Throws ParseError.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

/// Text form with every key spelled out; parse_config(serialize(c)) == c.
std::string serialize(const RunConfig& config);

}  // namespace charflow
