#include <doctest.h>

#include <cmath>

#include "charflow/errors.hpp"
#include "charflow/oracle.hpp"
#include "charflow/rng.hpp"
#include "charflow/velocity.hpp"

using namespace charflow;

namespace {

NetSpec raw_spec(std::size_t d, std::vector<std::size_t> hidden) {
  NetSpec spec;
  spec.input_dim = 1 + d;
  spec.hidden_dims = std::move(hidden);
  spec.output_dim = d;
  return spec;
}

PointSet gaussian_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  PointSet p(n, d);
  for (double& v : p.data()) v = rng.normal();
  return p;
}

double fd_check(const Net& net, const LossResult& at, const std::function<double(const Net&)>& loss) {
  const double h = 1e-5;
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < at.grad.size(); ++i) {
    Net up = net, down = net;
    up.params()[i] += h;
    down.params()[i] -= h;
    const double fd = (loss(up) - loss(down)) / (2 * h);
    worst = std::max(worst, std::abs(fd - at.grad[i]));
    scale = std::max(scale, std::abs(at.grad[i]));
  }
  return worst / std::max(scale, 1e-12);
}

}  // namespace

TEST_CASE("interpolant batches") {
  const Schedule linear(ScheduleKind::Linear);
  const InterpolantBatch b = make_batch(linear, Vec{0.0}, PointSet(1, 2, {0.3, -1.0}), PointSet(1, 2, {2.0, 0.5}));
  CHECK(b.xt == b.x0);
  CHECK(b.target(0, 0) == -0.3 + 2.0);
  CHECK(b.target(0, 1) == 1.0 + 0.5);

  const PointSet data = gaussian_points(50, 2, 1);
  for (ScheduleKind kind : {ScheduleKind::Linear, ScheduleKind::Follmer}) {
    const Schedule s(kind);
    const InterpolantBatch batch = draw_batch(data, s, 0.9, 200, 7);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      CHECK(batch.times[i] >= 0.0);
      CHECK(batch.times[i] <= 0.9);
      const Coefficients c = s.coeffs(batch.times[i]);
      for (std::size_t k = 0; k < 2; ++k) {
        CHECK(batch.xt(i, k) == c.alpha * batch.x0(i, k) + c.beta * batch.x1(i, k));
        CHECK(batch.target(i, k) == c.dalpha * batch.x0(i, k) + c.dbeta * batch.x1(i, k));
      }
    }
    const InterpolantBatch again = draw_batch(data, s, 0.9, 200, 7);
    CHECK(again.xt == batch.xt);
    CHECK(again.times == batch.times);
  }
  CHECK_THROWS_AS(draw_batch(PointSet(0, 2), linear, 0.9, 10, 1), ContractError);
}

TEST_CASE("velocity loss") {
  const Schedule linear(ScheduleKind::Linear);
  // x0 = 0 and x1 = c make every target equal to c
  const PointSet x1(4, 2, {0.5, -1.0, 0.5, -1.0, 0.5, -1.0, 0.5, -1.0});
  const InterpolantBatch b = make_batch(linear, Vec{0.1, 0.4, 0.6, 0.8}, PointSet(4, 2), x1);
  Vec params(raw_spec(2, {}).param_count(), 0.0);
  params[6] = 0.5;
  params[7] = -1.0;
  const LossResult perfect = velocity_loss(Net(raw_spec(2, {}), params), b);
  CHECK(perfect.loss == 0.0);
  for (double g : perfect.grad) CHECK(g == 0.0);

  const InterpolantBatch random = draw_batch(gaussian_points(100, 2, 3), linear, 0.99, 32, 4);
  const NetSpec spec = raw_spec(2, {8});
  const LossResult zero = velocity_loss(Net(spec, Vec(spec.param_count(), 0.0)), random);
  double expect = 0.0;
  for (double v : random.target.data()) expect += v * v;
  CHECK(zero.loss == doctest::Approx(expect / 32).epsilon(1e-13));

  const Net net = net_init(spec, 2);
  const LossResult at = velocity_loss(net, random);
  CHECK(fd_check(net, at, [&](const Net& n) { return velocity_loss(n, random).loss; }) < 1e-4);
}

TEST_CASE("denoiser loss") {
  const Schedule follmer(ScheduleKind::Follmer);
  const InterpolantBatch batch = draw_batch(gaussian_points(100, 2, 5), follmer, 0.999, 32, 6);
  const NetSpec spec = raw_spec(2, {8});
  const double sigma_data = 0.8;
  const LossResult zero = denoiser_loss(Net(spec, Vec(spec.param_count(), 0.0)), batch, sigma_data);
  double expect = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const DenoiserScaling c = follmer.denoiser_coeffs(batch.times[i], sigma_data);
    for (std::size_t k = 0; k < 2; ++k) {
      const double f = (batch.x1(i, k) - c.c_skip * batch.xt(i, k)) / c.c_out;
      expect += f * f;
    }
  }
  CHECK(zero.loss == doctest::Approx(expect / 32).epsilon(1e-13));

  const Net net = net_init(spec, 9);
  const LossResult at = denoiser_loss(net, batch, sigma_data);
  CHECK(fd_check(net, at, [&](const Net& n) { return denoiser_loss(n, batch, sigma_data).loss; }) < 1e-4);
}

TEST_CASE("denoiser regression target has unit variance in every time stratum") {
  const TargetSpec spec = make_mixture(PointSet(2, 1, {-1.0, 1.0}), {0.5, 0.5}, 0.25);
  const PointSet data = sample_target(spec, 20000, 1);
  const double sd = estimate_sigma_data(data);
  for (ScheduleKind kind : {ScheduleKind::Linear, ScheduleKind::Follmer}) {
    const Schedule s(kind);
    for (double t : {0.0, 0.25, 0.5, 0.75, 0.95}) {
      Vec times(20000, t);
      const InterpolantBatch b = make_batch(s, times, gaussian_points(20000, 1, 2), data);
      const DenoiserScaling c = s.denoiser_coeffs(t, sd);
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t i = 0; i < b.size(); ++i) {
        const double f = (b.x1(i, 0) - c.c_skip * b.xt(i, 0)) / c.c_out;
        m1 += f;
        m2 += f * f;
      }
      m1 /= 20000;
      CHECK(m2 / 20000 - m1 * m1 == doctest::Approx(1.0).epsilon(0.05));
    }
  }
}

TEST_CASE("exact denoiser beats perturbed denoisers on the sampled loss") {
  const TargetSpec spec = make_mixture(PointSet(1, 1, {0.0}), {1.0}, 0.5);
  const OracleContext ctx(spec, Schedule(ScheduleKind::Linear));
  const InterpolantBatch b = draw_batch(sample_target(spec, 50000, 1), ctx.schedule(), 0.99, 50000, 2);
  auto loss = [&](double shift, double gain) {
    double total = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const DenoiserScaling c = ctx.schedule().denoiser_coeffs(b.times[i], 0.5);
      const double d = gain * denoiser_exact(ctx, b.times[i], b.xt.row(i))[0] + shift;
      const double r = (b.x1(i, 0) - d) / c.c_out;
      total += r * r;
    }
    return total / static_cast<double>(b.size());
  };
  const double best = loss(0.0, 1.0);
  for (double shift : {-0.1, 0.1}) CHECK(best < loss(shift, 1.0));
  for (double gain : {0.9, 1.1}) CHECK(best < loss(0.0, gain));
}

TEST_CASE("velocity from denoiser") {
  const OracleContext ctx(make_mixture(PointSet(2, 2, {0.1, 0.9, 0.7, 0.2}), {0.4, 0.6}, 0.3),
                          Schedule(ScheduleKind::Follmer));
  const PointField exact = [&](double t, std::span<const double> x) { return denoiser_exact(ctx, t, x); };
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const double t = rng.uniform(0.0, 0.99);
    const Vec x{rng.normal(), rng.normal()};
    const Vec b = velocity_from_denoiser(exact, ctx.schedule(), t, x);
    const Vec ref = velocity_exact(ctx, t, x);
    for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(b[k] - ref[k]) <= 1e-12 * (1 + std::abs(ref[k])));
    const Vec back = denoiser_from_velocity(
        [&](double tt, std::span<const double> xx) { return velocity_exact(ctx, tt, xx); }, ctx.schedule(), t, x);
    const Vec d = denoiser_exact(ctx, t, x);
    for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(back[k] - d[k]) <= 1e-10 * (1 + std::abs(d[k])));
  }
  const Vec x{0.4, -0.3};
  CHECK(velocity_from_denoiser(exact, ctx.schedule(), 0.0, x) == denoiser_exact(ctx, 0.0, x));

  const PointField zero = [](double, std::span<const double> x) { return Vec(x.size(), 0.0); };
  const Schedule linear(ScheduleKind::Linear);
  const Vec b = velocity_from_denoiser(zero, linear, 0.5, x);
  CHECK(b[0] == doctest::Approx(-0.8));
  CHECK(b[1] == doctest::Approx(0.6));
}

TEST_CASE("training") {
  const TargetSpec spec = make_mixture(PointSet(1, 1, {0.0}), {1.0}, 0.5);
  const PointSet data = sample_target(spec, 8192, 1);

  TrainConfig config;
  config.iterations = 0;
  config.seed = 17;
  const TrainResult none = train(config, data);
  CHECK(none.field.net() == net_init(config.net_spec(1), derive_seed(17, 0)));
  CHECK(none.losses.empty());

  config.iterations = 5000;
  config.lr = 3e-3;
  config.ema_rate = 0.999;
  config.time_features = TimeFeatures::parse("fourier:8");
  const TrainResult r = train(config, data);
  CHECK(r.losses.size() == 5000);
  for (double l : r.losses) CHECK(std::isfinite(l));
  const OracleContext ctx(spec, Schedule(ScheduleKind::Linear));
  const double error = velocity_oracle_error(r.field, ctx, 0.9, 5000, 3);
  MESSAGE("single-atom oracle error " << error);
  CHECK(error < 0.05);

  // same config twice: identical nets
  config.iterations = 50;
  CHECK(train(config, data).field.net() == train(config, data).field.net());

  TrainConfig bad;
  bad.stop_time = 0.4;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("learned field checkpoint round trip") {
  const TargetSpec spec = make_mixture(PointSet(2, 1, {-1.0, 1.0}), {0.5, 0.5}, 0.25);
  TrainConfig config;
  config.iterations = 20;
  config.loss = LossKind::Denoiser;
  config.schedule = ScheduleKind::Follmer;
  config.stop_time = 0.999;
  const TrainResult r = train(config, sample_target(spec, 512, 1));
  const LearnedField back = LearnedField::from_checkpoint(r.field.to_checkpoint());
  CHECK(back.net() == r.field.net());
  CHECK(back.kind() == LossKind::Denoiser);
  CHECK(back.schedule().kind() == ScheduleKind::Follmer);
  CHECK(back.sigma_data() == r.field.sigma_data());
  const PointSet x(3, 1, {-0.5, 0.0, 2.0});
  CHECK(back.velocity(0.3, x) == r.field.velocity(0.3, x));
}
