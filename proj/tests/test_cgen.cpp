#include <doctest.h>

#include <cmath>

#include "charflow/cgen.hpp"
#include "charflow/errors.hpp"
#include "charflow/oracle.hpp"
#include "charflow/rng.hpp"

using namespace charflow;

namespace {

constexpr double kT = 0.99;

// Single atom at the origin: the exact flow scales x by std(s) / std(t).
struct GaussianFlow {
  Schedule schedule;
  double sigma;
  double ratio(double t, double s) const {
    return gaussian_marginal_std(schedule, sigma, s) / gaussian_marginal_std(schedule, sigma, t);
  }
};

// Student whose g(t, s, .) is the exact Gaussian flow.
StudentNet exact_student(const GaussianFlow& flow, std::size_t d) {
  auto direction = [flow](std::span<const double> t, std::span<const double> s, const PointSet& x) {
    PointSet out(x.size(), x.dim());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const EiKernels e = flow.schedule.ei_coeffs(t[i], s[i]);
      const double slope = e.psi > 0.0 ? (flow.ratio(t[i], s[i]) - e.phi) / e.psi : 0.0;
      for (std::size_t k = 0; k < x.dim(); ++k) out(i, k) = slope * x(i, k);
    }
    return out;
  };
  return StudentNet::from_function(direction, d, flow.schedule, kT);
}

// D_S(t, s, x) = a x + b in every coordinate.
StudentNet affine_student(const Schedule& schedule, double a, double b, std::size_t d = 1) {
  auto direction = [a, b](std::span<const double>, std::span<const double>, const PointSet& x) {
    PointSet out(x.size(), x.dim());
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t k = 0; k < x.dim(); ++k) out(i, k) = a * x(i, k) + b;
    return out;
  };
  return StudentNet::from_function(direction, d, schedule, kT);
}

double affine_g(const Schedule& schedule, double a, double b, double t, double s, double x) {
  const EiKernels e = schedule.ei_coeffs(t, s);
  return e.phi * x + e.psi * (a * x + b);
}

StudentNet network_student(std::size_t d, std::uint64_t seed, Parameterization p = Parameterization::ExponentialIntegrator,
                           ScheduleKind kind = ScheduleKind::Follmer) {
  Net net = net_init(student_spec(d, {8, 8}, Activation::SiLU, TimeFeatures()), seed);
  Rng rng(seed);
  for (double& v : net.params()) v += 0.2 * rng.normal();
  return StudentNet(std::move(net), Schedule(kind), 0.7, kT, p);
}

TrajectoryBatch gaussian_corpus(std::size_t m, std::size_t steps, std::size_t d, std::uint64_t seed) {
  const OracleContext ctx(make_mixture(PointSet(1, d, Vec(d, 0.0)), {1.0}, 0.5), Schedule(ScheduleKind::Follmer));
  const Field b = batched([&ctx](double t, std::span<const double> x) { return velocity_exact(ctx, t, x); });
  return push_samples(SamplerKind::Euler, b, ctx.schedule(), m, d, TimeGrid(kT, steps), seed);
}

double gradient_gap(StudentNet student, const LossResult& at, const std::function<double(const StudentNet&)>& loss) {
  const double h = 1e-5;
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < at.grad.size(); ++i) {
    StudentNet up = student, down = student;
    up.net().params()[i] += h;
    down.net().params()[i] -= h;
    const double fd = (loss(up) - loss(down)) / (2 * h);
    worst = std::max(worst, std::abs(fd - at.grad[i]));
    scale = std::max(scale, std::abs(at.grad[i]));
  }
  return worst / std::max(scale, 1e-12);
}

PointSet random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  PointSet p(n, d);
  for (double& v : p.data()) v = rng.normal();
  return p;
}

}  // namespace

TEST_CASE("the student is the identity on the diagonal") {
  const StudentNet student = network_student(2, 1);
  const PointSet x = random_points(20, 2, 2);
  for (double t : {0.0, 0.3, 0.9, kT}) CHECK(student.apply(t, t, x) == x);
  const StudentNet zero = affine_student(Schedule(ScheduleKind::Linear), 0.0, 0.0);
  const EiKernels e = zero.schedule().ei_coeffs(0.2, 0.7);
  CHECK(g_apply(zero, 0.2, 0.7, Vec{1.5})[0] == e.phi * 1.5);
  CHECK_THROWS_AS(g_apply(zero, 0.7, 0.2, Vec{1.5}), ContractError);
}

TEST_CASE("exact-flow student reproduces the oracle flow") {
  const GaussianFlow flow{Schedule(ScheduleKind::Linear), 0.5};
  const StudentNet student = exact_student(flow, 1);
  const OracleContext ctx(make_mixture(PointSet(1, 1, {0.0}), {1.0}, 0.5), flow.schedule);
  for (auto [t, s] : {std::pair{0.0, kT}, std::pair{0.2, 0.6}, std::pair{0.5, 0.95}}) {
    const double y = g_apply(student, t, s, Vec{1.3})[0];
    CHECK(std::abs(y - flow_exact(ctx, t, s, Vec{1.3}, 1e-12)[0]) < 1e-8);
  }
}

TEST_CASE("regression loss") {
  const TrajectoryBatch corpus = gaussian_corpus(6, 5, 2, 3);
  std::vector<PairIndex> pairs;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k <= 5; ++k)
      for (std::size_t l = k; l <= 5; ++l) pairs.push_back({i, k, l});
  CHECK(regression_loss_value(trajectory_lookup(corpus), corpus, pairs) == 0.0);

  std::vector<PairIndex> diagonal;
  for (std::size_t k = 0; k <= 5; ++k) diagonal.push_back({k % 6, k, k});
  CHECK(regression_loss(network_student(2, 4), corpus, diagonal).loss == 0.0);

  // one off-diagonal pair plus one diagonal pair: the diagonal term counts half
  const StudentNet plain = network_student(2, 4, Parameterization::Plain);
  const PairIndex off{1, 0, 3}, diag{2, 2, 2};
  auto term = [&](const PairIndex& p) {
    const Vec g = g_apply(plain, corpus.grid().node(p.from), corpus.grid().node(p.to), corpus.state(p.particle, p.from));
    return squared_distance(g, corpus.state(p.particle, p.to));
  };
  const std::vector<PairIndex> mixed{off, diag};
  CHECK(regression_loss(plain, corpus, mixed).loss == doctest::Approx((term(off) + 0.5 * term(diag)) / 2).epsilon(1e-13));

  for (Parameterization p : {Parameterization::ExponentialIntegrator, Parameterization::Plain}) {
    const StudentNet student = network_student(2, 5, p);
    const LossResult at = regression_loss(student, corpus, pairs);
    CHECK(gradient_gap(student, at, [&](const StudentNet& s) { return regression_loss(s, corpus, pairs).loss; }) < 1e-4);
  }
  const std::vector<PairIndex> bad{{0, 3, 9}};
  CHECK_THROWS_AS(regression_loss(network_student(2, 4), corpus, bad), ContractError);
}

TEST_CASE("semigroup penalty") {
  const TrajectoryBatch corpus = gaussian_corpus(4, 6, 1, 5);
  std::vector<TripleIndex> triples;
  for (std::size_t k = 0; k <= 6; ++k)
    for (std::size_t j = k; j <= 6; ++j)
      for (std::size_t l = j; l <= 6; ++l) triples.push_back({k % 4, k, j, l});
  CHECK(semigroup_penalty_value(trajectory_lookup(corpus), corpus, triples) == 0.0);

  std::vector<TripleIndex> same;
  for (std::size_t k = 0; k < 6; ++k) same.push_back({1, k, k, 6});
  CHECK(semigroup_penalty(network_student(1, 6), corpus, same).loss == 0.0);

  // toy trajectory 0 -> 1 -> 2 and g(t, s, x) = x + c for s > t
  const TrajectoryBatch toy(TimeGrid(0.9, 2), ScheduleKind::Linear, 0, 1, 1, Vec{0.0, 1.0, 2.0});
  auto shifted = [](double c) {
    return TwoTimeMap([c](std::span<const double> t, std::span<const double> s, const PointSet& x) {
      PointSet out = x;
      for (std::size_t i = 0; i < x.size(); ++i) out(i, 0) += s[i] > t[i] ? c : 0.0;
      return out;
    });
  };
  const std::vector<TripleIndex> end_j{{0, 0, 2, 2}};
  CHECK(semigroup_penalty_value(shifted(2.0), toy, end_j) == 0.0);
  CHECK(semigroup_penalty_value(shifted(0.5), toy, end_j) == 2.25);
  const std::vector<TripleIndex> mid{{0, 0, 1, 2}};
  CHECK(semigroup_penalty_value(shifted(0.5), toy, mid) == 1.0);

  for (Parameterization p : {Parameterization::ExponentialIntegrator, Parameterization::Plain}) {
    const StudentNet student = network_student(1, 7, p);
    const LossResult at = semigroup_penalty(student, corpus, triples);
    CHECK(gradient_gap(student, at, [&](const StudentNet& s) { return semigroup_penalty(s, corpus, triples).loss; }) <
          1e-4);
  }
  const std::vector<TripleIndex> unordered{{0, 3, 1, 4}};
  CHECK_THROWS_AS(semigroup_penalty(network_student(1, 6), corpus, unordered), ContractError);
}

TEST_CASE("local loss") {
  const Schedule follmer(ScheduleKind::Follmer);
  const PointSet data = random_points(64, 2, 1);
  const InterpolantBatch batch = draw_batch(data, follmer, kT, 32, 2);

  // a student with all-zero weights has F = 0, like a zero denoiser network
  NetSpec dspec;
  dspec.input_dim = 3;
  dspec.hidden_dims = {8, 8};
  dspec.output_dim = 2;
  const Net zero_denoiser(dspec, Vec(dspec.param_count(), 0.0));
  const NetSpec sspec = student_spec(2, {8, 8}, Activation::SiLU, TimeFeatures());
  const StudentNet zero(Net(sspec, Vec(sspec.param_count(), 0.0)), follmer, 0.7, kT);
  CHECK(local_loss(zero, batch).loss == doctest::Approx(denoiser_loss(zero_denoiser, batch, 0.7).loss).epsilon(1e-14));

  const StudentNet student = network_student(2, 3);
  const LossResult at = local_loss(student, batch);
  CHECK(gradient_gap(student, at, [&](const StudentNet& s) { return local_loss(s, batch).loss; }) < 1e-4);

  CHECK_THROWS_AS(local_loss(student, draw_batch(data, follmer, kT, 0, 2)), ContractError);
  CHECK_THROWS_AS(local_loss(network_student(2, 3, Parameterization::Plain), batch), ContractError);
  CHECK_THROWS_AS(local_loss(affine_student(follmer, 1.0, 0.0, 2), batch), ContractError);
}

TEST_CASE("global loss") {
  const GaussianFlow flow{Schedule(ScheduleKind::Linear), 0.5};
  const StudentNet exact = exact_student(flow, 1);
  const PointSet xt = random_points(16, 1, 4);
  Rng rng(5);
  Vec t(16);
  std::vector<TimeTriple> triples(16);
  PointSet reference(16, 1);
  for (std::size_t i = 0; i < 16; ++i) {
    t[i] = rng.uniform(0.0, kT);
    triples[i] = draw_time_triple(t[i], kT, rng);
    reference(i, 0) = flow.ratio(t[i], triples[i].u) * xt(i, 0);
  }
  CHECK(global_loss_from_reference(exact, exact, reference, t, triples, xt).loss < 1e-24);

  // u = t with offline = student
  const StudentNet net = network_student(1, 8, Parameterization::ExponentialIntegrator, ScheduleKind::Linear);
  std::vector<TimeTriple> flat = triples;
  for (std::size_t i = 0; i < 16; ++i) flat[i].u = t[i];
  CHECK(global_loss_from_reference(net, net, xt, t, flat, xt).loss == 0.0);

  // affine students against a straight-line evaluation of both branches
  const Schedule& s = flow.schedule;
  const StudentNet live = affine_student(s, 0.3, -0.2), off = affine_student(s, -0.1, 0.4);
  double expect = 0.0;
  for (std::size_t i = 0; i < 16; ++i) {
    const auto [ti, ui, si] = triples[i];
    const double pred = affine_g(s, -0.1, 0.4, si, kT, affine_g(s, 0.3, -0.2, ui, si, reference(i, 0)));
    const double target = affine_g(s, -0.1, 0.4, si, kT, affine_g(s, -0.1, 0.4, t[i], si, xt(i, 0)));
    expect += (pred - target) * (pred - target);
  }
  const double got = global_loss_from_reference(live, off, reference, t, triples, xt).loss;
  CHECK(std::abs(got - expect / 16) <= 1e-12 * (1 + expect));

  // teacher path: EI over [t, u] with the affine teacher D(t, x) = 0.5 x + 0.1
  const TimedField teacher = [](std::span<const double>, const PointSet& x) {
    PointSet out(x.size(), 1);
    for (std::size_t i = 0; i < x.size(); ++i) out(i, 0) = 0.5 * x(i, 0) + 0.1;
    return out;
  };
  const InterpolantBatch batch = make_batch(s, t, random_points(16, 1, 6), random_points(16, 1, 7));
  Vec u(16);
  for (std::size_t i = 0; i < 16; ++i) u[i] = triples[i].u;
  const PointSet path = teacher_flow(teacher, s, batch.times, u, batch.xt);
  for (std::size_t i = 0; i < 16; ++i) CHECK(path(i, 0) == doctest::Approx(affine_g(s, 0.5, 0.1, t[i], u[i], batch.xt(i, 0))));
  CHECK(global_loss(live, off, teacher, batch, triples).loss ==
        global_loss_from_reference(live, off, path, batch.times, triples, batch.xt).loss);

  const StudentNet student = network_student(1, 9, Parameterization::ExponentialIntegrator, ScheduleKind::Linear);
  const StudentNet offline = network_student(1, 10, Parameterization::ExponentialIntegrator, ScheduleKind::Linear);
  const LossResult at = global_loss_from_reference(student, offline, reference, t, triples, xt);
  CHECK(at.loss > 0.0);
  CHECK(gradient_gap(student, at, [&](const StudentNet& st) {
          return global_loss_from_reference(st, offline, reference, t, triples, xt).loss;
        }) < 1e-4);

  std::vector<TimeTriple> broken = triples;
  broken[0].u = broken[0].s + 0.01;
  CHECK_THROWS_AS(global_loss_from_reference(student, offline, reference, t, broken, xt), ContractError);
}

TEST_CASE("time triples are ordered") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double t = rng.uniform(0.0, kT);
    const TimeTriple tr = draw_time_triple(t, kT, rng);
    CHECK(tr.t == t);
    CHECK(t <= tr.u);
    CHECK(tr.u <= tr.s);
    CHECK(tr.s <= kT);
  }
}

TEST_CASE("self-distillation reference") {
  const GaussianFlow flow{Schedule(ScheduleKind::Follmer), 0.5};
  const StudentNet exact = exact_student(flow, 1);
  CHECK(self_distill_reference(exact, 0.1, 0.9, Vec{0.8})[0] == doctest::Approx(flow.ratio(0.1, 0.9) * 0.8).epsilon(1e-12));
  CHECK(self_distill_reference(network_student(1, 2), 0.4, 0.4, Vec{0.8})[0] == 0.8);
  const StudentNet toy = affine_student(flow.schedule, 0.3, -0.2);
  const double hand = affine_g(flow.schedule, 0.3, -0.2, 0.5, 0.8, affine_g(flow.schedule, 0.3, -0.2, 0.2, 0.5, 1.1));
  CHECK(std::abs(self_distill_reference(toy, 0.2, 0.8, Vec{1.1})[0] - hand) < 1e-12);
  CHECK_THROWS_AS(self_distill_reference(toy, 0.8, 0.2, Vec{1.1}), ContractError);
}

TEST_CASE("pair and triple draws cover the index simplex uniformly") {
  Rng rng(1);
  std::vector<int> pair_counts(6, 0);  // K = 2: 6 pairs
  for (int i = 0; i < 60000; ++i) {
    const PairIndex p = draw_pair(0, 2, rng);
    REQUIRE(p.from <= p.to);
    REQUIRE(p.to <= 2);
    const std::size_t idx = p.from == 0 ? p.to : p.from == 1 ? 2 + p.to : 5;
    ++pair_counts[idx];
  }
  for (int c : pair_counts) CHECK(std::abs(c - 10000) < 400);
  for (int i = 0; i < 2000; ++i) {
    const TripleIndex tr = draw_triple(0, 3, rng);
    CHECK(tr.from <= tr.mid);
    CHECK(tr.mid <= tr.to);
    CHECK(tr.to <= 3);
  }
}

TEST_CASE("sampling with the student") {
  const GaussianFlow flow{Schedule(ScheduleKind::Linear), 0.5};
  const StudentNet exact = exact_student(flow, 2);
  const PointSet x = one_step(exact, 20000, kT, 3);
  const double expect = gaussian_marginal_std(flow.schedule, 0.5, kT);
  for (double sd : column_std(x)) CHECK(sd == doctest::Approx(expect).epsilon(0.03));
  CHECK(one_step(exact, 50, kT, 3) == one_step(exact, 50, kT, 3));
  CHECK(one_step(exact, 0, kT, 3).size() == 0);

  const StudentNet net = network_student(2, 11);
  CHECK(multi_step(net, Vec{0.0, kT}, 40, 5) == one_step(net, 40, kT, 5));

  const PointSet one = one_step(exact, 40, kT, 6);
  const Vec nodes{0.0, 0.1, 0.45, 0.8, kT};
  const PointSet many = multi_step(exact, nodes, 40, 6);
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t k = 0; k < 2; ++k) CHECK(std::abs(many(i, k) - one(i, k)) < 1e-12);

  net.reset_evaluations();
  multi_step(net, uniform_nodes(kT, 7), 10, 1);
  CHECK(net.evaluations() == 7);

  CHECK_THROWS_AS(multi_step(net, Vec{0.0, 0.5, 0.4, kT}, 10, 1), ContractError);
  CHECK_THROWS_AS(multi_step(net, Vec{0.1, kT}, 10, 1), ContractError);
  const Vec u = uniform_nodes(kT, 4);
  CHECK(u.size() == 5);
  CHECK(u.back() == kT);
}

TEST_CASE("training") {
  const TrajectoryBatch corpus = gaussian_corpus(128, 10, 1, 2);
  CgTrainConfig config;
  config.iterations = 0;
  config.hidden_dims = {16, 16};
  config.seed = 4;
  config.stop_time = kT;
  CgInputs inputs;
  inputs.corpus = &corpus;
  const CgResult none = train_cg(config, inputs);
  CHECK(none.student.net() == net_init(student_spec(1, {16, 16}, Activation::SiLU, TimeFeatures()), derive_seed(4, 0)));
  CHECK(none.losses.empty());

  config.iterations = 30;
  const CgResult a = train_cg(config, inputs);
  CHECK(a.student.net() == train_cg(config, inputs).student.net());
  for (double l : a.losses) CHECK(std::isfinite(l));

  config.mode = CgMode::Practical;
  CHECK_THROWS_AS(train_cg(config, inputs), ContractError);
  config.mode = CgMode::Regression;
  config.parameterization = Parameterization::Plain;
  config.lambda_semigroup = -1.0;
  CHECK_THROWS_AS(config.validate(), ValidationError);
}

TEST_CASE("plain student learns the diagonal from the half-weighted terms") {
  const TrajectoryBatch corpus = gaussian_corpus(256, 10, 1, 8);
  CgTrainConfig config;
  config.parameterization = Parameterization::Plain;
  config.hidden_dims = {32, 32};
  config.iterations = 3000;
  config.batch_size = 32;
  config.lr = 3e-3;
  config.stop_time = kT;
  config.seed = 1;
  CgInputs inputs;
  inputs.corpus = &corpus;
  const CgResult r = train_cg(config, inputs);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < corpus.particles(); ++i)
    for (std::size_t k = 0; k <= 10; ++k) {
      const double t = corpus.grid().node(k);
      total += squared_distance(g_apply(r.student, t, t, corpus.state(i, k)), corpus.state(i, k));
      ++count;
    }
  const double rms = std::sqrt(total / static_cast<double>(count));
  MESSAGE("plain diagonal rms " << rms);
  CHECK(rms < 0.05);
}

TEST_CASE("student checkpoint round trip") {
  const StudentNet s = network_student(2, 12);
  const StudentNet back = StudentNet::from_checkpoint(s.to_checkpoint());
  CHECK(back.net() == s.net());
  CHECK(back.schedule().kind() == s.schedule().kind());
  CHECK(back.sigma_data() == s.sigma_data());
  CHECK(back.stop_time() == s.stop_time());
  CHECK(back.parameterization() == s.parameterization());
  CHECK_THROWS_AS(affine_student(Schedule(), 1.0, 0.0).to_checkpoint(), ContractError);
}

TEST_CASE("practical distillation fits the teacher's denoiser on the diagonal") {
  const TargetSpec spec = make_mixture(PointSet(1, 1, {0.0}), {1.0}, 0.5);
  const OracleContext ctx(spec, Schedule(ScheduleKind::Follmer));
  const PointSet data = sample_target(spec, 8192, 1);

  TrainConfig teacher_config;
  teacher_config.schedule = ScheduleKind::Follmer;
  teacher_config.loss = LossKind::Denoiser;
  teacher_config.iterations = 3000;
  teacher_config.lr = 3e-3;
  teacher_config.ema_rate = 0.999;
  teacher_config.seed = 2;
  const LearnedField teacher = train(teacher_config, data).field;

  CgTrainConfig config;
  config.mode = CgMode::Practical;
  config.hidden_dims = {32, 32};
  config.iterations = 3000;
  config.lr = 3e-3;
  config.stop_time = kT;
  config.seed = 3;
  CgInputs inputs;
  inputs.data = &data;
  inputs.teacher = &teacher;
  const CgResult r = train_cg(config, inputs);

  // D_S(t, t, x) read off the network
  const StudentNet& student = r.student;
  double total = 0.0;
  std::size_t count = 0;
  for (double t = 0.0; t <= 0.95; t += 0.05)
    for (double x = -2.0; x <= 2.0; x += 0.1) {
      const DenoiserScaling c = student.schedule().denoiser_coeffs(t, student.sigma_data());
      const double f = net_forward(student.net(), Vec{t, t, c.c_in * x})[0];
      const double diag = c.c_skip * x + c.c_out * f;
      const double exact = denoiser_exact(ctx, t, Vec{x})[0];
      total += (diag - exact) * (diag - exact);
      ++count;
    }
  const double rms = std::sqrt(total / static_cast<double>(count));
  MESSAGE("practical diagonal rms " << rms);
  CHECK(rms < 0.05);
}
