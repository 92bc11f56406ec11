#include "charflow/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "charflow/cgen.hpp"
#include "charflow/errors.hpp"
#include "charflow/metrics.hpp"
#include "charflow/net.hpp"
#include "charflow/rng.hpp"
#include "charflow/sampler.hpp"
#include "charflow/schedule.hpp"
#include "charflow/velocity.hpp"

namespace charflow {

namespace {

double scaled_gap(std::span<const double> lhs, std::span<const double> rhs) {
  double gap = 0.0;
  for (std::size_t k = 0; k < lhs.size(); ++k) gap = std::max(gap, std::abs(lhs[k] - rhs[k]));
  return gap / (1.0 + norm_inf(rhs));
}

// x ~ X_t = alpha Z + beta X1 with X1 from the target.
Vec probe_point(const OracleContext& ctx, double t, Rng& rng) {
  const TargetSpec& spec = ctx.spec();
  const std::size_t j = rng.below(spec.atoms.size());
  const auto c = ctx.schedule().coeffs(t);
  Vec x(ctx.dim());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double x1 = spec.atoms(j, k) + spec.sigma * rng.normal();
    x[k] = c.alpha * rng.normal() + c.beta * x1;
  }
  return x;
}

PointSet random_points(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
  PointSet p(n, d);
  for (double& v : p.data()) v = scale * rng.normal();
  return p;
}

Net perturbed_net(const NetSpec& spec, std::uint64_t seed, Rng& rng) {
  Net net = net_init(spec, seed);
  for (double& w : net.params()) w += 0.1 * rng.normal();
  return net;
}

TrajectoryBatch toy_corpus(std::size_t particles, std::size_t steps, std::size_t d, ScheduleKind kind, Rng& rng) {
  TrajectoryBatch batch(TimeGrid(0.9, steps), kind, 0, particles, d);
  for (std::size_t i = 0; i < particles; ++i)
    for (std::size_t k = 0; k <= steps; ++k)
      for (double& v : batch.state(i, k)) v = rng.normal();
  return batch;
}

CheckResult make_check(std::string name, double value, double tolerance, std::string detail = {}) {
  return {std::move(name), value <= tolerance, value, tolerance, std::move(detail)};
}

CheckResult make_flag(std::string name, bool passed, std::string detail = {}) {
  return {std::move(name), passed, passed ? 0.0 : 1.0, 0.0, std::move(detail)};
}

}  // namespace

double IdentityErrors::max() const {
  return std::max({velocity_from_denoiser, denoiser_from_velocity, score_relation});
}

std::vector<std::pair<std::string, TargetSpec>> oracle_families() {
  std::vector<std::pair<std::string, TargetSpec>> out;
  out.emplace_back("mixture-1d", make_mixture(PointSet(2, 1, {-1.0, 1.0}), {0.5, 0.5}, 0.25));
  out.emplace_back("mixture-2d",
                   make_mixture(PointSet(3, 2, {0.1, 0.2, 0.9, 0.4, 0.5, 0.8}), {0.5, 0.3, 0.2}, 0.3));
  const double s = 1.0 / std::sqrt(3.0);
  const Frame frame(3, 1, {s, s, s});
  out.emplace_back("embedded-1d-in-3d",
                   embed_target(make_mixture(PointSet(3, 1, {0.0, 0.5, 1.0}), {0.2, 0.5, 0.3}, 0.2), frame));
  return out;
}

IdentityErrors oracle_identity_errors(const OracleContext& ctx, std::size_t probes, std::uint64_t seed) {
  Rng rng(seed);
  const Schedule& schedule = ctx.schedule();
  const PointField denoiser = [&](double t, std::span<const double> x) { return denoiser_exact(ctx, t, x); };
  const PointField velocity = [&](double t, std::span<const double> x) { return velocity_exact(ctx, t, x); };
  IdentityErrors err;
  for (std::size_t p = 0; p < probes; ++p) {
    const double t = rng.uniform(0.001, 0.99);
    const Vec x = probe_point(ctx, t, rng);
    const Vec b = velocity_exact(ctx, t, x);
    const Vec d = denoiser_exact(ctx, t, x);
    err.velocity_from_denoiser =
        std::max(err.velocity_from_denoiser, scaled_gap(velocity_from_denoiser(denoiser, schedule, t, x), b));
    err.denoiser_from_velocity =
        std::max(err.denoiser_from_velocity, scaled_gap(denoiser_from_velocity(velocity, schedule, t, x), d));
    const auto c = schedule.coeffs(t);
    const Vec score = score_exact(ctx, t, x);
    const double rate = c.dbeta / c.beta;
    Vec rebuilt(x.size());
    for (std::size_t k = 0; k < x.size(); ++k)
      rebuilt[k] = rate * x[k] + c.alpha * c.alpha * (rate - c.dalpha / c.alpha) * score[k];
    err.score_relation = std::max(err.score_relation, scaled_gap(rebuilt, b));
  }
  return err;
}

double manifold_decomposition_error(const OracleContext& ctx, std::size_t probes, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    const double t = rng.uniform(0.0, 0.99);
    const Vec x = probe_point(ctx, t, rng);
    const ManifoldParts parts = manifold_decompose(ctx, t, x);
    Vec sum(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) sum[k] = parts.tangential[k] + parts.normal[k];
    worst = std::max(worst, scaled_gap(sum, velocity_exact(ctx, t, x)));
  }
  return worst;
}

double gradient_relative_error(const std::function<double(std::span<const double>)>& f, std::span<const double> params,
                               std::span<const double> analytic, double h) {
  Vec p(params.begin(), params.end());
  double diff2 = 0.0, g2 = 0.0, fd2 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = f(p);
    p[i] = keep - h;
    const double down = f(p);
    p[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    diff2 += (fd - analytic[i]) * (fd - analytic[i]);
    g2 += analytic[i] * analytic[i];
    fd2 += fd * fd;
  }
  return std::sqrt(diff2) / std::max({std::sqrt(g2), std::sqrt(fd2), 1e-12});
}

std::vector<GradientCheck> gradient_checks(std::size_t configs, std::uint64_t seed) {
  std::vector<GradientCheck> out;
  for (std::size_t c = 0; c < configs; ++c) {
    Rng rng(derive_seed(seed, c));
    const std::size_t d = 1 + rng.below(3);
    std::vector<std::size_t> hidden(1 + rng.below(2));
    for (auto& w : hidden) w = 3 + rng.below(5);
    const TimeFeatures features = rng.below(2) ? TimeFeatures::parse("fourier:2") : TimeFeatures::parse("raw");
    const Schedule schedule(rng.below(2) ? ScheduleKind::Follmer : ScheduleKind::Linear);
    const double stop = 0.95;
    const std::size_t rows = 5;
    const PointSet data = random_points(16, d, rng);
    const InterpolantBatch batch = draw_batch(data, schedule, stop, rows, rng);
    const double sigma_data = 0.5 + rng.uniform();

    // velocity and denoiser losses
    {
      NetSpec spec{features.width() + d, hidden, d, Activation::SiLU, features};
      Net net = perturbed_net(spec, rng.next(), rng);
      const LossResult v = velocity_loss(net, batch);
      auto fv = [&](std::span<const double> p) {
        Net n(spec, Vec(p.begin(), p.end()));
        return velocity_loss(n, batch).loss;
      };
      out.push_back({"velocity_loss", c, gradient_relative_error(fv, net.params(), v.grad)});
      const LossResult dn = denoiser_loss(net, batch, sigma_data);
      auto fd = [&](std::span<const double> p) {
        Net n(spec, Vec(p.begin(), p.end()));
        return denoiser_loss(n, batch, sigma_data).loss;
      };
      out.push_back({"denoiser_loss", c, gradient_relative_error(fd, net.params(), dn.grad)});
    }

    const NetSpec sspec = student_spec(d, hidden, Activation::SiLU, features);
    const auto student_at = [&](const StudentNet& base, std::span<const double> p) {
      StudentNet s = base;
      std::copy(p.begin(), p.end(), s.net().params().begin());
      return s;
    };
    const TrajectoryBatch corpus = toy_corpus(3, 4, d, schedule.kind(), rng);
    std::vector<PairIndex> pairs;
    std::vector<TripleIndex> triples;
    for (std::size_t i = 0; i < 6; ++i) {
      pairs.push_back(draw_pair(rng.below(3), 4, rng));
      triples.push_back(draw_triple(rng.below(3), 4, rng));
    }

    for (const Parameterization param : {Parameterization::ExponentialIntegrator, Parameterization::Plain}) {
      const StudentNet student(perturbed_net(sspec, rng.next(), rng), schedule, sigma_data, 0.9, param);
      const std::string suffix = param == Parameterization::Plain ? "(plain)" : "(ei)";
      const LossResult r = regression_loss(student, corpus, pairs);
      auto fr = [&](std::span<const double> p) { return regression_loss(student_at(student, p), corpus, pairs).loss; };
      out.push_back({"regression_loss" + suffix, c, gradient_relative_error(fr, student.net().params(), r.grad)});
      const LossResult sg = semigroup_penalty(student, corpus, triples);
      auto fs = [&](std::span<const double> p) {
        return semigroup_penalty(student_at(student, p), corpus, triples).loss;
      };
      out.push_back({"semigroup_penalty" + suffix, c, gradient_relative_error(fs, student.net().params(), sg.grad)});
    }

    const StudentNet student(perturbed_net(sspec, rng.next(), rng), schedule, sigma_data, stop);
    const StudentNet offline(perturbed_net(sspec, rng.next(), rng), schedule, sigma_data, stop);
    const LossResult l = local_loss(student, batch);
    auto fl = [&](std::span<const double> p) { return local_loss(student_at(student, p), batch).loss; };
    out.push_back({"local_loss", c, gradient_relative_error(fl, student.net().params(), l.grad)});

    std::vector<TimeTriple> times(rows);
    for (std::size_t i = 0; i < rows; ++i) times[i] = draw_time_triple(batch.times[i], stop, rng);
    const Net teacher_net = perturbed_net(NetSpec{features.width() + d, hidden, d, Activation::SiLU, features},
                                          rng.next(), rng);
    const LearnedField teacher(teacher_net, LossKind::Denoiser, schedule, sigma_data);
    const TimedField teacher_field = [&](std::span<const double> t, const PointSet& x) {
      return teacher.denoiser(t, x);
    };
    const LossResult g = global_loss(student, offline, teacher_field, batch, times, 2);
    auto fg = [&](std::span<const double> p) {
      return global_loss(student_at(student, p), offline, teacher_field, batch, times, 2).loss;
    };
    out.push_back({"global_loss", c, gradient_relative_error(fg, student.net().params(), g.grad)});

    Vec u(rows);
    for (std::size_t i = 0; i < rows; ++i) u[i] = times[i].u;
    const PointSet reference = self_distill_reference(offline, batch.times, u, batch.xt);
    const LossResult sd = global_loss_from_reference(student, offline, reference, batch.times, times, batch.xt);
    auto fsd = [&](std::span<const double> p) {
      return global_loss_from_reference(student_at(student, p), offline, reference, batch.times, times, batch.xt).loss;
    };
    out.push_back({"global_loss(self-distill)", c, gradient_relative_error(fsd, student.net().params(), sd.grad)});
  }
  return out;
}

std::vector<CheckResult> run_verify_suite(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed);

  for (const ScheduleKind kind : {ScheduleKind::Linear, ScheduleKind::Follmer}) {
    const ValidationReport report = validate_schedule(Schedule(kind), 1000);
    out.push_back(make_flag("schedule valid: " + std::string(to_string(kind)), report.all_passed()));
  }
  {
    const auto c = Schedule(ScheduleKind::Follmer).coeffs(0.6);
    const double gap = std::max({std::abs(c.alpha - 0.8), std::abs(c.beta - 0.6), std::abs(c.dalpha + 0.75),
                                 std::abs(c.dbeta - 1.0)});
    out.push_back(make_check("schedule coefficients at follmer t=0.6", gap, 1e-15));
    const auto k = Schedule(ScheduleKind::Linear).ei_coeffs(0.0, 0.5);
    out.push_back(make_check("ei kernels at linear (0, 0.5)", std::abs(k.phi - 0.5) + std::abs(k.psi - 0.5), 1e-15));
  }

  for (const auto& [name, spec] : oracle_families())
    for (const ScheduleKind kind : {ScheduleKind::Linear, ScheduleKind::Follmer}) {
      const OracleContext ctx(spec, Schedule(kind));
      const std::string tag = name + "/" + std::string(to_string(kind));
      out.push_back(make_check("oracle identities " + tag, oracle_identity_errors(ctx, 1000, rng.next()).max(), 1e-10));
      if (spec.kind == TargetKind::EmbeddedMixture)
        out.push_back(make_check("manifold decomposition " + tag, manifold_decomposition_error(ctx, 1000, rng.next()),
                                 1e-8));
    }

  {
    // single centered atom: the flow is x -> x * std(s) / std(t)
    const double sigma = 0.5;
    const OracleContext ctx(make_mixture(PointSet(1, 1, {0.0}), {1.0}, sigma), Schedule(ScheduleKind::Linear));
    const Vec x{0.7};
    const Vec y = flow_exact(ctx, 0.1, 0.9, x);
    const Schedule& s = ctx.schedule();
    const double expect =
        x[0] * gaussian_marginal_std(s, sigma, 0.9) / gaussian_marginal_std(s, sigma, 0.1);
    out.push_back(make_check("flow_exact on a gaussian target", std::abs(y[0] - expect), 1e-8));
    const Vec d = denoiser_exact(ctx, 0.5, Vec{1.0});
    out.push_back(make_check("denoiser at linear t=0.5, sigma=0.5, x=1", std::abs(d[0] - 0.4), 1e-14));
  }

  {
    const OracleContext ctx(oracle_families()[1].second, Schedule(ScheduleKind::Follmer));
    const Field velocity = batched([&](double t, std::span<const double> x) { return velocity_exact(ctx, t, x); });
    const TimeGrid grid(0.99, 12);
    const Vec x0{0.3, -1.2};
    const PointSet full = euler_flow(velocity, x0, grid);
    const PointSet tail = euler_flow(velocity, full.row(5), grid, 5, 12);
    bool same = true;
    for (std::size_t k = 5; k <= 12; ++k) same = same && std::equal(full.row(k).begin(), full.row(k).end(), tail.row(k - 5).begin());
    out.push_back(make_flag("euler flow composition is bit-exact", same));
  }

  {
    const NetSpec spec = student_spec(2, {8, 8}, Activation::SiLU, TimeFeatures::parse("fourier:2"));
    const StudentNet student(net_init(spec, rng.next()), Schedule(ScheduleKind::Follmer), 0.7, 0.99);
    const PointSet x = random_points(64, 2, rng, 3.0);
    Vec t(64);
    for (double& v : t) v = rng.uniform(0.0, 0.99);
    out.push_back(make_flag("g(t, t, x) = x exactly", student.apply(t, t, x) == x));

    const TrajectoryBatch corpus = toy_corpus(4, 6, 2, ScheduleKind::Follmer, rng);
    std::vector<TripleIndex> triples;
    std::vector<PairIndex> pairs;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k <= 6; ++k)
        for (std::size_t l = k; l <= 6; ++l) {
          pairs.push_back({i, k, l});
          for (std::size_t j = k; j <= l; ++j) triples.push_back({i, k, j, l});
        }
    const TwoTimeMap lookup = trajectory_lookup(corpus);
    out.push_back(make_check("semigroup penalty of the trajectory lookup", semigroup_penalty_value(lookup, corpus, triples), 0.0));
    out.push_back(make_check("regression loss of the trajectory lookup", regression_loss_value(lookup, corpus, pairs), 0.0));

    const Vec nodes{0.0, 0.99};
    out.push_back(make_flag("multi_step on {0, T} equals one_step",
                            multi_step(student, nodes, 32, 5) == one_step(student, 32, 0.99, 5)));
    student.reset_evaluations();
    multi_step(student, uniform_nodes(0.99, 4), 32, 5);
    out.push_back(make_check("multi_step with 4 pieces uses 4 evaluations",
                             std::abs(static_cast<double>(student.evaluations()) - 4.0), 0.0));
  }

  {
    const PointSet a(2, 1, {0.0, 2.0}), b(2, 1, {1.0, 3.0});
    out.push_back(make_check("w2_exact {0,2} vs {1,3}", std::abs(w2_exact(a, b) - 1.0), 1e-14));
    out.push_back(make_check("w2_gaussian N(0,1) vs N(0,0.25)",
                             std::abs(w2_gaussian({0.0}, {1.0}, {0.0}, {0.25}) - 0.5), 1e-14));
    const OrderFit fit = order_fit({0.1, 0.05, 0.025}, {0.3, 0.15, 0.075});
    out.push_back(make_check("order_fit on err = 3h", std::abs(fit.slope - 1.0), 1e-12));
  }

  double worst = 0.0;
  std::string worst_loss;
  for (const GradientCheck& g : gradient_checks(4, rng.next()))
    if (g.relative_error >= worst) {
      worst = g.relative_error;
      worst_loss = g.loss;
    }
  out.push_back(make_check("loss gradients vs finite differences", worst, 1e-4, "worst: " + worst_loss));

  {
    const PointSet data = sample_target(oracle_families()[0].second, 256, 3);
    TrainConfig config;
    config.iterations = 5;
    config.batch_size = 16;
    config.hidden_dims = {8};
    config.seed = 11;
    const TrainResult a = train(config, data);
    const TrainResult b = train(config, data);
    out.push_back(make_flag("training is deterministic per seed", a.field.net() == b.field.net() && a.losses == b.losses));
    std::stringstream buffer;
    write_checkpoint(buffer, a.field.to_checkpoint());
    out.push_back(make_flag("checkpoint round trip", read_checkpoint(buffer).net == a.field.net()));
  }
  return out;
}

void print_check_table(std::ostream& out, const std::vector<CheckResult>& results) {
  std::size_t failed = 0;
  for (const CheckResult& r : results) {
    char line[256];
    std::snprintf(line, sizeof line, "%-4s %-58s value=%-11.3e tol=%-9.1e", r.passed ? "ok" : "FAIL", r.name.c_str(),
                  r.value, r.tolerance);
    out << line;
    if (!r.detail.empty()) out << ' ' << r.detail;
    out << '\n';
    if (!r.passed) ++failed;
  }
  out << results.size() - failed << " passed, " << failed << " failed\n";
}

}  // namespace charflow
