#include <doctest.h>

#include <cmath>
#include <sstream>

#include "charflow/errors.hpp"
#include "charflow/net.hpp"
#include "charflow/rng.hpp"

using namespace charflow;

namespace {

NetSpec make_spec(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                  Activation act = Activation::SiLU) {
  NetSpec spec;
  spec.input_dim = in;
  spec.hidden_dims = std::move(hidden);
  spec.output_dim = out;
  spec.activation = act;
  return spec;
}

Vec random_vec(Rng& rng, std::size_t n) {
  Vec v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

double inner(const Net& net, const Vec& input, const Vec& upstream) {
  const Vec y = net_forward(net, input);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * upstream[i];
  return s;
}

}  // namespace

TEST_CASE("parameter count") {
  CHECK(make_spec(3, {64, 64}, 2).param_count() == 4546);
  CHECK(make_spec(2, {}, 2).param_count() == 6);
  CHECK_THROWS_AS(make_spec(2, {0}, 2).validate(), ValidationError);
}

TEST_CASE("initialization") {
  const NetSpec spec = make_spec(3, {16, 8}, 2);
  const Net a = net_init(spec, 7);
  CHECK(a == net_init(spec, 7));
  CHECK_FALSE(a == net_init(spec, 8));
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const std::size_t in = spec.layer_in(l), out = spec.layer_out(l);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    const std::size_t w = a.weight_offset(l);
    for (std::size_t i = 0; i < in * out; ++i) CHECK(std::abs(a.params()[w + i]) <= bound);
    for (std::size_t i = 0; i < out; ++i) CHECK(a.params()[w + in * out + i] == 0.0);
  }
}

TEST_CASE("degenerate architectures") {
  const NetSpec spec = make_spec(3, {5}, 2);
  CHECK(net_forward(Net(spec, Vec(spec.param_count(), 0.0)), Vec{1.0, 2.0, 3.0}) == Vec{0.0, 0.0});

  // affine: W = [[1, 2], [3, 4]], b = (0.5, -1)
  const Net affine(make_spec(2, {}, 2), Vec{1.0, 2.0, 3.0, 4.0, 0.5, -1.0});
  CHECK(net_forward(affine, Vec{1.0, -1.0}) == Vec{-0.5, -2.0});

  // ReLU with all layer-1 pre-activations negative: output is the last layer on 0
  const NetSpec relu = make_spec(1, {2}, 1, Activation::ReLU);
  const Net r(relu, Vec{1.0, 1.0, -5.0, -5.0, 3.0, 4.0, 0.25});
  CHECK(net_forward(r, Vec{1.0}) == Vec{0.25});
  CHECK_THROWS_AS(net_forward(r, Vec{1.0, 2.0}), ContractError);
}

TEST_CASE("gradients match central differences") {
  Rng rng(3);
  for (int draw = 0; draw < 24; ++draw) {
    const Activation act = draw % 2 == 0 ? Activation::SiLU : Activation::ReLU;
    const NetSpec spec = make_spec(1 + draw % 3, {8, 6}, 1 + draw % 2, act);
    Net net = net_init(spec, 100 + draw);
    for (double& p : net.params()) p += 0.1 * rng.normal();
    const Vec input = random_vec(rng, spec.input_dim);
    const Vec upstream = random_vec(rng, spec.output_dim);
    const NetGradient g = net_grad(net, input, upstream);
    const double h = 1e-5;
    double worst = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      Net up = net, down = net;
      up.params()[i] += h;
      down.params()[i] -= h;
      const double fd = (inner(up, input, upstream) - inner(down, input, upstream)) / (2 * h);
      worst = std::max(worst, std::abs(fd - g.params[i]));
      scale = std::max(scale, std::abs(g.params[i]));
    }
    for (std::size_t i = 0; i < input.size(); ++i) {
      Vec up = input, down = input;
      up[i] += h;
      down[i] -= h;
      const double fd = (inner(net, up, upstream) - inner(net, down, upstream)) / (2 * h);
      worst = std::max(worst, std::abs(fd - g.input[i]));
    }
    // ReLU kinks are measure-zero; random draws avoid them
    CHECK(worst <= 1e-4 * std::max(1.0, scale));
  }
}

TEST_CASE("affine gradient is the outer product") {
  const Net affine(make_spec(2, {}, 3), Vec(9, 0.5));
  const Vec x{2.0, -1.0}, u{1.0, 0.0, 3.0};
  const NetGradient g = net_grad(affine, x, u);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(g.params[i * 2 + j] == u[i] * x[j]);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g.params[6 + i] == u[i]);
  const NetGradient z = net_grad(net_init(make_spec(2, {4}, 3), 1), x, Vec(3, 0.0));
  for (double v : z.params) CHECK(v == 0.0);
  for (double v : z.input) CHECK(v == 0.0);
}

TEST_CASE("batched forward equals per-sample forward bit for bit") {
  const Net net = net_init(make_spec(3, {32, 32}, 2), 5);
  Rng rng(1);
  PointSet inputs(17, 3);
  for (double& v : inputs.data()) v = rng.normal();
  const PointSet batch = net.forward(inputs);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Vec single = net_forward(net, inputs.row(i));
    for (std::size_t k = 0; k < 2; ++k) CHECK(batch(i, k) == single[k]);
  }
  PointSet head(1, 3, Vec(inputs.row(4).begin(), inputs.row(4).end()));
  CHECK(net.forward(head)(0, 0) == batch(4, 0));
}

TEST_CASE("adam") {
  const NetSpec spec = make_spec(1, {}, 1);
  Net net(spec, Vec{1.0, -2.0});
  AdamState state = AdamState::for_net(net, 0.01);
  adam_step(state, net, Vec{0.5, -3.0});
  CHECK(net.params()[0] == doctest::Approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  CHECK(net.params()[1] == doctest::Approx(-2.0 + 0.01 * 3.0 / (3.0 + 1e-8)).epsilon(1e-12));

  Net still(spec, Vec{1.0, -2.0});
  AdamState fresh = AdamState::for_net(still, 0.01);
  adam_step(fresh, still, Vec{0.0, 0.0});
  CHECK(still.params()[0] == 1.0);
  CHECK(still.params()[1] == -2.0);
  for (double v : fresh.m) CHECK(v == 0.0);
  for (double v : fresh.v) CHECK(v == 0.0);

  const Vec before(net.params().begin(), net.params().end());
  const AdamState saved = state;
  CHECK_THROWS_AS(adam_step(state, net, Vec{NAN, 0.0}), NumericError);
  CHECK(Vec(net.params().begin(), net.params().end()) == before);
  CHECK(state.step == saved.step);
  CHECK(state.m == saved.m);
}

TEST_CASE("ema") {
  const NetSpec spec = make_spec(1, {}, 1);
  const Net live(spec, Vec{1.0, 1.0});
  Net ema(spec, Vec{0.0, 0.0});
  ema_update(ema, live, 1.0);
  CHECK(ema.params()[0] == 0.0);
  ema_update(ema, live, 0.0);
  CHECK(ema.params()[0] == 1.0);

  Net slow(spec, Vec{0.0, 0.0});
  for (int i = 0; i < 1000; ++i) ema_update(slow, live, 0.999);
  // 0.999^1000 = 0.3677
  CHECK(1.0 - slow.params()[0] == doctest::Approx(std::pow(0.999, 1000)).epsilon(1e-9));
  CHECK(1.0 - slow.params()[0] == doctest::Approx(std::exp(-1.0)).epsilon(0.002));
  CHECK_THROWS_AS(ema_update(slow, net_init(make_spec(2, {}, 1), 0), 0.5), ContractError);
}

TEST_CASE("gradient clipping") {
  Vec g{3.0, 4.0};
  CHECK(clip_grad_norm(g, 1.0) == 5.0);
  CHECK(g[0] == doctest::Approx(0.6));
  CHECK(g[1] == doctest::Approx(0.8));
  Vec small{0.3, 0.4};
  clip_grad_norm(small, 1.0);
  CHECK(small == Vec{0.3, 0.4});
}

TEST_CASE("relu nets respect the spectral lipschitz bound") {
  Rng rng(11);
  for (int draw = 0; draw < 5; ++draw) {
    const Net net = net_init(make_spec(3, {16, 16}, 2, Activation::ReLU), 40 + draw);
    const double lip = lipschitz_upper_bound(net);
    for (int i = 0; i < 200; ++i) {
      const Vec x = random_vec(rng, 3), y = random_vec(rng, 3);
      const Vec fx = net_forward(net, x), fy = net_forward(net, y);
      double dout = 0.0, din = 0.0;
      for (std::size_t k = 0; k < 2; ++k) dout += (fx[k] - fy[k]) * (fx[k] - fy[k]);
      for (std::size_t k = 0; k < 3; ++k) din += (x[k] - y[k]) * (x[k] - y[k]);
      CHECK(std::sqrt(dout) <= lip * std::sqrt(din) * (1 + 1e-6));
    }
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  NetSpec spec = make_spec(4, {7, 5}, 2, Activation::ReLU);
  spec.time_features = TimeFeatures::parse("fourier:2");
  Checkpoint ck{net_init(spec, 3), {{"role", "velocity"}, {"note", "x=y"}}};
  ck.net.params()[0] = 1.0 / 3.0;
  ck.net.params()[1] = -0.0;
  std::stringstream buf;
  write_checkpoint(buf, ck, "# provenance");
  const Checkpoint back = read_checkpoint(buf);
  CHECK(back.net == ck.net);
  CHECK(back.metadata == ck.metadata);
  CHECK(std::signbit(back.net.params()[1]));

  std::stringstream bad("not a checkpoint\n");
  CHECK_THROWS_AS(read_checkpoint(bad), ParseError);
}

TEST_CASE("time features") {
  CHECK(TimeFeatures::parse("raw").width() == 1);
  const TimeFeatures f = TimeFeatures::parse("fourier:3");
  CHECK(f.width() == 6);
  CHECK(TimeFeatures::parse(f.str()) == f);
  Vec out(6);
  f.embed(0.25, out);
  CHECK(out[0] == doctest::Approx(1.0));
  CHECK(std::abs(out[1]) < 1e-15);
  CHECK_THROWS_AS(TimeFeatures::parse("fourier:x"), ParseError);
  CHECK(parse_activation(to_string(Activation::ReLU)) == Activation::ReLU);
}
