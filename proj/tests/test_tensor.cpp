#include <doctest.h>

#include <cmath>
#include <limits>
#include <tuple>

#include "support.hpp"
#include "treenet/kernels.hpp"

using namespace treenet;
using namespace treenet::testing;

namespace {

Var<double> conv(const Var<double>& x, Parameter<double>& w, Parameter<double>& b, int64_t stride, int64_t pad) {
  return conv2d(x, w.var, b.var, stride, pad);
}

}  // namespace

TEST_SUITE("tensor_core") {

TEST_CASE("tensor shape and data invariants") {
  Tensor<float> t(Shape{2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK(t.shape().numel() == 120);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
}

TEST_CASE("non-finite forward values are rejected") {
  Tensor<double> x(Shape{1, 1, 1, 2}, 1.0);
  x[1] = -1.0;
  CHECK_THROWS_AS(treenet::log2(Var<double>::constant(x)), NumericError);
  Tensor<double> big(Shape{1, 1, 1, 1}, 1e300);
  CHECK_THROWS_AS(mul(Var<double>::constant(big), Var<double>::constant(big)), NumericError);
}

TEST_CASE("conv2d closed-form cases") {
  Rng rng(3);
  const Tensor<double> x = random_tensor(Shape{2, 3, 5, 6}, rng);
  Tensor<double> w(Shape{3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.0;
  const Var<double> id = conv2d(Var<double>::constant(x), Var<double>::constant(w), Var<double>(), 1, 0);
  CHECK(bit_equal(id.value(), x));

  const Var<double> ones = conv2d(Var<double>::constant(Tensor<double>(Shape{1, 1, 3, 3}, 1.0)),
                                  Var<double>::constant(Tensor<double>(Shape{1, 1, 3, 3}, 1.0)), Var<double>(), 1, 0);
  CHECK(ones.shape() == Shape{1, 1, 1, 1});
  CHECK(ones.value()[0] == 9.0);

  CHECK_THROWS_AS(conv2d(Var<double>::constant(x), Var<double>::constant(Tensor<double>(Shape{4, 2, 3, 3})),
                         Var<double>(), 1, 1),
                  ShapeError);
}

TEST_CASE("conv2d stride 2 pad 1 gradient matches finite differences") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Parameter<double> w("w", random_tensor(Shape{2, 2, 3, 3}, rng));
    Parameter<double> b("b", random_tensor(Shape{1, 2, 1, 1}, rng));
    auto f = [&](std::span<const Var<double>> in) {
      const Var<double> y = conv(in[0], w, b, 2, 1);
      CHECK(y.shape() == Shape{2, 2, 3, 3});
      return weighted_sum(y, seed + 100);
    };
    const GradCheck r = gradcheck({random_tensor(Shape{2, 2, 5, 5}, rng)}, {&w, &b}, f, rng, 40);
    CHECK_MESSAGE(r.max_rel_err < 1e-4, "seed " << seed << " worst " << r.worst << " err " << r.max_rel_err);
  }
}

TEST_CASE("conv2d is linear in its input") {
  Rng rng(11);
  const Tensor<double> w = random_tensor(Shape{4, 3, 3, 3}, rng);
  const Tensor<double> x = random_tensor(Shape{1, 3, 8, 8}, rng), y = random_tensor(Shape{1, 3, 8, 8}, rng);
  const double a = 0.7, b = -1.3;
  Tensor<double> mix(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) mix[i] = a * x[i] + b * y[i];
  auto apply = [&](const Tensor<double>& t) {
    return kernels::conv2d_forward<double>(t, w, nullptr, {1, 1});
  };
  const Tensor<double> lhs = apply(mix), cx = apply(x), cy = apply(y);
  double err = 0;
  for (int64_t i = 0; i < lhs.numel(); ++i) err = std::max(err, std::abs(lhs[i] - (a * cx[i] + b * cy[i])));
  CHECK(err < 1e-6);
}

TEST_CASE("nearest upsample") {
  const Var<double> one = upsample_nearest2x(Var<double>::constant(Tensor<double>(Shape{1, 1, 1, 1}, 7.0)));
  CHECK(one.shape() == Shape{1, 1, 2, 2});
  for (double v : one.value().data()) CHECK(v == 7.0);

  const Tensor<double> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensor<double> up = upsample_nearest2x(Var<double>::constant(x)).value();
  const double expected[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
  for (int r = 0; r < 4; ++r)
    for (int q = 0; q < 4; ++q) CHECK(up.at(0, 0, r, q) == expected[r][q]);

  Rng rng(5);
  const Tensor<double> g = random_tensor(Shape{2, 3, 8, 6}, rng);
  Tensor<double> gx(Shape{2, 3, 4, 3});
  kernels::upsample_nearest2x_backward(g, gx);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t r = 0; r < 4; ++r)
        for (int64_t q = 0; q < 3; ++q) {
          const double pooled = g.at(n, c, 2 * r, 2 * q) + g.at(n, c, 2 * r + 1, 2 * q) +
                                g.at(n, c, 2 * r, 2 * q + 1) + g.at(n, c, 2 * r + 1, 2 * q + 1);
          CHECK(gx.at(n, c, r, q) == doctest::Approx(pooled).epsilon(1e-14));
        }
}

TEST_CASE("activations") {
  const Var<double> m1 = Var<double>::constant(Tensor<double>(Shape{1, 1, 1, 1}, -1.0));
  CHECK(leaky_relu(m1).value()[0] == doctest::Approx(-0.01).epsilon(1e-15));
  const Tensor<double> zero(Shape{1, 1, 1, 1}, 0.0);
  CHECK(sigmoid(Var<double>::constant(zero)).value()[0] == 0.5);

  Tape<double> tape;
  const Var<double> x = tape.variable(zero);
  tape.backward(sigmoid(x));
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));
  Rng rng(1);
  const GradCheck r = gradcheck({zero}, {}, [](std::span<const Var<double>> in) { return sigmoid(in[0]); }, rng);
  CHECK(r.max_rel_err < 1e-8);
}

TEST_CASE("global average pool") {
  const Tensor<double> c(Shape{1, 2, 3, 3}, 2.5);
  const Tensor<double> pooled_c = global_avg_pool(Var<double>::constant(c)).value();
  for (double v : pooled_c.data()) CHECK(v == 2.5);
  const Tensor<double> x(Shape{1, 1, 2, 2}, {1, 3, 5, 7});
  CHECK(global_avg_pool(Var<double>::constant(x)).value()[0] == 4.0);

  Tape<double> tape;
  Rng rng(2);
  const Var<double> v = tape.variable(random_tensor(Shape{1, 2, 3, 4}, rng));
  const Var<double> pooled = global_avg_pool(v);
  const Tensor<double> weights(Shape{1, 2, 1, 1}, {2.0, -6.0});
  tape.backward(sum(mul(pooled, Var<double>::constant(weights))));
  for (int64_t i = 0; i < 12; ++i) CHECK(v.grad()[i] == doctest::Approx(2.0 / 12));
  for (int64_t i = 12; i < 24; ++i) CHECK(v.grad()[i] == doctest::Approx(-6.0 / 12));
}

TEST_CASE("backward basics") {
  Rng rng(4);
  const Tensor<double> xv = random_tensor(Shape{1, 2, 3, 3}, rng);
  Parameter<double> w("w", random_tensor(Shape{1, 2, 3, 3}, rng));
  Parameter<double> unused("unused", random_tensor(Shape{1, 1, 1, 1}, rng));
  Tape<double> tape;
  const Var<double> x = tape.constant(xv);
  const Var<double> loss = sum(mul(w.var, x));
  const std::vector<Var<double>> params = {w.var, unused.var};
  tape.backward(loss, params);
  CHECK(bit_equal(w.grad(), xv));
  REQUIRE(unused.has_grad());
  CHECK(unused.grad()[0] == 0.0);
  CHECK_THROWS_AS(tape.backward(loss), Error);
  tape.reset();
  CHECK(tape.size() == 0);
}

TEST_CASE("composite conv -> activation -> sum gradients") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 40);
    Parameter<double> w1("w1", random_tensor(Shape{4, 3, 3, 3}, rng)), b1("b1", random_tensor(Shape{1, 4, 1, 1}, rng));
    Parameter<double> w2("w2", random_tensor(Shape{2, 4, 1, 1}, rng)), b2("b2", random_tensor(Shape{1, 2, 1, 1}, rng));
    auto f = [&](std::span<const Var<double>> in) {
      return sum(sigmoid(conv(leaky_relu(conv(in[0], w1, b1, 1, 1)), w2, b2, 1, 0)));
    };
    const GradCheck r = gradcheck({random_tensor(Shape{1, 3, 6, 6}, rng)}, {&w1, &b1, &w2, &b2}, f, rng, 30);
    CHECK_MESSAGE(r.max_rel_err < 1e-4, "seed " << seed << " worst " << r.worst << " err " << r.max_rel_err);
  }
}

TEST_CASE("elementwise and structural op gradients") {
  using Fn = std::function<Var<double>(std::span<const Var<double>>)>;
  const std::vector<std::pair<const char*, Fn>> ops = {
      {"tanh", [](auto in) { return weighted_sum(treenet::tanh(in[0]), 1); }},
      {"softplus", [](auto in) { return weighted_sum(softplus(in[0]), 2); }},
      {"log2", [](auto in) { return weighted_sum(treenet::log2(add_scalar(mul(in[0], in[0]), 0.5)), 3); }},
      {"pow", [](auto in) { return weighted_sum(pow_scalar(add_scalar(mul(in[0], in[0]), 0.1), 0.7), 4); }},
      {"div", [](auto in) { return weighted_sum(div(in[0], add_scalar(mul(in[1], in[1]), 0.5)), 5); }},
      {"broadcast", [](auto in) { return weighted_sum(mul(add(in[0], global_avg_pool(in[1])), in[1]), 6); }},
      {"depth_to_space", [](auto in) { return weighted_sum(depth_to_space2x(in[0]), 7); }},
      {"avg_pool", [](auto in) { return weighted_sum(avg_pool2x2(in[0]), 8); }},
      {"separable", [](auto in) { return weighted_sum(separable_filter_valid(in[0], std::vector<double>{0.25, 0.5, 0.25}), 9); }},
      {"concat_slice", [](auto in) {
         const std::vector<Var<double>> parts = {in[0], in[1]};
         return weighted_sum(slice_channels(concat_channels<double>(parts), 2, 5), 10);
       }},
      {"reshape_mean", [](auto in) { return mean(mul(reshape(in[0], Shape{1, 4, 4, 4}), in[1])); }},
      {"clamp_min", [](auto in) { return weighted_sum(clamp_min(in[0], -5.0), 12); }},
      {"sub_scalar", [](auto in) { return weighted_sum(mul_scalar(sub(in[0], in[1]), 3.0), 13); }},
  };
  for (const auto& [name, f] : ops) {
    for (uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed * 31 + 7);
      const GradCheck r = gradcheck({random_tensor(Shape{1, 4, 4, 4}, rng), random_tensor(Shape{1, 4, 4, 4}, rng)}, {},
                                    f, rng, 16);
      CHECK_MESSAGE(r.max_rel_err < 1e-4, name << " seed " << seed << " err " << r.max_rel_err);
    }
  }
}

TEST_CASE("adam") {
  Parameter<double> p("p", Tensor<double>(Shape{1, 1, 1, 3}, {1.0, -2.0, 0.5}));
  std::vector<Parameter<double>*> ps = {&p};
  p.zero_grad();
  adam_step<double>(ps, AdamOptions{});
  CHECK(bit_equal(p.value(), Tensor<double>(Shape{1, 1, 1, 3}, {1.0, -2.0, 0.5})));
  CHECK_FALSE(p.has_grad());
  CHECK_THROWS_AS(adam_step<double>(ps, AdamOptions{}), Error);

  // One step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
  Parameter<double> s("s", Tensor<double>(Shape{1, 1, 1, 1}, 0.0));
  std::vector<Parameter<double>*> ss = {&s};
  s.var.mutable_grad() = Tensor<double>(Shape{1, 1, 1, 1}, 1.0);
  adam_step<double>(ss, AdamOptions{});
  CHECK(s.value()[0] == doctest::Approx(-1e-4 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(s.step_count == 1);

  Rng rng(9);
  Parameter<double> a("a", Tensor<double>(Shape{1, 1, 2, 2}, 0.3)), b("b", Tensor<double>(Shape{1, 1, 2, 2}, 0.3));
  std::vector<Parameter<double>*> ab = {&a, &b};
  for (int step = 0; step < 25; ++step) {
    const Tensor<double> g = random_tensor(Shape{1, 1, 2, 2}, rng);
    a.var.mutable_grad() = g;
    b.var.mutable_grad() = g;
    adam_step<double>(ab, AdamOptions{1e-2});
  }
  CHECK(bit_equal(a.value(), b.value()));
}

TEST_CASE("identical seeds give bit-identical outputs and gradients") {
  auto run = [] {
    Rng rng(77);
    Conv2d<double> c("c", 3, 4, 3, 2, rng);
    Tape<double> tape;
    const Var<double> x = tape.constant(random_tensor(Shape{2, 3, 8, 8}, rng));
    const Var<double> y = c.forward(x);
    ParamList<double> ps;
    c.collect(ps);
    std::vector<Var<double>> vars;
    for (auto* p : ps) vars.push_back(p->var);
    tape.backward(weighted_sum(y, 5), vars);
    return std::pair{y.value(), c.weight.grad()};
  };
  const auto a = run(), b = run();
  CHECK(bit_equal(a.first, b.first));
  CHECK(bit_equal(a.second, b.second));
}

TEST_CASE("parallel kernels match the serial reference") {
  Rng rng(21);
  for (auto [stride, pad, k] : {std::tuple{1, 1, 3}, {2, 1, 3}, {2, 0, 1}, {1, 2, 5}}) {
    const Tensor<float> x = random_tensor<float>(Shape{2, 5, 12, 10}, rng);
    const Tensor<float> w = random_tensor<float>(Shape{7, 5, k, k}, rng);
    const Tensor<float> b = random_tensor<float>(Shape{1, 7, 1, 1}, rng);
    const kernels::ConvGeometry g{stride, pad};
    const Tensor<float> y = kernels::conv2d_forward(x, w, &b, g);
    const Tensor<float> yr = kernels::reference::conv2d_forward(x, w, &b, g);
    CHECK(max_abs_diff(y, yr) < 1e-4);

    const Tensor<float> go = random_tensor<float>(y.shape(), rng);
    Tensor<float> gx(x.shape()), gw(w.shape()), gb(b.shape()), rx(x.shape()), rw(w.shape()), rb(b.shape());
    kernels::conv2d_backward(x, w, go, g, &gx, &gw, &gb);
    kernels::reference::conv2d_backward(x, w, go, g, &rx, &rw, &rb);
    CHECK(max_abs_diff(gx, rx) < 1e-4);
    CHECK(max_abs_diff(gw, rw) < 1e-3);
    CHECK(max_abs_diff(gb, rb) < 1e-3);
  }
  const Tensor<float> x = random_tensor<float>(Shape{2, 8, 6, 6}, rng);
  CHECK(bit_equal(kernels::upsample_nearest2x(x), kernels::reference::upsample_nearest2x(x)));
  CHECK(bit_equal(kernels::depth_to_space2x(x), kernels::reference::depth_to_space2x(x)));
  CHECK(max_abs_diff(kernels::avg_pool2x2(x), kernels::reference::avg_pool2x2(x)) < 1e-6);
  const std::vector<float> taps = {0.2f, 0.5f, 0.3f};
  CHECK(max_abs_diff(kernels::separable_filter_valid<float>(x, taps),
                     kernels::reference::separable_filter_valid<float>(x, taps)) < 1e-6);
}

}
