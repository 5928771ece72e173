#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "treenet/entropy.hpp"

using namespace treenet;
using namespace treenet::testing;

namespace {

double phi_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

Var<double> scalar(double v) { return Var<double>::constant(Tensor<double>(Shape{1, 1, 1, 1}, v)); }

EntropyBottleneck<double> small_bottleneck(uint64_t seed, int64_t channels = 6) {
  Rng rng(seed);
  return EntropyBottleneck<double>("eb", EntropyConfig{channels, 4, 5}, rng);
}

}  // namespace

TEST_SUITE("entropy_models") {

TEST_CASE("quantizer modes") {
  const Tensor<double> v(Shape{1, 1, 1, 6}, {2.4, -2.5, 0.5, 1.5, -0.5, 2.6});
  const Tensor<double> r = quantize(Var<double>::constant(v), QuantMode::round).value();
  const double expected[] = {2, -2, 0, 2, 0, 3};
  for (int i = 0; i < 6; ++i) CHECK(r[i] == expected[i]);

  const Var<double> mu = scalar(0.3);
  const double ram = quantize(scalar(2.4), QuantMode::round_around_mean, nullptr, &mu).value()[0];
  CHECK(ram == doctest::Approx(2.3).epsilon(1e-12));
  CHECK_THROWS_AS(quantize(scalar(2.4), QuantMode::round_around_mean), Error);
  CHECK_THROWS_AS(quantize(scalar(2.4), QuantMode::noise), Error);

  Rng rng(1);
  const Tensor<double> x = random_tensor(Shape{2, 3, 16, 16}, rng, -20, 20);
  const Tensor<double> n = quantize(Var<double>::constant(x), QuantMode::noise, &rng).value();
  bool moved = false;
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(n[i] - x[i] >= -0.5);
    CHECK(n[i] - x[i] < 0.5);
    moved = moved || n[i] != x[i];
  }
  CHECK(moved);
}

TEST_CASE("gaussian conditional") {
  CHECK(gaussian_bin_probability(0, 1.0) == doctest::Approx(0.382925).epsilon(1e-6));
  CHECK(gaussian_bin_probability(0, 1.0) == doctest::Approx(phi_cdf(0.5) - phi_cdf(-0.5)).epsilon(1e-12));
  const double lik = gaussian_likelihood(scalar(0.0), scalar(0.0), scalar(1.0)).value()[0];
  CHECK(lik == doctest::Approx(0.382925).epsilon(1e-6));

  for (double sigma : {0.11, 0.5, 1.0, 3.7, 12.0}) {
    double total = 0;
    const int64_t span = static_cast<int64_t>(std::ceil(10 * sigma));
    for (int64_t k = -span; k <= span; ++k) total += gaussian_bin_probability(static_cast<double>(k), sigma);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  // Below the floor every sigma behaves like the floor, and the centre bin is the most likely one.
  CHECK(gaussian_bin_probability(0, 0.01) == gaussian_bin_probability(0, kScaleFloor));
  for (int k = 1; k < 4; ++k) CHECK(gaussian_bin_probability(0, kScaleFloor) > gaussian_bin_probability(k, kScaleFloor));
  const double mu = 0.37;
  const double centre = gaussian_likelihood(scalar(mu), scalar(mu), scalar(kScaleFloor)).value()[0];
  for (double k : {-1.0, 1.0, 2.0}) {
    CHECK(centre > gaussian_likelihood(scalar(mu + k), scalar(mu), scalar(kScaleFloor)).value()[0] - 1e-15);
  }
  const double tail = gaussian_likelihood(scalar(400.0), scalar(0.0), scalar(0.2)).value()[0];
  CHECK(tail == kLikelihoodFloor);
}

TEST_CASE("factorized prior") {
  Rng rng(3);
  FactorizedPrior<double> prior("p", 5, rng);
  for (int64_t c = 0; c < 5; ++c) {
    const std::vector<double> pmf = prior.pmf(c, -30, 30);
    const double total = std::accumulate(pmf.begin(), pmf.end(), 0.0);
    CHECK(total <= 1.0 + 1e-12);
    CHECK(total >= 0.999);
    for (double p : pmf) CHECK(p >= 0);
    CHECK(prior.cdf(c, 1e4) > prior.cdf(c, -1e4));
    for (double v = -8; v < 8; v += 0.25) CHECK(prior.cdf(c, v) <= prior.cdf(c, v + 0.25));
  }
  const Tensor<double> z = random_tensor(Shape{1, 5, 3, 3}, rng, -4, 4);
  const Tensor<double> p = prior.likelihood(Var<double>::constant(z)).value();
  for (double v : p.data()) CHECK((v > 0 && v < 1));
  CHECK(prior.likelihood(Var<double>::constant(z)).value()[7] ==
        doctest::Approx(prior.cdf(0, z[7] + 0.5) - prior.cdf(0, z[7] - 0.5)).epsilon(1e-9));
  CHECK_THROWS_AS(prior.likelihood(Var<double>::constant(Tensor<double>(Shape{1, 4, 2, 2}))), ShapeError);
}

TEST_CASE("rate in bits") {
  const std::vector<Tensor<double>> halves = {Tensor<double>(Shape{1, 2, 3, 4}, 0.5)};
  CHECK(rate_bits<double>(halves) == doctest::Approx(24.0).epsilon(1e-14));
  const std::vector<Tensor<double>> ones = {Tensor<double>(Shape{1, 1, 2, 2}, 1.0)};
  CHECK(rate_bits<double>(ones) == 0.0);
  const std::vector<Tensor<double>> zero = {Tensor<double>(Shape{1, 1, 1, 2}, 0.0)};
  CHECK_THROWS_AS(rate_bits<double>(zero), Error);
  CHECK(rate_bits(Var<double>::constant(halves[0])).value()[0] == doctest::Approx(24.0));
}

TEST_CASE("bottleneck shapes and determinism") {
  Rng rng(4);
  EntropyBottleneck<float> eb("eb", EntropyConfig{32, 32, 5}, rng);
  const Var<float> y = Var<float>::constant(random_tensor<float>(Shape{1, 32, 16, 16}, rng, -4, 4));
  const LatentCode<float> a = eb.quantize_latent(y), b = eb.quantize_latent(y);
  CHECK(a.z_hat.shape() == Shape{1, 32, 4, 4});
  CHECK(a.features.shape() == Shape{1, 64, 16, 16});
  CHECK(a.y_hat.shape() == y.shape());
  CHECK(bit_equal(a.y_hat, b.y_hat));
  CHECK(a.y_symbols == b.y_symbols);
  for (float v : a.z_hat.data()) CHECK(v == std::nearbyint(v));
  for (int64_t i = 0; i < a.y_hat.numel(); ++i) {
    CHECK(a.y_hat[i] - a.mu[i] == doctest::Approx(static_cast<double>(a.y_symbols[static_cast<size_t>(i)])).epsilon(1e-5));
  }
  CHECK_THROWS_AS(eb.quantize_latent(Var<float>::constant(Tensor<float>(Shape{1, 32, 6, 8}))), ShapeError);
  const auto [ly, lz] = eb.round_likelihoods(a);
  for (float p : ly.data()) CHECK((p >= static_cast<float>(kCodingLikelihoodFloor) && p <= 1.0f));
  for (float p : lz.data()) CHECK((p >= static_cast<float>(kCodingLikelihoodFloor) && p <= 1.0f));

  Rng n1(1), n2(2);
  const auto t1 = eb.forward_train(y, n1), t2 = eb.forward_train(y, n2);
  CHECK_FALSE(bit_equal(t1.z_likelihood.value(), t2.z_likelihood.value()));
  CHECK_FALSE(bit_equal(t1.y_hat.value(), t2.y_hat.value()));
}

TEST_CASE("checkerboard masks partition the lattice") {
  const Shape s{1, 3, 7, 6};
  const Tensor<float> a = checkerboard_mask<float>(s, true), n = checkerboard_mask<float>(s, false);
  double anchors = 0, others = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a[i] + n[i] == 1.0f);
    anchors += a[i];
    others += n[i];
  }
  CHECK(anchors + others == 7 * 6);
  CHECK(a.at(0, 0, 0, 0) == 1.0f);
  CHECK(a.at(0, 0, 0, 1) == 0.0f);
}

TEST_CASE("checkerboard context masking") {
  EntropyBottleneck<double> eb = small_bottleneck(5);
  Rng rng(6);
  const Shape s{1, 6, 8, 8};
  const Var<double> features = Var<double>::constant(random_tensor(Shape{1, 12, 8, 8}, rng));
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor<double> y = random_tensor(s, rng, -5, 5);
    Tensor<double> y2 = y;
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t r = 0; r < s.h; ++r)
        for (int64_t q = 0; q < s.w; ++q)
          if (!is_anchor(r, q)) y2.at(0, c, r, q) = rng.uniform(-5, 5);
    const auto p1 = eb.checkerboard_params(Var<double>::constant(y), features);
    const auto p2 = eb.checkerboard_params(Var<double>::constant(y2), features);
    const auto p0 = eb.checkerboard_params(Var<double>::constant(Tensor<double>(s)), features);
    // Non-anchor values never matter; anchor parameters also ignore the anchors themselves.
    CHECK(bit_equal(p1.mu.value(), p2.mu.value()));
    CHECK(bit_equal(p1.sigma.value(), p2.sigma.value()));
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t r = 0; r < s.h; ++r)
        for (int64_t q = 0; q < s.w; ++q)
          if (is_anchor(r, q)) CHECK(p0.mu.value().at(0, c, r, q) == p1.mu.value().at(0, c, r, q));
  }
}

TEST_CASE("one anchor influences only nearby non-anchors") {
  EntropyBottleneck<double> eb = small_bottleneck(7);
  Rng rng(8);
  const Shape s{1, 6, 12, 12};
  const Var<double> features = Var<double>::constant(random_tensor(Shape{1, 12, 12, 12}, rng));
  const Tensor<double> y = random_tensor(s, rng, -3, 3);
  Tensor<double> moved = y;
  moved.at(0, 2, 6, 4) += 3.0;  // (6 + 4) even: an anchor
  const auto a = eb.checkerboard_params(Var<double>::constant(y), features);
  const auto b = eb.checkerboard_params(Var<double>::constant(moved), features);
  bool changed = false;
  for (int64_t r = 0; r < s.h; ++r)
    for (int64_t q = 0; q < s.w; ++q) {
      bool any = false;
      for (int64_t c = 0; c < s.c; ++c) any = any || a.mu.value().at(0, c, r, q) != b.mu.value().at(0, c, r, q);
      const bool inside = std::abs(r - 6) <= 2 && std::abs(q - 4) <= 2;
      if (any) {
        CHECK(inside);
        CHECK_FALSE(is_anchor(r, q));
        changed = true;
      }
    }
  CHECK(changed);
}

TEST_CASE("bottleneck training pass gradients") {
  // The rate sums hundreds of terms, so central differences carry more roundoff here.
  for (uint64_t seed = 0; seed < 10; ++seed) {
    EntropyBottleneck<double> eb = small_bottleneck(100 + seed, 4);
    ParamList<double> ps;
    eb.collect(ps);
    Rng rng(seed);
    auto f = [&](std::span<const Var<double>> in) {
      Rng noise(seed * 7 + 1);
      const auto out = eb.forward_train(in[0], noise);
      return add(rate_bits(out.y_likelihood), rate_bits(out.z_likelihood));
    };
    const GradCheck r = gradcheck({random_tensor(Shape{1, 4, 8, 8}, rng, -3, 3)}, ps, f, rng, 4);
    CHECK_MESSAGE(r.max_rel_err < 2e-3, "seed " << seed << " " << r.worst << " " << r.max_rel_err);
  }
}

}
