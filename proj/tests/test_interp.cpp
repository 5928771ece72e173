#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "treenet/image_io.hpp"
#include "treenet/interp.hpp"
#include "treenet/synth.hpp"

using namespace treenet;
using namespace treenet::testing;

namespace {

const TreeNet<float>& shared_model() {
  static const TreeNet<float> model(ModelConfig{16, 16, 16, 4, 5}, 21);
  return model;
}

std::string read_text(const std::string& path) {
  const std::vector<uint8_t> bytes = file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

}  // namespace

TEST_SUITE("interp_lab") {

TEST_CASE("propagation specs") {
  const PropagationSpec sp{PropagationMode::selective, 3}, ac{PropagationMode::accumulative, 2};
  CHECK(sp.tag() == "sp3");
  CHECK(ac.tag() == "ac2");
  CHECK(sp.keeps(3));
  CHECK_FALSE(sp.keeps(1));
  CHECK(ac.keeps(1));
  CHECK(ac.keeps(2));
  CHECK_FALSE(ac.keeps(3));
  for (int bad : {0, 5, -1}) {
    CHECK_THROWS_WITH_AS((PropagationSpec{PropagationMode::selective, bad}.validate()), doctest::Contains("outside 1..4"), Error);
  }
  const Tensor<float> image = synth_image(*std::make_unique<Rng>(1), 64, 64);
  CHECK_THROWS_AS(propagate(shared_model(), image, PropagationSpec{PropagationMode::accumulative, 0}), Error);
  CHECK_THROWS_AS(bitmap(shared_model(), image, 5), Error);

  std::array<Tensor<float>, kNumLatents> ys;
  for (auto& y : ys) y = Tensor<float>(Shape{1, 2, 3, 3}, 1.0f);
  const LatentSet<float> s = select_latents(ys, sp);
  CHECK(s.present == std::array<bool, kNumLatents>{false, false, true, false});
  const LatentSet<float> a = select_latents(ys, PropagationSpec{PropagationMode::accumulative, 4});
  CHECK(a.present == std::array<bool, kNumLatents>{true, true, true, true});
}

TEST_CASE("accumulative propagation of all latents equals decoding") {
  const TreeNet<float>& model = shared_model();
  Rng rng(2);
  for (int k = 0; k < 4; ++k) {
    const Tensor<float> image = synth_image(rng, 48 + 16 * k, 80);
    const Bitstream stream = encode_image(model, image).stream;
    const Tensor<float> full = decode_image(model, stream);
    CHECK(bit_equal(propagate(model, stream, PropagationSpec{PropagationMode::accumulative, 4}), full));
    CHECK(bit_equal(propagate(model, image, PropagationSpec{PropagationMode::accumulative, 4}), full));
    CHECK_FALSE(bit_equal(propagate(model, stream, PropagationSpec{PropagationMode::accumulative, 3}), full));
    CHECK(propagate(model, stream, PropagationSpec{PropagationMode::selective, 2}).shape() == image.shape());
  }
}

TEST_CASE("selective propagation ignores the other latents") {
  const TreeNet<float>& model = shared_model();
  Rng rng(3);
  const Tensor<float> image = synth_image(rng, 64, 64);
  const DecodedLatents d = decode_latents(model, encode_image(model, image).stream);
  for (int i = 1; i <= kNumLatents; ++i) {
    const PropagationSpec spec{PropagationMode::selective, i};
    std::array<Tensor<float>, kNumLatents> other = d.y_hat;
    for (int j = 0; j < kNumLatents; ++j) {
      if (j + 1 != i) other[j] = random_tensor<float>(other[j].shape(), rng, -9, 9);
    }
    const Tensor<float> a = reconstruct(model, select_latents(d.y_hat, spec), 64, 64);
    const Tensor<float> b = reconstruct(model, select_latents(other, spec), 64, 64);
    CHECK(bit_equal(a, b));
  }
}

TEST_CASE("bit maps account for the latent rate") {
  const TreeNet<float>& model = shared_model();
  Rng rng(4);
  for (int k = 0; k < 3; ++k) {
    const Tensor<float> image = synth_image(rng, 64 + 64 * k, 128);
    const auto codes = model.quantize(pad_to_multiple(image));
    for (int i = 1; i <= kNumLatents; ++i) {
      const Bitmap m = bitmap(model, image, i);
      const Tensor<float> lik = model.bottlenecks[i - 1].round_likelihoods(codes[i - 1]).first;
      const std::vector<Tensor<float>> parts = {lik};
      const double bits = rate_bits<float>(parts);
      CHECK(m.channels == 16);
      CHECK(m.grid.shape() == Shape{1, 1, (64 + 64 * k) / 16, 128 / 16});
      CHECK(std::abs(m.sum() * static_cast<double>(m.channels) - bits) < 1e-6);
      CHECK(m.min() >= 0);
    }
  }
}

TEST_CASE("bit map grid and upscaling") {
  Tensor<float> lik(Shape{1, 4, 3, 5}, 0.25f);
  const Bitmap flat = bitmap_from_likelihoods(lik);
  CHECK(flat.min() == 2.0);
  CHECK(flat.max() == 2.0);
  CHECK(flat.sum() == 30.0);
  lik.at(0, 1, 2, 3) = 1.0f / 1024;
  const Bitmap m = bitmap_from_likelihoods(lik);
  CHECK(m.grid.at(0, 0, 2, 3) == doctest::Approx((3 * 2.0 + 10.0) / 4));
  CHECK(m.grid.at(0, 0, 2, 2) == 2.0);
  const Tensor<double> up = m.upscaled();
  CHECK(up.shape() == Shape{1, 1, 48, 80});
  for (int64_t r = 0; r < 48; ++r)
    for (int64_t q = 0; q < 80; ++q) CHECK(up.at(0, 0, r, q) == m.grid.at(0, 0, r / 16, q / 16));
  lik.at(0, 0, 0, 0) = 0.0f;
  CHECK_THROWS_AS(bitmap_from_likelihoods(lik), NumericError);
  CHECK_THROWS_AS(bitmap_from_likelihoods(Tensor<float>(Shape{2, 1, 2, 2}, 0.5f)), ShapeError);
}

TEST_CASE("bit map files") {
  TempDir dir("bitmaps");
  Tensor<float> lik(Shape{1, 2, 2, 3}, 0.5f);
  lik.at(0, 0, 1, 2) = 0.125f;
  lik.at(0, 1, 1, 2) = 0.125f;
  write_bitmap(dir / "m.png", bitmap_from_likelihoods(lik));
  const Tensor<float> png = read_image(dir / "m.png");
  CHECK(png.shape() == Shape{1, 3, 32, 48});
  CHECK(png.at(0, 0, 0, 0) == 0.0f);
  CHECK(png.at(0, 0, 31, 47) == 1.0f);
  CHECK(png.at(0, 0, 16, 32) == 1.0f);
  CHECK(png.at(0, 0, 15, 32) == 0.0f);
  CHECK(read_text(dir / "m.minmax.txt") == "min 1\nmax 3\n");

  write_bitmap(dir / "flat.png", bitmap_from_likelihoods(Tensor<float>(Shape{1, 2, 2, 2}, 0.25f)));
  const Tensor<float> flat = read_image(dir / "flat.png");
  for (float v : flat.data()) CHECK(v == 0.0f);
  CHECK(read_text(dir / "flat.minmax.txt") == "min 2\nmax 2\n");
}

}
