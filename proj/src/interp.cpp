#include "treenet/interp.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include "treenet/image_io.hpp"

namespace treenet {

void PropagationSpec::validate() const {
  if (index < 1 || index > kNumLatents) {
    throw Error("propagate: latent index " + std::to_string(index) + " is outside 1..4");
  }
}

bool PropagationSpec::keeps(int latent) const {
  return mode == PropagationMode::selective ? latent == index : latent <= index;
}

std::string PropagationSpec::tag() const {
  return (mode == PropagationMode::selective ? "sp" : "ac") + std::to_string(index);
}

LatentSet<float> select_latents(const std::array<Tensor<float>, kNumLatents>& y_hat,
                                const PropagationSpec& spec) {
  spec.validate();
  LatentSet<float> set;
  for (int i = 0; i < kNumLatents; ++i) {
    if (!spec.keeps(i + 1)) continue;
    set.y[i] = y_hat[i];
    set.present[i] = true;
  }
  return set;
}

Tensor<float> propagate(const TreeNet<float>& model, const Bitstream& stream, const PropagationSpec& spec) {
  spec.validate();
  const DecodedLatents d = decode_latents(model, stream);
  return reconstruct(model, select_latents(d.y_hat, spec), stream.header.width, stream.header.height);
}

Tensor<float> propagate(const TreeNet<float>& model, const Tensor<float>& image, const PropagationSpec& spec) {
  spec.validate();
  return propagate(model, encode_image(model, image).stream, spec);
}

double Bitmap::min() const { return *std::min_element(grid.data().begin(), grid.data().end()); }
double Bitmap::max() const { return *std::max_element(grid.data().begin(), grid.data().end()); }

double Bitmap::sum() const {
  double s = 0;
  for (double v : grid.data()) s += v;
  return s;
}

Tensor<double> Bitmap::upscaled() const {
  const Shape g = grid.shape();
  Tensor<double> out(Shape{1, 1, g.h * scale, g.w * scale});
  for (int64_t r = 0; r < g.h * scale; ++r)
    for (int64_t q = 0; q < g.w * scale; ++q) out.at(0, 0, r, q) = grid.at(0, 0, r / scale, q / scale);
  return out;
}

Bitmap bitmap_from_likelihoods(const Tensor<float>& likelihood) {
  const Shape s = likelihood.shape();
  if (s.n != 1) throw ShapeError("bitmap: expected a single-image likelihood tensor, got " + s.str());
  Bitmap m;
  m.channels = s.c;
  m.grid = Tensor<double>(Shape{1, 1, s.h, s.w});
  for (int64_t c = 0; c < s.c; ++c)
    for (int64_t r = 0; r < s.h; ++r)
      for (int64_t q = 0; q < s.w; ++q) {
        const double p = likelihood.at(0, c, r, q);
        if (!(p > 0 && p <= 1)) throw NumericError("bitmap: likelihood outside (0, 1]");
        m.grid.at(0, 0, r, q) -= std::log2(p);
      }
  for (double& v : m.grid.data()) v /= static_cast<double>(s.c);
  return m;
}

Bitmap bitmap(const TreeNet<float>& model, const Tensor<float>& image, int index) {
  PropagationSpec{PropagationMode::selective, index}.validate();
  const auto codes = model.quantize(pad_to_multiple(image));
  const auto& eb = model.bottlenecks[static_cast<size_t>(index - 1)];
  return bitmap_from_likelihoods(eb.round_likelihoods(codes[static_cast<size_t>(index - 1)]).first);
}

void write_bitmap(const std::string& png_path, const Bitmap& map) {
  const Tensor<double> up = map.upscaled();
  const double lo = map.min(), hi = map.max();
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<uint8_t> pixels(static_cast<size_t>(up.numel()));
  for (int64_t i = 0; i < up.numel(); ++i) {
    pixels[static_cast<size_t>(i)] = to_u8(static_cast<float>((up[i] - lo) / span));
  }
  write_gray_png(png_path, up.shape().w, up.shape().h, pixels);

  const std::string sidecar = std::filesystem::path(png_path).replace_extension(".minmax.txt").string();
  std::ofstream out(sidecar);
  if (!out) throw Error("cannot open '" + sidecar + "' for writing");
  out << std::setprecision(10) << "min " << lo << "\nmax " << hi << "\n";
}

}  // namespace treenet
