#include "treenet/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "treenet/image_io.hpp"

namespace treenet {
namespace {

using Color = std::array<float, 3>;

Color random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
}

void blend(Tensor<float>& img, int64_t r, int64_t q, const Color& c, float alpha) {
  for (int64_t k = 0; k < 3; ++k) {
    float& v = img.at(0, k, r, q);
    v += alpha * (c[static_cast<size_t>(k)] - v);
  }
}

}  // namespace

Tensor<float> synth_image(Rng& rng, int64_t height, int64_t width) {
  if (height < 1 || width < 1) throw Error("synth_image: dimensions must be positive");
  Tensor<float> img(Shape{1, 3, height, width});
  const Color a = random_color(rng), b = random_color(rng);
  const double angle = rng.uniform(0, 2 * std::numbers::pi);
  const double dx = std::cos(angle) / static_cast<double>(width), dy = std::sin(angle) / static_cast<double>(height);
  for (int64_t r = 0; r < height; ++r)
    for (int64_t q = 0; q < width; ++q) {
      const auto t = static_cast<float>(std::clamp(0.5 + dx * (q - width / 2.0) + dy * (r - height / 2.0), 0.0, 1.0));
      for (size_t k = 0; k < 3; ++k) img.at(0, static_cast<int64_t>(k), r, q) = a[k] + t * (b[k] - a[k]);
    }

  const int shapes = 3 + static_cast<int>(rng.below(6));
  for (int s = 0; s < shapes; ++s) {
    const Color c = random_color(rng);
    const double cy = rng.uniform(0, static_cast<double>(height)), cx = rng.uniform(0, static_cast<double>(width));
    const double ry = rng.uniform(0.05, 0.35) * static_cast<double>(height);
    const double rx = rng.uniform(0.05, 0.35) * static_cast<double>(width);
    const auto kind = rng.below(3);
    const double period = rng.uniform(3, 12), phase = rng.uniform(0, 2 * std::numbers::pi);
    const auto alpha = static_cast<float>(rng.uniform(0.6, 1.0));
    for (int64_t r = 0; r < height; ++r)
      for (int64_t q = 0; q < width; ++q) {
        const double u = (static_cast<double>(q) - cx) / rx, v = (static_cast<double>(r) - cy) / ry;
        bool inside = false;
        if (kind == 0) inside = std::abs(u) <= 1 && std::abs(v) <= 1;
        if (kind == 1) inside = u * u + v * v <= 1;
        if (kind == 2) {
          inside = std::abs(u) <= 1 && std::abs(v) <= 1 &&
                   std::sin(2 * std::numbers::pi * static_cast<double>(q + r) / period + phase) > 0;
        }
        if (inside) blend(img, r, q, c, alpha);
      }
  }

  const double sigma = rng.uniform(0.0, 0.03);
  for (float& v : img.data()) v = std::clamp(v + static_cast<float>(sigma * rng.normal()), 0.0f, 1.0f);
  return img;
}

std::vector<std::string> make_corpus(const std::string& dir, int count, int64_t height, int64_t width,
                                     uint64_t seed) {
  if (count < 1) throw Error("make_corpus: count must be positive");
  std::filesystem::create_directories(dir);
  Rng rng(seed);
  std::vector<std::string> paths;
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%04d.png", i);
    const std::string path = (std::filesystem::path(dir) / name).string();
    write_image(path, synth_image(rng, height, width));
    paths.push_back(path);
  }
  return paths;
}

}  // namespace treenet
