#pragma once

// Procedural training / test images: gradients, flat shapes, stripes and noise.

#include <cstdint>
#include <string>
#include <vector>

#include "treenet/optim.hpp"
#include "treenet/tensor.hpp"

namespace treenet {

/// One (1, 3, height, width) image in [0, 1].
Tensor<float> synth_image(Rng& rng, int64_t height, int64_t width);

/// Writes `count` PNGs named img_0000.png, ... into `dir`; returns their paths.
std::vector<std::string> make_corpus(const std::string& dir, int count, int64_t height, int64_t width,
                                     uint64_t seed);

}  // namespace treenet
