#pragma once

// 8-bit RGB image files: PNG and binary PPM (P6).

#include <cstdint>
#include <string>
#include <vector>

#include "treenet/tensor.hpp"

namespace treenet {

/// Loads a PNG or PPM file as a (1, 3, H, W) tensor in [0, 1]. Grayscale and
/// alpha inputs are converted to RGB.
Tensor<float> read_image(const std::string& path);

/// Writes a (1, 3, H, W) tensor, quantized to 8 bits; format from the extension.
void write_image(const std::string& path, const Tensor<float>& image);

/// Writes an 8-bit grayscale PNG.
void write_gray_png(const std::string& path, int64_t width, int64_t height,
                    const std::vector<uint8_t>& pixels);

/// round(clamp(v, 0, 1) * 255)
uint8_t to_u8(float v);
/// Rounds every value to the nearest 8-bit level, staying in [0, 1].
Tensor<float> quantize_8bit(const Tensor<float>& image);

}  // namespace treenet
