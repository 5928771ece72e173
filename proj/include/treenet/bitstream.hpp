#pragma once

// Bitstream container and whole-image encode / decode.
//
// Layout (little-endian): "TNBS", version u8, width u32, height u32, config id u8,
// lambda index u8, then 4 x (z length u32, y length u32), then the z segments
// of latents 1..4 followed by their y segments. Each segment starts with a
// varint alphabet bound L (symbols live in [-L, L]) followed by range-coded data.
// A y segment codes the anchor positions first and the non-anchors second.

#include <array>
#include <cstdint>
#include <vector>

#include "treenet/model.hpp"
#include "treenet/range_coder.hpp"

namespace treenet {

inline constexpr uint8_t kBitstreamVersion = 1;
inline constexpr size_t kBitstreamHeaderBytes = 4 + 1 + 4 + 4 + 1 + 1 + kNumLatents * 8;

struct BitstreamHeader {
  uint8_t version = kBitstreamVersion;
  uint32_t width = 0;
  uint32_t height = 0;
  uint8_t config_id = 0;
  uint8_t lambda_index = 0;
};

struct Bitstream {
  BitstreamHeader header;
  std::array<std::vector<uint8_t>, kNumLatents> z_segments;
  std::array<std::vector<uint8_t>, kNumLatents> y_segments;

  std::vector<uint8_t> serialize() const;
  /// Throws Error on bad magic / version or when a segment is truncated or followed by junk.
  static Bitstream parse(const std::vector<uint8_t>& bytes);

  /// Bytes of the eight segments (the header is fixed-size and excluded).
  size_t payload_bytes() const;
  size_t total_bytes() const { return kBitstreamHeaderBytes + payload_bytes(); }
};

/// Entropy codes already-quantized latents.
Bitstream encode_latents(const TreeNet<float>& model,
                         const std::array<LatentCode<float>, kNumLatents>& codes, uint32_t width,
                         uint32_t height, uint8_t lambda_index);

struct EncodeResult {
  Bitstream stream;
  std::array<LatentCode<float>, kNumLatents> codes;
};

/// `image` is (1, 3, H, W) in [0, 1]; it is padded internally.
EncodeResult encode_image(const TreeNet<float>& model, const Tensor<float>& image,
                          uint8_t lambda_index = 0);

struct DecodedLatents {
  std::array<Tensor<float>, kNumLatents> z_hat;
  std::array<Tensor<float>, kNumLatents> y_hat;
};

/// Recovers the quantized latents. Errors name the failing segment.
DecodedLatents decode_latents(const TreeNet<float>& model, const Bitstream& stream);

/// Synthesizes, crops to the original size and clamps to [0, 1].
Tensor<float> reconstruct(const TreeNet<float>& model, const LatentSet<float>& latents,
                          uint32_t width, uint32_t height);
Tensor<float> decode_image(const TreeNet<float>& model, const Bitstream& stream);

/// Quantized Gaussian table for residual symbols -L..L at scale sigma.
CdfTable gaussian_cdf_table(int32_t bound, double sigma);

}  // namespace treenet
