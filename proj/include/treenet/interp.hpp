#pragma once

// Latent interpretation: partial-latent propagation and per-position bit maps.

#include <array>
#include <string>

#include "treenet/bitstream.hpp"

namespace treenet {

enum class PropagationMode { selective, accumulative };

struct PropagationSpec {
  PropagationMode mode = PropagationMode::accumulative;
  int index = kNumLatents;  // 1-based

  /// Throws Error unless index is in 1..4.
  void validate() const;
  /// Selective keeps only y_index; accumulative keeps y_1..y_index.
  bool keeps(int latent) const;
  std::string tag() const;  // "sp3", "ac2", ...
};

/// Keeps the slots chosen by `spec`; the rest are absent (zero).
LatentSet<float> select_latents(const std::array<Tensor<float>, kNumLatents>& y_hat,
                                const PropagationSpec& spec);

/// Decodes the stream and synthesizes from the chosen latents only.
Tensor<float> propagate(const TreeNet<float>& model, const Bitstream& stream, const PropagationSpec& spec);
Tensor<float> propagate(const TreeNet<float>& model, const Tensor<float>& image, const PropagationSpec& spec);

struct Bitmap {
  Tensor<double> grid;  // (1, 1, h/16, w/16) channel-mean bits per latent position
  int64_t channels = 0;
  int64_t scale = 16;

  double min() const;
  double max() const;
  double sum() const;
  /// Nearest-neighbour upscale by `scale`: (1, 1, h, w).
  Tensor<double> upscaled() const;
};

/// -(1/C) sum_c log2 p for a (1, C, h, w) likelihood tensor.
Bitmap bitmap_from_likelihoods(const Tensor<float>& likelihood);
/// Bit map of latent `index` (1-based) under the coding distribution.
Bitmap bitmap(const TreeNet<float>& model, const Tensor<float>& image, int index);

/// Writes the upscaled map as an 8-bit PNG normalized to [min, max], plus a
/// `<stem>.minmax.txt` sidecar holding both bounds.
void write_bitmap(const std::string& png_path, const Bitmap& map);

}  // namespace treenet
