#pragma once

// TreeNet codec: binary-tree analysis transform, multi-layer synthesis
// transform with attentional fusion, four entropy bottlenecks, and the
// checkpoint format.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "treenet/blocks.hpp"
#include "treenet/entropy.hpp"

namespace treenet {

inline constexpr int kNumLatents = 4;
inline constexpr int kTreeNodes = 15;
inline constexpr int kTreeLeaves = 8;
inline constexpr int64_t kPadMultiple = 64;

struct ModelConfig {
  int64_t channels = 32;
  int64_t latent_channels = 32;
  int64_t hyper_channels = 32;
  int64_t aff_reduction = 4;
  int64_t context_kernel = 5;

  /// Throws Error when a field is non-positive or the AFF reduction does not divide the widths.
  void validate() const;
  /// One-byte fingerprint stored in bitstreams to catch model/stream mismatches.
  uint8_t id() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// The four latents; absent slots stand for zero tensors.
template <typename T>
struct LatentSet {
  std::array<Tensor<T>, kNumLatents> y;
  std::array<bool, kNumLatents> present{};

  static LatentSet full(std::array<Tensor<T>, kNumLatents> ys);
  /// Shape shared by the present slots; throws if none is present or shapes disagree.
  Shape shape() const;
};

template <typename T>
class AnalysisTree {
 public:
  AnalysisTree() = default;
  AnalysisTree(const ModelConfig& cfg, Rng& rng);

  /// Four latents at 1/16 resolution.
  std::array<Var<T>, kNumLatents> forward(const Var<T>& x) const;
  /// Outputs of the eight leaves, left to right.
  std::array<Var<T>, kTreeLeaves> leaves(const Var<T>& x) const;

  static int parent(int node) { return node == 0 ? -1 : (node - 1) / 2; }
  static bool is_leaf(int node) { return node >= kTreeNodes - kTreeLeaves; }
  /// Tree depth of a node (root is 0).
  static int depth(int node);

  MacCount count(const Shape& image) const;
  void collect(ParamList<T>& out);

  std::vector<ResidualDownBlock<T>> nodes;  // heap order, children of i at 2i+1 and 2i+2
  std::vector<AFFBlock<T>> fusions;         // fusion k merges leaves 2k and 2k+1
};

template <typename T>
class SynthesisNet {
 public:
  SynthesisNet() = default;
  SynthesisNet(const ModelConfig& cfg, Rng& rng);

  /// Undefined entries are absent latents and are replaced by zeros.
  Var<T> forward(const std::array<Var<T>, kNumLatents>& latents) const;

  /// Residual upsample nodes per layer: {3, 2, 1}.
  std::vector<int> layer_sizes() const;
  /// Spatial doublings from any latent to the output.
  int upsampling_count() const;

  MacCount count(const Shape& latent) const;
  void collect(ParamList<T>& out);

  std::vector<std::vector<ResidualUpBlock<T>>> layers;
  std::vector<std::vector<AFFBlock<T>>> fusions;
  ResidualUpBlock<T> final_node;
  Conv2d<T> head;
};

template <typename T>
class TreeNet {
 public:
  TreeNet() = default;
  TreeNet(const ModelConfig& cfg, uint64_t seed);

  struct TrainForward {
    Var<T> x_hat;
    std::array<Var<T>, kNumLatents> y_likelihood;
    std::array<Var<T>, kNumLatents> z_likelihood;
  };
  /// Noise-quantized pass. `x` must already be padded.
  TrainForward forward_train(const Var<T>& x, Rng& rng) const;

  /// Round-mode quantization of every latent of a padded image.
  std::array<LatentCode<T>, kNumLatents> quantize(const Tensor<T>& padded) const;
  /// Synthesis from (possibly partial) latents; no clamping.
  Tensor<T> synthesize(const LatentSet<T>& latents) const;

  ParamList<T> parameters();
  const ModelConfig& config() const { return cfg_; }

  struct Complexity {
    MacCount analysis, synthesis;
    // Summed over the four bottlenecks. Priors hold parameters but perform no MACs.
    MacCount hyper_analysis, hyper_synthesis, context, entropy_parameters, priors;
  };
  Complexity complexity(int64_t height, int64_t width) const;

  AnalysisTree<T> analysis;
  SynthesisNet<T> synthesis;
  std::array<EntropyBottleneck<T>, kNumLatents> bottlenecks;

 private:
  ModelConfig cfg_{};
};

/// Replicate-pads right/bottom up to the next multiple.
template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& img, int64_t multiple = kPadMultiple);
template <typename T>
Tensor<T> crop(const Tensor<T>& img, int64_t height, int64_t width);
inline int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

/// Named float records, in file order.
using StateDict = std::vector<std::pair<std::string, Tensor<float>>>;

struct Checkpoint {
  ModelConfig config;
  StateDict records;

  const Tensor<float>* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Parameter values keyed by name.
template <typename T>
StateDict model_state(TreeNet<T>& model);
/// Copies every parameter from `records`; throws on a missing name or shape mismatch.
template <typename T>
void load_model_state(TreeNet<T>& model, const Checkpoint& ckpt);

}  // namespace treenet
