#pragma once

// Entropy bottleneck for one latent: quantizer, factorized prior for the
// hyper-latent z, hyper analysis / synthesis, checkerboard context model,
// entropy-parameter net and Gaussian conditional likelihoods for y.

#include <optional>
#include <span>
#include <vector>

#include "treenet/blocks.hpp"

namespace treenet {

enum class QuantMode { noise, round, round_around_mean };

/// Round half to even, elementwise.
template <typename T>
Tensor<T> round_half_even(const Tensor<T>& x);

/// noise: y + U[-0.5, 0.5) (differentiable, needs `rng`); round: round(y);
/// round_around_mean: round(y - mean) + mean (needs `mean`). Round modes return
/// constants that carry no gradient.
template <typename T>
Var<T> quantize(const Var<T>& y, QuantMode mode, Rng* rng = nullptr,
                const Var<T>* mean = nullptr);

/// Bin probability of integer residual k under N(0, sigma), sigma >= sigma_min.
double gaussian_bin_probability(double k, double sigma);

inline constexpr double kScaleFloor = 0.11;
inline constexpr double kLikelihoodFloor = 1e-9;
/// Smallest probability a 16-bit frequency table gives an in-range symbol.
inline constexpr double kCodingLikelihoodFloor = 1.0 / 65536;

/// P(y) = Phi((y - mu + 0.5)/s) - Phi((y - mu - 0.5)/s) with s = max(sigma, sigma_min),
/// floored at kLikelihoodFloor. Gradients flow to y, mu and sigma; through the
/// two floors they pass only when they push the value upward.
template <typename T>
Var<T> gaussian_likelihood(const Var<T>& y, const Var<T>& mu, const Var<T>& sigma,
                           double sigma_min = kScaleFloor);

/// Per-channel learned monotone CDF for the hyper-latent.
template <typename T>
class FactorizedPrior {
 public:
  FactorizedPrior() = default;
  FactorizedPrior(const std::string& name, int64_t channels, Rng& rng, double init_scale = 2.0);

  /// P(z) = CDF(z + 0.5) - CDF(z - 0.5), elementwise, channel-wise model.
  Var<T> likelihood(const Var<T>& z) const;
  /// Logit of the CDF of channel `c` at `v`.
  double cdf_logit(int64_t c, double v) const;
  double cdf(int64_t c, double v) const;
  /// Bin probabilities for integers lo..hi of channel c.
  std::vector<double> pmf(int64_t c, int64_t lo, int64_t hi) const;

  int64_t channels() const { return channels_; }
  int64_t param_count() const;
  void collect(ParamList<T>& out);

  static constexpr int kLayers = 4;
  static constexpr int kWidth[kLayers + 1] = {1, 3, 3, 3, 1};

  // Shapes: matrix (C, out, in, 1), bias (C, out, 1, 1), factor (C, out, 1, 1).
  std::vector<Parameter<T>> matrices, biases, factors;

 private:
  int64_t channels_ = 0;
};

/// Checkerboard parity masks: anchors are positions with (row + col) even.
template <typename T>
Tensor<T> checkerboard_mask(const Shape& shape, bool anchors);
inline bool is_anchor(int64_t row, int64_t col) { return ((row + col) & 1) == 0; }

struct EntropyConfig {
  int64_t latent_channels = 32;
  int64_t hyper_channels = 32;
  int64_t context_kernel = 5;
};

template <typename T>
struct GaussianParams {
  Var<T> mu;
  Var<T> sigma;
};

/// Everything the coder needs for one latent after round-mode quantization.
template <typename T>
struct LatentCode {
  Tensor<T> z_hat;      // round(h_a(y))
  Tensor<T> features;   // h_s(z_hat)
  Tensor<T> y_hat;      // round(y - mu) + mu
  Tensor<T> mu;         // coding mean per element (anchor pass / non-anchor pass merged)
  Tensor<T> sigma;      // raw scale before the floor
  std::vector<int32_t> y_symbols;  // round(y - mu), NCHW order
  std::vector<int32_t> z_symbols;  // z_hat as integers
};

template <typename T>
class EntropyBottleneck {
 public:
  EntropyBottleneck() = default;
  EntropyBottleneck(const std::string& name, const EntropyConfig& cfg, Rng& rng);

  Var<T> hyper_analysis(const Var<T>& y) const;
  Var<T> hyper_synthesis(const Var<T>& z_hat) const;

  /// (mu, sigma) for every position. Anchors see hyper features and a zero
  /// context; non-anchors additionally see the context of the anchor values of
  /// `y_partial` (non-anchor values of `y_partial` are masked out before use).
  GaussianParams<T> checkerboard_params(const Var<T>& y_partial, const Var<T>& features) const;

  /// Quantizes z (round) and y (round around the two-pass means).
  LatentCode<T> quantize_latent(const Var<T>& y) const;

  struct TrainOutput {
    Var<T> y_hat;
    Var<T> y_likelihood;
    Var<T> z_likelihood;
  };
  /// Noise-quantized pass used for training.
  TrainOutput forward_train(const Var<T>& y, Rng& rng) const;

  /// Round-mode likelihoods (the coding distribution) for y and z, bounded
  /// below by kCodingLikelihoodFloor.
  std::pair<Tensor<T>, Tensor<T>> round_likelihoods(const LatentCode<T>& code) const;

  MacCount count_hyper_analysis(const Shape& latent) const;
  MacCount count_hyper_synthesis(const Shape& latent) const;
  MacCount count_context(const Shape& latent) const;
  MacCount count_entropy_parameters(const Shape& latent) const;

  void collect(ParamList<T>& out);
  const EntropyConfig& config() const { return cfg_; }

  FactorizedPrior<T> prior;
  Conv2d<T> ha1, ha2, ha3;
  Conv2d<T> hs1;
  SubpelConv<T> hs2;
  Conv2d<T> hs3;
  SubpelConv<T> hs4;
  Conv2d<T> hs5;
  Conv2d<T> context;
  Conv2d<T> ep1, ep2, ep3;

 private:
  EntropyConfig cfg_{};
};

/// -sum(log2 p) over every element of every tensor. Throws on p <= 0 or p > 1.
template <typename T>
double rate_bits(std::span<const Tensor<T>> likelihoods);

/// Differentiable -sum(log2 p).
template <typename T>
Var<T> rate_bits(const Var<T>& likelihood);

}  // namespace treenet
