#pragma once

// Network building blocks: convolution layer, residual downsample node,
// residual upsample node and attentional feature fusion, each with exact
// MAC / parameter accounting.

#include <string>
#include <vector>

#include "treenet/autodiff.hpp"
#include "treenet/optim.hpp"

namespace treenet {

/// Multiply-accumulate and parameter totals. MACs follow the convention
/// kh*kw*Cin*Cout*Hout*Wout per convolution; activations, pooling and
/// reshuffles are free.
struct MacCount {
  int64_t macs = 0;
  int64_t params = 0;

  MacCount& operator+=(const MacCount& o) {
    macs += o.macs;
    params += o.params;
    return *this;
  }
  friend MacCount operator+(MacCount a, const MacCount& b) { return a += b; }
  friend MacCount operator*(int64_t k, MacCount a) { return {k * a.macs, k * a.params}; }
  friend bool operator==(const MacCount&, const MacCount&) = default;
};

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

/// Square-kernel convolution with "same"-style padding kernel/2.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int64_t cin, int64_t cout, int64_t kernel, int64_t stride,
         Rng& rng);
  Conv2d(Conv2d&&) noexcept = default;
  Conv2d& operator=(Conv2d&&) noexcept = default;
  Conv2d(const Conv2d&) = delete;
  Conv2d& operator=(const Conv2d&) = delete;

  Var<T> forward(const Var<T>& x) const;
  Shape output_shape(const Shape& in) const;
  MacCount count(const Shape& in) const;
  void collect(ParamList<T>& out);

  /// Restricts the kernel to taps where mask == 1. The mask is applied on every
  /// forward, so masked taps stay inert whatever the optimizer does to them.
  void set_kernel_mask(Tensor<T> mask);
  const Tensor<T>& kernel_mask() const { return mask_; }

  int64_t in_channels() const { return cin_; }
  int64_t out_channels() const { return cout_; }
  int64_t kernel() const { return kernel_; }
  int64_t stride() const { return stride_; }

  Parameter<T> weight;
  Parameter<T> bias;

 private:
  int64_t cin_ = 0, cout_ = 0, kernel_ = 1, stride_ = 1;
  Tensor<T> mask_;
};

/// Convolution producing 4x channels followed by depth_to_space: a learned 2x upsampler.
template <typename T>
class SubpelConv {
 public:
  SubpelConv() = default;
  SubpelConv(const std::string& name, int64_t cin, int64_t cout, Rng& rng)
      : conv(name, cin, 4 * cout, 3, 1, rng) {}

  Var<T> forward(const Var<T>& x) const { return depth_to_space2x(conv.forward(x)); }
  MacCount count(const Shape& in) const { return conv.count(in); }
  void collect(ParamList<T>& out) { conv.collect(out); }

  Conv2d<T> conv;
};

/// main: conv3x3/2 -> LeakyReLU -> conv3x3; skip: conv1x1/2. Output = main + skip.
template <typename T>
class ResidualDownBlock {
 public:
  ResidualDownBlock() = default;
  ResidualDownBlock(const std::string& name, int64_t cin, int64_t cout, Rng& rng);

  Var<T> forward(const Var<T>& x) const;
  Var<T> main_path(const Var<T>& x) const;
  Var<T> skip_path(const Var<T>& x) const;
  Shape output_shape(const Shape& in) const;
  MacCount count(const Shape& in) const;
  void collect(ParamList<T>& out);

  Conv2d<T> conv1, conv2, skip;
};

/// main: subpel 2x (3x3) -> LeakyReLU -> conv3x3; skip: subpel 2x (3x3). Output = main + skip.
template <typename T>
class ResidualUpBlock {
 public:
  ResidualUpBlock() = default;
  ResidualUpBlock(const std::string& name, int64_t cin, int64_t cout, Rng& rng);

  Var<T> forward(const Var<T>& x) const;
  Var<T> main_path(const Var<T>& x) const;
  Var<T> skip_path(const Var<T>& x) const;
  Shape output_shape(const Shape& in) const;
  MacCount count(const Shape& in) const;
  void collect(ParamList<T>& out);

  SubpelConv<T> up1, up_skip;
  Conv2d<T> conv2;
};

/// Attentional feature fusion: out = m*x + (1-m)*y with
/// m = sigmoid(local(x+y) + global(x+y)); both branches are 1x1 bottlenecks
/// C -> C/r -> C, the global one applied after spatial averaging.
template <typename T>
class AFFBlock {
 public:
  AFFBlock() = default;
  AFFBlock(const std::string& name, int64_t channels, int64_t reduction, Rng& rng);

  Var<T> forward(const Var<T>& x, const Var<T>& y) const;
  Var<T> gate(const Var<T>& x, const Var<T>& y) const;
  MacCount count(const Shape& in) const;
  void collect(ParamList<T>& out);

  Conv2d<T> local1, local2, global1, global2;
};

template <typename Block>
MacCount count_block_macs(const Block& block, const Shape& input_dims) {
  return block.count(input_dims);
}

}  // namespace treenet
