#pragma once

// Numeric kernels behind the autodiff ops. The top-level functions are the
// OpenMP-parallel versions used everywhere; `reference::` holds plain serial
// loops that the tests and the benchmark compare against.
//
// Backward kernels accumulate (+=) into the gradient buffers they are given,
// which must already have the right shape. A null gradient pointer skips that
// output.

#include <span>

#include "treenet/tensor.hpp"

namespace treenet::kernels {

struct ConvGeometry {
  int64_t stride = 1;
  int64_t pad = 0;
};

/// Output shape of a convolution, validating every precondition.
Shape conv2d_output_shape(const char* op, const Shape& x, const Shape& weight, ConvGeometry g);

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         ConvGeometry g);

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     ConvGeometry g, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b);

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);
template <typename T>
void upsample_nearest2x_backward(const Tensor<T>& grad_out, Tensor<T>& grad_x);

/// (N, 4C, H, W) -> (N, C, 2H, 2W); channel c*4 + 2*i + j lands at sub-pixel (i, j).
template <typename T>
Tensor<T> depth_to_space2x(const Tensor<T>& x);
template <typename T>
void depth_to_space2x_backward(const Tensor<T>& grad_out, Tensor<T>& grad_x);

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x);
template <typename T>
void avg_pool2x2_backward(const Tensor<T>& grad_out, Tensor<T>& grad_x);

/// Separable "valid" filtering of every plane with `taps` along both axes.
template <typename T>
Tensor<T> separable_filter_valid(const Tensor<T>& x, std::span<const T> taps);
template <typename T>
void separable_filter_valid_backward(const Tensor<T>& grad_out, std::span<const T> taps,
                                     Tensor<T>& grad_x);

/// Row-major C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha, const T* a,
          int64_t lda, const T* b, int64_t ldb, T beta, T* c, int64_t ldc);

namespace reference {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         ConvGeometry g);
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     ConvGeometry g, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b);
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x);
template <typename T>
Tensor<T> depth_to_space2x(const Tensor<T>& x);
template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x);
template <typename T>
Tensor<T> separable_filter_valid(const Tensor<T>& x, std::span<const T> taps);

}  // namespace reference
}  // namespace treenet::kernels
