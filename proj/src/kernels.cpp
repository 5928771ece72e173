#include "treenet/kernels.hpp"

#include <Eigen/Core>
#include <omp.h>

#include <algorithm>
#include <vector>

namespace treenet::kernels {
namespace {

// Upper bound on the im2col scratch buffer per thread, in elements.
constexpr int64_t kColBudget = int64_t{1} << 22;

struct ConvDims {
  int64_t cin, hin, win, cout, kh, kw, hout, wout, stride, pad;
  int64_t k() const { return cin * kh * kw; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  // Output rows handled per im2col chunk.
  int64_t rows_per_chunk() const {
    return std::clamp<int64_t>(kColBudget / std::max<int64_t>(1, k() * wout), 1, hout);
  }
};

ConvDims make_dims(const Shape& x, const Shape& w, ConvGeometry g) {
  const Shape o = conv2d_output_shape("conv2d", x, w, g);
  return {x.c, x.h, x.w, w.n, w.h, w.w, o.h, o.w, g.stride, g.pad};
}

// Output columns [lo, hi) whose input column ox*stride - pad + kx is inside the image.
struct ValidRange {
  int64_t lo, hi;
};

inline ValidRange valid_columns(int64_t kx, int64_t stride, int64_t pad, int64_t win, int64_t wout) {
  const int64_t off = kx - pad;
  int64_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  int64_t hi = win - off <= 0 ? 0 : (win - off - 1) / stride + 1;
  lo = std::min(lo, wout);
  hi = std::clamp(hi, lo, wout);
  return {lo, hi};
}

// col[(ci*kh + ky)*kw + kx][(oy - row0)*wout + ox]
template <typename T>
void im2col(const T* x, const ConvDims& d, int64_t row0, int64_t rows, T* col) {
  const int64_t cols = rows * d.wout;
  for (int64_t ci = 0; ci < d.cin; ++ci) {
    const T* plane = x + ci * d.hin * d.win;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        T* dst = col + ((ci * d.kh + ky) * d.kw + kx) * cols;
        const ValidRange vr = valid_columns(kx, d.stride, d.pad, d.win, d.wout);
        for (int64_t r = 0; r < rows; ++r) {
          const int64_t iy = (row0 + r) * d.stride - d.pad + ky;
          T* drow = dst + r * d.wout;
          if (iy < 0 || iy >= d.hin) {
            std::fill(drow, drow + d.wout, T(0));
            continue;
          }
          std::fill(drow, drow + vr.lo, T(0));
          std::fill(drow + vr.hi, drow + d.wout, T(0));
          const T* src = plane + iy * d.win + (kx - d.pad);
          if (d.stride == 1) {
            std::copy(src + vr.lo, src + vr.hi, drow + vr.lo);
          } else {
            for (int64_t ox = vr.lo; ox < vr.hi; ++ox) drow[ox] = src[ox * d.stride];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, int64_t row0, int64_t rows, T* x) {
  const int64_t cols = rows * d.wout;
  for (int64_t ci = 0; ci < d.cin; ++ci) {
    T* plane = x + ci * d.hin * d.win;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx) {
        const T* src = col + ((ci * d.kh + ky) * d.kw + kx) * cols;
        const ValidRange vr = valid_columns(kx, d.stride, d.pad, d.win, d.wout);
        for (int64_t r = 0; r < rows; ++r) {
          const int64_t iy = (row0 + r) * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.hin) continue;
          const T* srow = src + r * d.wout;
          T* drow = plane + iy * d.win + (kx - d.pad);
          if (d.stride == 1) {
            for (int64_t ox = vr.lo; ox < vr.hi; ++ox) drow[ox] += srow[ox];
          } else {
            for (int64_t ox = vr.lo; ox < vr.hi; ++ox) drow[ox * d.stride] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Shape conv2d_output_shape(const char* op, const Shape& x, const Shape& w, ConvGeometry g) {
  if (g.stride < 1 || g.pad < 0) {
    throw ShapeError(std::string(op) + ": stride must be >= 1 and padding >= 0");
  }
  if (x.c != w.c) {
    throw ShapeError(std::string(op) + ": input " + x.str() + " has " + std::to_string(x.c) +
                     " channels but weight " + w.str() + " expects " + std::to_string(w.c));
  }
  const int64_t hnum = x.h + 2 * g.pad - w.h;
  const int64_t wnum = x.w + 2 * g.pad - w.w;
  if (hnum < 0 || wnum < 0) {
    throw ShapeError(std::string(op) + ": kernel " + w.str() + " larger than padded input " +
                     x.str());
  }
  return {x.n, w.n, hnum / g.stride + 1, wnum / g.stride + 1};
}

template <typename T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, T alpha, const T* a, int64_t lda,
          const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
  Eigen::Map<Mat, 0, Eigen::OuterStride<>> cm(c, m, n, Eigen::OuterStride<>(ldc));
  const ConstMap am(a, ta ? k : m, ta ? m : k, Eigen::OuterStride<>(lda));
  const ConstMap bm(b, tb ? n : k, tb ? k : n, Eigen::OuterStride<>(ldb));
  if (beta == T(0)) {
    cm.setZero();
  } else if (beta != T(1)) {
    cm *= beta;
  }
  if (ta && tb) {
    cm.noalias() += alpha * (am.transpose() * bm.transpose());
  } else if (ta) {
    cm.noalias() += alpha * (am.transpose() * bm);
  } else if (tb) {
    cm.noalias() += alpha * (am * bm.transpose());
  } else {
    cm.noalias() += alpha * (am * bm);
  }
}

template void gemm<float>(bool, bool, int64_t, int64_t, int64_t, float, const float*, int64_t,
                          const float*, int64_t, float, float*, int64_t);
template void gemm<double>(bool, bool, int64_t, int64_t, int64_t, double, const double*, int64_t,
                           const double*, int64_t, double, double*, int64_t);

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         ConvGeometry g) {
  const ConvDims d = make_dims(x.shape(), weight.shape(), g);
  if (bias && bias->numel() != d.cout) {
    throw ShapeError("conv2d: bias " + bias->shape().str() + " does not match " +
                     std::to_string(d.cout) + " output channels");
  }
  const int64_t batch = x.shape().n;
  Tensor<T> out(Shape{batch, d.cout, d.hout, d.wout});
  const int64_t hw_out = d.hout * d.wout;
  const int64_t chunk = d.rows_per_chunk();

#pragma omp parallel
  {
    std::vector<T> col;
#pragma omp for schedule(static)
    for (int64_t b = 0; b < batch; ++b) {
      const T* xb = x.ptr() + b * d.cin * d.hin * d.win;
      T* ob = out.ptr() + b * d.cout * hw_out;
      if (bias) {
        for (int64_t co = 0; co < d.cout; ++co) std::fill_n(ob + co * hw_out, hw_out, (*bias)[co]);
      }
      const T beta = bias ? T(1) : T(0);
      if (d.pointwise()) {
        gemm<T>(false, false, d.cout, hw_out, d.cin, T(1), weight.ptr(), d.cin, xb, hw_out, beta,
                ob, hw_out);
        continue;
      }
      for (int64_t row0 = 0; row0 < d.hout; row0 += chunk) {
        const int64_t rows = std::min(chunk, d.hout - row0);
        const int64_t cols = rows * d.wout;
        col.resize(static_cast<size_t>(d.k() * cols));
        im2col(xb, d, row0, rows, col.data());
        gemm<T>(false, false, d.cout, cols, d.k(), T(1), weight.ptr(), d.k(), col.data(), cols,
                beta, ob + row0 * d.wout, hw_out);
      }
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     ConvGeometry g, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const ConvDims d = make_dims(x.shape(), weight.shape(), g);
  const int64_t batch = x.shape().n;
  const int64_t hw_out = d.hout * d.wout;
  const int64_t chunk = d.rows_per_chunk();
  const int64_t wsize = weight.numel();

  // Per-sample weight gradients, reduced in sample order so the result does not
  // depend on the thread count.
  std::vector<T> partial_w(grad_w ? static_cast<size_t>(batch * wsize) : 0, T(0));

#pragma omp parallel
  {
    std::vector<T> col;
    std::vector<T> dcol;
#pragma omp for schedule(static)
    for (int64_t b = 0; b < batch; ++b) {
      const T* xb = x.ptr() + b * d.cin * d.hin * d.win;
      const T* gb = grad_out.ptr() + b * d.cout * hw_out;
      T* pw = grad_w ? partial_w.data() + b * wsize : nullptr;
      T* dxb = grad_x ? grad_x->ptr() + b * d.cin * d.hin * d.win : nullptr;
      if (d.pointwise()) {
        if (pw) gemm<T>(false, true, d.cout, d.cin, hw_out, T(1), gb, hw_out, xb, hw_out, T(0), pw, d.cin);
        if (dxb) gemm<T>(true, false, d.cin, hw_out, d.cout, T(1), weight.ptr(), d.cin, gb, hw_out, T(1), dxb, hw_out);
        continue;
      }
      for (int64_t row0 = 0; row0 < d.hout; row0 += chunk) {
        const int64_t rows = std::min(chunk, d.hout - row0);
        const int64_t cols = rows * d.wout;
        const T* gchunk = gb + row0 * d.wout;
        if (pw) {
          col.resize(static_cast<size_t>(d.k() * cols));
          im2col(xb, d, row0, rows, col.data());
          gemm<T>(false, true, d.cout, d.k(), cols, T(1), gchunk, hw_out, col.data(), cols,
                  row0 == 0 ? T(0) : T(1), pw, d.k());
        }
        if (dxb) {
          dcol.resize(static_cast<size_t>(d.k() * cols));
          gemm<T>(true, false, d.k(), cols, d.cout, T(1), weight.ptr(), d.k(), gchunk, hw_out,
                  T(0), dcol.data(), cols);
          col2im_add(dcol.data(), d, row0, rows, dxb);
        }
      }
    }
  }

  if (grad_w) {
    T* gw = grad_w->ptr();
    for (int64_t b = 0; b < batch; ++b) {
      const T* pw = partial_w.data() + b * wsize;
      for (int64_t i = 0; i < wsize; ++i) gw[i] += pw[i];
    }
  }
  if (grad_b) {
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t co = 0; co < d.cout; ++co) {
        const T* gp = grad_out.ptr() + (b * d.cout + co) * hw_out;
        T s = 0;
        for (int64_t i = 0; i < hw_out; ++i) s += gp[i];
        (*grad_b)[co] += s;
      }
    }
  }
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  const int64_t planes = s.n * s.c;
#pragma omp parallel for schedule(static) if (planes * s.plane() > (1 << 15))
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * s.plane();
    T* dst = out.ptr() + p * 4 * s.plane();
    for (int64_t y = 0; y < s.h; ++y) {
      T* r0 = dst + (2 * y) * 2 * s.w;
      T* r1 = r0 + 2 * s.w;
      for (int64_t xx = 0; xx < s.w; ++xx) {
        const T v = src[y * s.w + xx];
        r0[2 * xx] = r0[2 * xx + 1] = r1[2 * xx] = r1[2 * xx + 1] = v;
      }
    }
  }
  return out;
}

template <typename T>
void upsample_nearest2x_backward(const Tensor<T>& grad_out, Tensor<T>& grad_x) {
  const Shape s = grad_x.shape();
  const int64_t planes = s.n * s.c;
#pragma omp parallel for schedule(static) if (planes * s.plane() > (1 << 15))
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = grad_out.ptr() + p * 4 * s.plane();
    T* dst = grad_x.ptr() + p * s.plane();
    for (int64_t y = 0; y < s.h; ++y) {
      const T* r0 = src + (2 * y) * 2 * s.w;
      const T* r1 = r0 + 2 * s.w;
      for (int64_t xx = 0; xx < s.w; ++xx) {
        dst[y * s.w + xx] += r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1];
      }
    }
  }
}

template <typename T>
Tensor<T> depth_to_space2x(const Tensor<T>& x) {
  const Shape s = x.shape();
  if (s.c % 4 != 0) {
    throw ShapeError("depth_to_space2x: channels of " + s.str() + " not divisible by 4");
  }
  const int64_t c_out = s.c / 4;
  Tensor<T> out(Shape{s.n, c_out, 2 * s.h, 2 * s.w});
  const int64_t planes = s.n * c_out;
#pragma omp parallel for schedule(static) if (planes * 4 * s.plane() > (1 << 15))
  for (int64_t p = 0; p < planes; ++p) {
    T* dst = out.ptr() + p * 4 * s.plane();
    for (int64_t sub = 0; sub < 4; ++sub) {
      const int64_t i = sub / 2, j = sub % 2;
      const T* src = x.ptr() + (p * 4 + sub) * s.plane();
      for (int64_t y = 0; y < s.h; ++y) {
        T* row = dst + (2 * y + i) * 2 * s.w + j;
        for (int64_t xx = 0; xx < s.w; ++xx) row[2 * xx] = src[y * s.w + xx];
      }
    }
  }
  return out;
}

template <typename T>
void depth_to_space2x_backward(const Tensor<T>& grad_out, Tensor<T>& grad_x) {
  const Shape s = grad_x.shape();
  const int64_t planes = s.n * (s.c / 4);
#pragma omp parallel for schedule(static) if (planes * 4 * s.plane() > (1 << 15))
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = grad_out.ptr() + p * 4 * s.plane();
    for (int64_t sub = 0; sub < 4; ++sub) {
      const int64_t i = sub / 2, j = sub % 2;
      T* dst = grad_x.ptr() + (p * 4 + sub) * s.plane();
      for (int64_t y = 0; y < s.h; ++y) {
        const T* row = src + (2 * y + i) * 2 * s.w + j;
        for (int64_t xx = 0; xx < s.w; ++xx) dst[y * s.w + xx] += row[2 * xx];
      }
    }
  }
}

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  const Shape s = x.shape();
  const int64_t ho = s.h / 2, wo = s.w / 2;
  Tensor<T> out(Shape{s.n, s.c, ho, wo});
  const int64_t planes = s.n * s.c;
#pragma omp parallel for schedule(static) if (planes * s.plane() > (1 << 15))
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = x.ptr() + p * s.plane();
    T* dst = out.ptr() + p * ho * wo;
    for (int64_t y = 0; y < ho; ++y) {
      const T* r0 = src + 2 * y * s.w;
      const T* r1 = r0 + s.w;
      for (int64_t xx = 0; xx < wo; ++xx) {
        dst[y * wo + xx] = T(0.25) * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
      }
    }
  }
  return out;
}

template <typename T>
void avg_pool2x2_backward(const Tensor<T>& grad_out, Tensor<T>& grad_x) {
  const Shape s = grad_x.shape();
  const int64_t ho = s.h / 2, wo = s.w / 2;
  const int64_t planes = s.n * s.c;
#pragma omp parallel for schedule(static) if (planes * s.plane() > (1 << 15))
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = grad_out.ptr() + p * ho * wo;
    T* dst = grad_x.ptr() + p * s.plane();
    for (int64_t y = 0; y < ho; ++y) {
      T* r0 = dst + 2 * y * s.w;
      T* r1 = r0 + s.w;
      for (int64_t xx = 0; xx < wo; ++xx) {
        const T g = T(0.25) * src[y * wo + xx];
        r0[2 * xx] += g;
        r0[2 * xx + 1] += g;
        r1[2 * xx] += g;
        r1[2 * xx + 1] += g;
      }
    }
  }
}

template <typename T>
Tensor<T> separable_filter_valid(const Tensor<T>& x, std::span<const T> taps) {
  const Shape s = x.shape();
  const int64_t k = static_cast<int64_t>(taps.size());
  if (k < 1 || s.h < k || s.w < k) {
    throw ShapeError("separable_filter_valid: " + std::to_string(k) + "-tap filter on " + s.str());
  }
  const int64_t ho = s.h - k + 1, wo = s.w - k + 1;
  Tensor<T> out(Shape{s.n, s.c, ho, wo});
  const int64_t planes = s.n * s.c;
#pragma omp parallel
  {
    std::vector<T> tmp(static_cast<size_t>(s.h * wo));
#pragma omp for schedule(static)
    for (int64_t p = 0; p < planes; ++p) {
      const T* src = x.ptr() + p * s.plane();
      for (int64_t y = 0; y < s.h; ++y) {
        for (int64_t xx = 0; xx < wo; ++xx) {
          T acc = 0;
          for (int64_t t = 0; t < k; ++t) acc += taps[t] * src[y * s.w + xx + t];
          tmp[y * wo + xx] = acc;
        }
      }
      T* dst = out.ptr() + p * ho * wo;
      for (int64_t y = 0; y < ho; ++y) {
        for (int64_t xx = 0; xx < wo; ++xx) dst[y * wo + xx] = 0;
        for (int64_t t = 0; t < k; ++t) {
          const T* row = tmp.data() + (y + t) * wo;
          for (int64_t xx = 0; xx < wo; ++xx) dst[y * wo + xx] += taps[t] * row[xx];
        }
      }
    }
  }
  return out;
}

template <typename T>
void separable_filter_valid_backward(const Tensor<T>& grad_out, std::span<const T> taps,
                                     Tensor<T>& grad_x) {
  const Shape s = grad_x.shape();
  const int64_t k = static_cast<int64_t>(taps.size());
  const int64_t ho = s.h - k + 1, wo = s.w - k + 1;
  const int64_t planes = s.n * s.c;
#pragma omp parallel
  {
    std::vector<T> tmp(static_cast<size_t>(s.h * wo));
#pragma omp for schedule(static)
    for (int64_t p = 0; p < planes; ++p) {
      const T* g = grad_out.ptr() + p * ho * wo;
      std::fill(tmp.begin(), tmp.end(), T(0));
      for (int64_t y = 0; y < ho; ++y) {
        for (int64_t t = 0; t < k; ++t) {
          T* row = tmp.data() + (y + t) * wo;
          for (int64_t xx = 0; xx < wo; ++xx) row[xx] += taps[t] * g[y * wo + xx];
        }
      }
      T* dst = grad_x.ptr() + p * s.plane();
      for (int64_t y = 0; y < s.h; ++y) {
        for (int64_t xx = 0; xx < wo; ++xx) {
          const T v = tmp[y * wo + xx];
          for (int64_t t = 0; t < k; ++t) dst[y * s.w + xx + t] += taps[t] * v;
        }
      }
    }
  }
}

#define TREENET_INSTANTIATE(T)                                                                   \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,         \
                                    ConvGeometry);                                               \
  template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                ConvGeometry, Tensor<T>*, Tensor<T>*, Tensor<T>*);               \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                       \
  template void upsample_nearest2x_backward(const Tensor<T>&, Tensor<T>&);                       \
  template Tensor<T> depth_to_space2x(const Tensor<T>&);                                         \
  template void depth_to_space2x_backward(const Tensor<T>&, Tensor<T>&);                         \
  template Tensor<T> avg_pool2x2(const Tensor<T>&);                                              \
  template void avg_pool2x2_backward(const Tensor<T>&, Tensor<T>&);                              \
  template Tensor<T> separable_filter_valid(const Tensor<T>&, std::span<const T>);               \
  template void separable_filter_valid_backward(const Tensor<T>&, std::span<const T>, Tensor<T>&);

TREENET_INSTANTIATE(float)
TREENET_INSTANTIATE(double)
#undef TREENET_INSTANTIATE

}  // namespace treenet::kernels
