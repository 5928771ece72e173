// Serial, index-by-index versions of the parallel kernels. Slow on purpose:
// every loop mirrors the mathematical definition directly.

#include "treenet/kernels.hpp"

namespace treenet::kernels::reference {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         ConvGeometry g) {
  const Shape xs = x.shape(), ws = weight.shape();
  const Shape os = conv2d_output_shape("conv2d", xs, ws, g);
  Tensor<T> out(os);
  for (int64_t n = 0; n < os.n; ++n)
    for (int64_t co = 0; co < os.c; ++co)
      for (int64_t oy = 0; oy < os.h; ++oy)
        for (int64_t ox = 0; ox < os.w; ++ox) {
          T acc = bias ? (*bias)[co] : T(0);
          for (int64_t ci = 0; ci < xs.c; ++ci)
            for (int64_t ky = 0; ky < ws.h; ++ky)
              for (int64_t kx = 0; kx < ws.w; ++kx) {
                const int64_t iy = oy * g.stride - g.pad + ky;
                const int64_t ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += weight.at(co, ci, ky, kx) * x.at(n, ci, iy, ix);
              }
          out.at(n, co, oy, ox) = acc;
        }
  return out;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     ConvGeometry g, Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b) {
  const Shape xs = x.shape(), ws = weight.shape(), os = grad_out.shape();
  for (int64_t n = 0; n < os.n; ++n)
    for (int64_t co = 0; co < os.c; ++co)
      for (int64_t oy = 0; oy < os.h; ++oy)
        for (int64_t ox = 0; ox < os.w; ++ox) {
          const T go = grad_out.at(n, co, oy, ox);
          if (grad_b) (*grad_b)[co] += go;
          for (int64_t ci = 0; ci < xs.c; ++ci)
            for (int64_t ky = 0; ky < ws.h; ++ky)
              for (int64_t kx = 0; kx < ws.w; ++kx) {
                const int64_t iy = oy * g.stride - g.pad + ky;
                const int64_t ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                if (grad_w) grad_w->at(co, ci, ky, kx) += go * x.at(n, ci, iy, ix);
                if (grad_x) grad_x->at(n, ci, iy, ix) += go * weight.at(co, ci, ky, kx);
              }
        }
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, 2 * s.h, 2 * s.w});
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t y = 0; y < 2 * s.h; ++y)
        for (int64_t xx = 0; xx < 2 * s.w; ++xx) out.at(n, c, y, xx) = x.at(n, c, y / 2, xx / 2);
  return out;
}

template <typename T>
Tensor<T> depth_to_space2x(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c / 4, 2 * s.h, 2 * s.w});
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c / 4; ++c)
      for (int64_t y = 0; y < 2 * s.h; ++y)
        for (int64_t xx = 0; xx < 2 * s.w; ++xx)
          out.at(n, c, y, xx) = x.at(n, c * 4 + (y % 2) * 2 + (xx % 2), y / 2, xx / 2);
  return out;
}

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t y = 0; y < s.h / 2; ++y)
        for (int64_t xx = 0; xx < s.w / 2; ++xx)
          out.at(n, c, y, xx) = (x.at(n, c, 2 * y, 2 * xx) + x.at(n, c, 2 * y, 2 * xx + 1) +
                                 x.at(n, c, 2 * y + 1, 2 * xx) + x.at(n, c, 2 * y + 1, 2 * xx + 1)) /
                                T(4);
  return out;
}

template <typename T>
Tensor<T> separable_filter_valid(const Tensor<T>& x, std::span<const T> taps) {
  const Shape s = x.shape();
  const int64_t k = static_cast<int64_t>(taps.size());
  Tensor<T> out(Shape{s.n, s.c, s.h - k + 1, s.w - k + 1});
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t y = 0; y < s.h - k + 1; ++y)
        for (int64_t xx = 0; xx < s.w - k + 1; ++xx) {
          T acc = 0;
          for (int64_t u = 0; u < k; ++u)
            for (int64_t v = 0; v < k; ++v) acc += taps[u] * taps[v] * x.at(n, c, y + u, xx + v);
          out.at(n, c, y, xx) = acc;
        }
  return out;
}

#define TREENET_INSTANTIATE(T)                                                                  \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,        \
                                    ConvGeometry);                                              \
  template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                ConvGeometry, Tensor<T>*, Tensor<T>*, Tensor<T>*);              \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                      \
  template Tensor<T> depth_to_space2x(const Tensor<T>&);                                        \
  template Tensor<T> avg_pool2x2(const Tensor<T>&);                                             \
  template Tensor<T> separable_filter_valid(const Tensor<T>&, std::span<const T>);

TREENET_INSTANTIATE(float)
TREENET_INSTANTIATE(double)
#undef TREENET_INSTANTIATE

}  // namespace treenet::kernels::reference
