#include "treenet/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "treenet/kernels.hpp"

namespace treenet {

// ---------------------------------------------------------------------------
// Var / Tape

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value, Tape<T>* tape) {
  auto node = std::make_shared<VarNode<T>>();
  node->value = std::move(value);
  node->tape = tape;
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value) {
  auto node = std::make_shared<VarNode<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  auto v = Var<T>::constant(std::move(value), this);
  v.node()->requires_grad = true;
  return v;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss, std::span<const Var<T>> params) {
  if (consumed_) throw Error("backward: tape already consumed; call reset() first");
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be a scalar tensor");
  }
  if (ops_.empty() || loss.tape() != this) {
    throw Error("backward: loss was not recorded on this tape");
  }
  for (const auto& p : params) p.node()->grad_buffer();
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  consumed_ = true;
}

template <typename T>
void Tape<T>::reset() {
  ops_.clear();
  consumed_ = false;
}

template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::initializer_list<const Var<T>*> inputs) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
  Tape<T>* tape = nullptr;
  bool any_grad = false;
  for (const Var<T>* in : inputs) {
    if (!in || !in->defined()) continue;
    if (in->tape()) {
      if (tape && tape != in->tape()) throw Error(std::string(op) + ": inputs live on different tapes");
      tape = in->tape();
    }
    any_grad = any_grad || in->requires_grad();
  }
  auto node = std::make_shared<VarNode<T>>();
  node->value = std::move(value);
  node->tape = tape;
  node->requires_grad = tape != nullptr && any_grad;
  return Var<T>(std::move(node));
}

namespace {

template <typename T>
bool needs(const Var<T>& v) {
  return v.defined() && v.requires_grad();
}

template <typename T>
using NodePtr = std::shared_ptr<VarNode<T>>;

// Elementwise unary op: forward f(x), backward grad * df(x, y).
template <typename T, typename F, typename D>
Var<T> unary(const char* op, const Var<T>& x, F f, D df) {
  Tensor<T> out(x.shape());
  const T* xs = x.value().ptr();
  T* ys = out.ptr();
  const int64_t n = out.numel();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
  for (int64_t i = 0; i < n; ++i) ys[i] = f(xs[i]);
  Var<T> r = make_result(op, std::move(out), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node(), df] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      const T* xv = xn->value.ptr();
      const T* yv = rn->value.ptr();
      const T* g = rn->grad.ptr();
      T* gx = xn->grad_buffer().ptr();
      const int64_t m = rn->value.numel();
#pragma omp parallel for simd schedule(static) if (m > (1 << 16))
      for (int64_t i = 0; i < m; ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    });
  }
  return r;
}

struct BroadcastIndex {
  Shape out;
  std::array<int64_t, 4> sa{}, sb{};  // strides, zero on broadcast axes

  static std::array<int64_t, 4> strides(const Shape& s, const Shape& out) {
    const std::array<int64_t, 4> dims{s.n, s.c, s.h, s.w};
    const std::array<int64_t, 4> od{out.n, out.c, out.h, out.w};
    std::array<int64_t, 4> st{};
    int64_t acc = 1;
    for (int i = 3; i >= 0; --i) {
      st[i] = (dims[i] == 1 && od[i] != 1) ? 0 : acc;
      acc *= dims[i];
    }
    return st;
  }

  BroadcastIndex(const Shape& a, const Shape& b, const char* op)
      : out(broadcast_shape(op, a, b)), sa(strides(a, out)), sb(strides(b, out)) {}

  template <typename Fn>
  void for_each(Fn fn) const {
    int64_t o = 0;
    for (int64_t n = 0; n < out.n; ++n)
      for (int64_t c = 0; c < out.c; ++c)
        for (int64_t h = 0; h < out.h; ++h) {
          const int64_t ba = n * sa[0] + c * sa[1] + h * sa[2];
          const int64_t bb = n * sb[0] + c * sb[1] + h * sb[2];
          for (int64_t w = 0; w < out.w; ++w, ++o) fn(o, ba + w * sa[3], bb + w * sb[3]);
        }
  }
};

// Binary op with broadcasting. `da`/`db` give d(out)/d(a), d(out)/d(b) from (a, b).
template <typename T, typename F, typename DA, typename DB>
Var<T> binary(const char* op, const Var<T>& a, const Var<T>& b, F f, DA da, DB db) {
  const bool same = a.shape() == b.shape();
  Tensor<T> out;
  const T* av = a.value().ptr();
  const T* bv = b.value().ptr();
  if (same) {
    out = Tensor<T>(a.shape());
    T* o = out.ptr();
    const int64_t n = out.numel();
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
    for (int64_t i = 0; i < n; ++i) o[i] = f(av[i], bv[i]);
  } else {
    BroadcastIndex bi(a.shape(), b.shape(), op);
    out = Tensor<T>(bi.out);
    T* o = out.ptr();
    bi.for_each([&](int64_t io, int64_t ia, int64_t ib) { o[io] = f(av[ia], bv[ib]); });
  }
  Var<T> r = make_result(op, std::move(out), {&a, &b});
  if (r.requires_grad()) {
    r.tape()->record([an = a.node(), bn = b.node(), rn = r.node(), same, da, db, op] {
      if (rn->grad.empty()) return;
      const T* av = an->value.ptr();
      const T* bv = bn->value.ptr();
      const T* g = rn->grad.ptr();
      T* ga = an->requires_grad ? an->grad_buffer().ptr() : nullptr;
      T* gb = bn->requires_grad ? bn->grad_buffer().ptr() : nullptr;
      if (same) {
        const int64_t n = rn->value.numel();
        if (ga) {
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * da(av[i], bv[i]);
        }
        if (gb) {
#pragma omp parallel for simd schedule(static) if (n > (1 << 16))
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * db(av[i], bv[i]);
        }
        return;
      }
      BroadcastIndex bi(an->value.shape(), bn->value.shape(), op);
      bi.for_each([&](int64_t io, int64_t ia, int64_t ib) {
        if (ga) ga[ia] += g[io] * da(av[ia], bv[ib]);
        if (gb) gb[ib] += g[io] * db(av[ia], bv[ib]);
      });
    });
  }
  return r;
}

}  // namespace

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  auto dim = [&](int64_t x, int64_t y) {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ShapeError(std::string(op) + ": cannot broadcast " + a.str() + " with " + b.str());
  };
  return {dim(a.n, b.n), dim(a.c, b.c), dim(a.h, b.h), dim(a.w, b.w)};
}

// ---------------------------------------------------------------------------
// Structured ops

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int64_t stride,
              int64_t pad) {
  const kernels::ConvGeometry g{stride, pad};
  const Tensor<T>* b = bias.defined() ? &bias.value() : nullptr;
  Var<T> r = make_result("conv2d", kernels::conv2d_forward(x.value(), weight.value(), b, g),
                         {&x, &weight, &bias});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), wn = weight.node(), bn = bias.node(), rn = r.node(), g] {
      if (rn->grad.empty()) return;
      Tensor<T>* gx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
      Tensor<T>* gw = wn->requires_grad ? &wn->grad_buffer() : nullptr;
      Tensor<T>* gb = (bn && bn->requires_grad) ? &bn->grad_buffer() : nullptr;
      kernels::conv2d_backward(xn->value, wn->value, rn->grad, g, gx, gw, gb);
    });
  }
  return r;
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  Var<T> r = make_result("upsample_nearest2x", kernels::upsample_nearest2x(x.value()), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      kernels::upsample_nearest2x_backward(rn->grad, xn->grad_buffer());
    });
  }
  return r;
}

template <typename T>
Var<T> depth_to_space2x(const Var<T>& x) {
  Var<T> r = make_result("depth_to_space2x", kernels::depth_to_space2x(x.value()), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      kernels::depth_to_space2x_backward(rn->grad, xn->grad_buffer());
    });
  }
  return r;
}

template <typename T>
Var<T> avg_pool2x2(const Var<T>& x) {
  Var<T> r = make_result("avg_pool2x2", kernels::avg_pool2x2(x.value()), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      kernels::avg_pool2x2_backward(rn->grad, xn->grad_buffer());
    });
  }
  return r;
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape s = x.shape();
  if (s.h < 1 || s.w < 1) throw ShapeError("global_avg_pool: empty spatial dims in " + s.str());
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  const int64_t hw = s.plane();
  for (int64_t p = 0; p < s.n * s.c; ++p) {
    const T* src = x.value().ptr() + p * hw;
    T acc = 0;
    for (int64_t i = 0; i < hw; ++i) acc += src[i];
    out[p] = acc / static_cast<T>(hw);
  }
  Var<T> r = make_result("global_avg_pool", std::move(out), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node(), hw] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      T* gx = xn->grad_buffer().ptr();
      const int64_t planes = rn->value.numel();
      for (int64_t p = 0; p < planes; ++p) {
        const T g = rn->grad[p] / static_cast<T>(hw);
        for (int64_t i = 0; i < hw; ++i) gx[p * hw + i] += g;
      }
    });
  }
  return r;
}

template <typename T>
Var<T> separable_filter_valid(const Var<T>& x, std::vector<T> taps) {
  Var<T> r = make_result("separable_filter_valid",
                         kernels::separable_filter_valid<T>(x.value(), taps), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node(), taps = std::move(taps)] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      kernels::separable_filter_valid_backward<T>(rn->grad, taps, xn->grad_buffer());
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return unary<T>(
      "leaky_relu", x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> softplus(const Var<T>& x) {
  return unary<T>(
      "softplus", x,
      [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Var<T> log2(const Var<T>& x) {
  return unary<T>(
      "log2", x, [](T v) { return std::log2(v); },
      [](T v, T) { return T(1) / (v * static_cast<T>(M_LN2)); });
}

template <typename T>
Var<T> clamp_min(const Var<T>& x, T lo) {
  return unary<T>(
      "clamp_min", x, [lo](T v) { return v > lo ? v : lo; },
      [lo](T v, T) { return v > lo ? T(1) : T(0); });
}

template <typename T>
Var<T> pow_scalar(const Var<T>& x, T e) {
  return unary<T>(
      "pow_scalar", x, [e](T v) { return std::pow(v, e); },
      [e](T v, T) { return e * std::pow(v, e - T(1)); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& x, T s) {
  return unary<T>("mul_scalar", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "add", a, b, [](T u, T v) { return u + v; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "sub", a, b, [](T u, T v) { return u - v; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "mul", a, b, [](T u, T v) { return u * v; }, [](T, T v) { return v; },
      [](T u, T) { return u; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary<T>(
      "div", a, b, [](T u, T v) { return u / v; }, [](T, T v) { return T(1) / v; },
      [](T u, T v) { return -u / (v * v); });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape s = parts[0].shape();
  int64_t channels = 0;
  for (const auto& p : parts) {
    const Shape ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat_channels: " + ps.str() + " incompatible with " + s.str());
    }
    channels += ps.c;
  }
  Tensor<T> out(Shape{s.n, channels, s.h, s.w});
  const int64_t hw = s.plane();
  int64_t c0 = 0;
  for (const auto& p : parts) {
    const int64_t pc = p.shape().c;
    for (int64_t n = 0; n < s.n; ++n) {
      std::copy_n(p.value().ptr() + n * pc * hw, pc * hw, out.ptr() + (n * channels + c0) * hw);
    }
    c0 += pc;
  }
  // make_result takes an initializer list; resolve tape/grad over all parts here.
  Var<T> r = make_result<T>("concat_channels", std::move(out), {});
  Tape<T>* tape = nullptr;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.tape()) tape = p.tape();
    any_grad = any_grad || p.requires_grad();
  }
  r.node()->tape = tape;
  r.node()->requires_grad = tape && any_grad;
  if (r.requires_grad()) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape->record([nodes = std::move(nodes), rn = r.node(), channels, hw] {
      if (rn->grad.empty()) return;
      const int64_t batch = rn->value.shape().n;
      int64_t c0 = 0;
      for (const auto& pn : nodes) {
        const int64_t pc = pn->value.shape().c;
        if (pn->requires_grad) {
          T* g = pn->grad_buffer().ptr();
          for (int64_t n = 0; n < batch; ++n) {
            const T* src = rn->grad.ptr() + (n * channels + c0) * hw;
            T* dst = g + n * pc * hw;
            for (int64_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
          }
        }
        c0 += pc;
      }
    });
  }
  return r;
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int64_t start, int64_t count) {
  const Shape s = x.shape();
  if (start < 0 || count < 0 || start + count > s.c) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") out of range for " + s.str());
  }
  const int64_t hw = s.plane();
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  for (int64_t n = 0; n < s.n; ++n) {
    std::copy_n(x.value().ptr() + (n * s.c + start) * hw, count * hw, out.ptr() + n * count * hw);
  }
  Var<T> r = make_result("slice_channels", std::move(out), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node(), start, count, hw] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      const Shape xs = xn->value.shape();
      T* g = xn->grad_buffer().ptr();
      for (int64_t n = 0; n < xs.n; ++n) {
        const T* src = rn->grad.ptr() + n * count * hw;
        T* dst = g + (n * xs.c + start) * hw;
        for (int64_t i = 0; i < count * hw; ++i) dst[i] += src[i];
      }
    });
  }
  return r;
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Var<T> r = make_result("reshape", x.value().reshaped(shape), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      T* g = xn->grad_buffer().ptr();
      const T* src = rn->grad.ptr();
      for (int64_t i = 0; i < rn->grad.numel(); ++i) g[i] += src[i];
    });
  }
  return r;
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  // Double accumulation keeps float sums reproducible enough for bit counting.
  double acc = 0;
  for (T v : x.value().data()) acc += v;
  Var<T> r = make_result("sum", Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(acc)), {&x});
  if (r.requires_grad()) {
    r.tape()->record([xn = x.node(), rn = r.node()] {
      if (rn->grad.empty() || !xn->requires_grad) return;
      const T g = rn->grad[0];
      for (T& v : xn->grad_buffer().data()) v += g;
    });
  }
  return r;
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

#define TREENET_INSTANTIATE(T)                                                                  \
  template class Var<T>;                                                                        \
  template class Tape<T>;                                                                       \
  template Var<T> make_result(const char*, Tensor<T>, std::initializer_list<const Var<T>*>);    \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int64_t, int64_t);        \
  template Var<T> upsample_nearest2x(const Var<T>&);                                            \
  template Var<T> depth_to_space2x(const Var<T>&);                                              \
  template Var<T> avg_pool2x2(const Var<T>&);                                                   \
  template Var<T> global_avg_pool(const Var<T>&);                                               \
  template Var<T> separable_filter_valid(const Var<T>&, std::vector<T>);                        \
  template Var<T> leaky_relu(const Var<T>&, T);                                                 \
  template Var<T> sigmoid(const Var<T>&);                                                       \
  template Var<T> tanh(const Var<T>&);                                                          \
  template Var<T> softplus(const Var<T>&);                                                      \
  template Var<T> log2(const Var<T>&);                                                          \
  template Var<T> clamp_min(const Var<T>&, T);                                                  \
  template Var<T> pow_scalar(const Var<T>&, T);                                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                            \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                            \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                            \
  template Var<T> div(const Var<T>&, const Var<T>&);                                            \
  template Var<T> add_scalar(const Var<T>&, T);                                                 \
  template Var<T> mul_scalar(const Var<T>&, T);                                                 \
  template Var<T> concat_channels(std::span<const Var<T>>);                                     \
  template Var<T> slice_channels(const Var<T>&, int64_t, int64_t);                              \
  template Var<T> reshape(const Var<T>&, Shape);                                                \
  template Var<T> sum(const Var<T>&);                                                           \
  template Var<T> mean(const Var<T>&);

TREENET_INSTANTIATE(float)
TREENET_INSTANTIATE(double)
#undef TREENET_INSTANTIATE

}  // namespace treenet
