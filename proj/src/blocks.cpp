#include "treenet/blocks.hpp"

#include <cmath>

#include "treenet/kernels.hpp"

namespace treenet {

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int64_t cin, int64_t cout, int64_t kernel,
                  int64_t stride, Rng& rng)
    : cin_(cin), cout_(cout), kernel_(kernel), stride_(stride) {
  if (cin < 1 || cout < 1 || kernel < 1 || stride < 1) {
    throw ShapeError("Conv2d '" + name + "': invalid geometry");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel * kernel));
  Tensor<T> w(Shape{cout, cin, kernel, kernel});
  for (T& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> b(Shape{1, cout, 1, 1});
  for (T& v : b.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  weight = Parameter<T>(name + ".weight", std::move(w));
  bias = Parameter<T>(name + ".bias", std::move(b));
}

template <typename T>
void Conv2d<T>::set_kernel_mask(Tensor<T> mask) {
  require_same_shape("Conv2d::set_kernel_mask", mask.shape(), weight.value().shape());
  mask_ = std::move(mask);
}

template <typename T>
Var<T> Conv2d<T>::forward(const Var<T>& x) const {
  if (mask_.empty()) return conv2d(x, weight.var, bias.var, stride_, kernel_ / 2);
  return conv2d(x, mul(weight.var, Var<T>::constant(mask_, x.tape())), bias.var, stride_, kernel_ / 2);
}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& in) const {
  return kernels::conv2d_output_shape("Conv2d", in, weight.value().shape(),
                                      {stride_, kernel_ / 2});
}

template <typename T>
MacCount Conv2d<T>::count(const Shape& in) const {
  const Shape out = output_shape(in);
  return {kernel_ * kernel_ * cin_ * cout_ * out.h * out.w, weight.value().numel() + cout_};
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---------------------------------------------------------------------------

template <typename T>
ResidualDownBlock<T>::ResidualDownBlock(const std::string& name, int64_t cin, int64_t cout,
                                        Rng& rng)
    : conv1(name + ".conv1", cin, cout, 3, 2, rng),
      conv2(name + ".conv2", cout, cout, 3, 1, rng),
      skip(name + ".skip", cin, cout, 1, 2, rng) {}

template <typename T>
Var<T> ResidualDownBlock<T>::main_path(const Var<T>& x) const {
  return conv2.forward(leaky_relu(conv1.forward(x)));
}

template <typename T>
Var<T> ResidualDownBlock<T>::skip_path(const Var<T>& x) const {
  return skip.forward(x);
}

template <typename T>
Var<T> ResidualDownBlock<T>::forward(const Var<T>& x) const {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("res_down_apply: odd spatial dims in " + s.str() +
                     " (inputs must be padded to a multiple of 64)");
  }
  return add(main_path(x), skip_path(x));
}

template <typename T>
Shape ResidualDownBlock<T>::output_shape(const Shape& in) const {
  return conv2.output_shape(conv1.output_shape(in));
}

template <typename T>
MacCount ResidualDownBlock<T>::count(const Shape& in) const {
  const Shape mid = conv1.output_shape(in);
  return conv1.count(in) + conv2.count(mid) + skip.count(in);
}

template <typename T>
void ResidualDownBlock<T>::collect(ParamList<T>& out) {
  conv1.collect(out);
  conv2.collect(out);
  skip.collect(out);
}

// ---------------------------------------------------------------------------

template <typename T>
ResidualUpBlock<T>::ResidualUpBlock(const std::string& name, int64_t cin, int64_t cout, Rng& rng)
    : up1(name + ".up1", cin, cout, rng),
      up_skip(name + ".up_skip", cin, cout, rng),
      conv2(name + ".conv2", cout, cout, 3, 1, rng) {}

template <typename T>
Var<T> ResidualUpBlock<T>::main_path(const Var<T>& x) const {
  return conv2.forward(leaky_relu(up1.forward(x)));
}

template <typename T>
Var<T> ResidualUpBlock<T>::skip_path(const Var<T>& x) const {
  return up_skip.forward(x);
}

template <typename T>
Var<T> ResidualUpBlock<T>::forward(const Var<T>& x) const {
  return add(main_path(x), skip_path(x));
}

template <typename T>
Shape ResidualUpBlock<T>::output_shape(const Shape& in) const {
  return {in.n, conv2.out_channels(), 2 * in.h, 2 * in.w};
}

template <typename T>
MacCount ResidualUpBlock<T>::count(const Shape& in) const {
  return up1.count(in) + up_skip.count(in) + conv2.count(output_shape(in));
}

template <typename T>
void ResidualUpBlock<T>::collect(ParamList<T>& out) {
  up1.collect(out);
  conv2.collect(out);
  up_skip.collect(out);
}

// ---------------------------------------------------------------------------

template <typename T>
AFFBlock<T>::AFFBlock(const std::string& name, int64_t channels, int64_t reduction, Rng& rng) {
  if (reduction < 1 || channels % reduction != 0) {
    throw ShapeError("AFFBlock '" + name + "': channels " + std::to_string(channels) +
                     " not divisible by reduction " + std::to_string(reduction));
  }
  const int64_t inner = channels / reduction;
  local1 = Conv2d<T>(name + ".local1", channels, inner, 1, 1, rng);
  local2 = Conv2d<T>(name + ".local2", inner, channels, 1, 1, rng);
  global1 = Conv2d<T>(name + ".global1", channels, inner, 1, 1, rng);
  global2 = Conv2d<T>(name + ".global2", inner, channels, 1, 1, rng);
}

template <typename T>
Var<T> AFFBlock<T>::gate(const Var<T>& x, const Var<T>& y) const {
  const Var<T> s = add(x, y);
  const Var<T> local = local2.forward(leaky_relu(local1.forward(s)));
  const Var<T> global = global2.forward(leaky_relu(global1.forward(global_avg_pool(s))));
  return sigmoid(add(local, global));
}

template <typename T>
Var<T> AFFBlock<T>::forward(const Var<T>& x, const Var<T>& y) const {
  require_same_shape("aff_fuse", x.shape(), y.shape());
  const Var<T> m = gate(x, y);
  const Var<T> one_minus_m = add_scalar(mul_scalar(m, T(-1)), T(1));
  return add(mul(m, x), mul(one_minus_m, y));
}

template <typename T>
MacCount AFFBlock<T>::count(const Shape& in) const {
  const Shape pooled{in.n, in.c, 1, 1};
  const Shape inner{in.n, local1.out_channels(), in.h, in.w};
  const Shape inner_pooled{in.n, global1.out_channels(), 1, 1};
  return local1.count(in) + local2.count(inner) + global1.count(pooled) +
         global2.count(inner_pooled);
}

template <typename T>
void AFFBlock<T>::collect(ParamList<T>& out) {
  local1.collect(out);
  local2.collect(out);
  global1.collect(out);
  global2.collect(out);
}

template class Conv2d<float>;
template class Conv2d<double>;
template class ResidualDownBlock<float>;
template class ResidualDownBlock<double>;
template class ResidualUpBlock<float>;
template class ResidualUpBlock<double>;
template class AFFBlock<float>;
template class AFFBlock<double>;

}  // namespace treenet
