#include "treenet/optim.hpp"

#include <cmath>

namespace treenet {

template <typename T>
void adam_step(std::span<Parameter<T>* const> params, const AdamOptions& opt) {
  for (Parameter<T>* p : params) {
    if (!p->has_grad()) throw Error("adam_step: parameter '" + p->name + "' has no gradient");
  }
  for (Parameter<T>* p : params) {
    ++p->step_count;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p->step_count));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p->step_count));
    T* w = p->mutable_value().ptr();
    const T* g = p->grad().ptr();
    T* m = p->moment1.ptr();
    T* v = p->moment2.ptr();
    const int64_t n = p->value().numel();
    for (int64_t i = 0; i < n; ++i) {
      const double gi = g[i];
      const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
      const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = opt.lr * (mi / bc1) / (std::sqrt(vi / bc2) + opt.eps);
      w[i] = static_cast<T>(w[i] - update);
    }
    p->clear_grad();
  }
}

template <typename T>
double global_grad_norm(std::span<Parameter<T>* const> params) {
  double acc = 0;
  for (const Parameter<T>* p : params) {
    if (!p->has_grad()) continue;
    for (T g : p->grad().data()) acc += static_cast<double>(g) * g;
  }
  return std::sqrt(acc);
}

template <typename T>
void scale_grads(std::span<Parameter<T>* const> params, double factor) {
  for (Parameter<T>* p : params) {
    if (!p->has_grad()) continue;
    for (T& g : p->var.mutable_grad().data()) g = static_cast<T>(g * factor);
  }
}

double Rng::normal() {
  // Box-Muller; one draw per call keeps the stream position easy to reason about.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template void adam_step<float>(std::span<Parameter<float>* const>, const AdamOptions&);
template void adam_step<double>(std::span<Parameter<double>* const>, const AdamOptions&);
template double global_grad_norm<float>(std::span<Parameter<float>* const>);
template double global_grad_norm<double>(std::span<Parameter<double>* const>);
template void scale_grads<float>(std::span<Parameter<float>* const>, double);
template void scale_grads<double>(std::span<Parameter<double>* const>, double);

}  // namespace treenet
