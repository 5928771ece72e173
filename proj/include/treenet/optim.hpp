#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "treenet/autodiff.hpp"

namespace treenet {

/// A named learnable tensor with its Adam state.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> moment1;
  Tensor<T> moment2;
  Var<T> var;
  int64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> value)
      : name(std::move(n)), moment1(value.shape()), moment2(value.shape()) {
    var = Var<T>::parameter(std::move(value));
  }

  const Tensor<T>& value() const { return var.value(); }
  Tensor<T>& mutable_value() { return var.mutable_value(); }
  const Tensor<T>& grad() const { return var.grad(); }
  bool has_grad() const { return !var.grad().empty(); }
  void zero_grad() { var.mutable_grad() = Tensor<T>(var.shape()); }
  void clear_grad() { var.mutable_grad() = Tensor<T>(); }
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update; clears the gradients afterwards.
/// Throws when a parameter carries no gradient.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, const AdamOptions& opt);

/// sqrt of the sum of squared gradients over all parameters (missing grads count as zero).
template <typename T>
double global_grad_norm(std::span<Parameter<T>* const> params);

template <typename T>
void scale_grads(std::span<Parameter<T>* const> params, double factor);

/// Deterministic generator used for initialization, noise and shuffling. The
/// uniform mapping is done by hand so draws do not depend on the standard
/// library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return static_cast<uint64_t>(uniform() * static_cast<double>(n)); }
  double normal();
  uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace treenet
