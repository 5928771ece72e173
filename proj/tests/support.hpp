#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "treenet/blocks.hpp"

namespace treenet::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

struct GradCheck {
  double max_rel_err = 0;
  std::string worst;
};

/// Compares reverse-mode gradients of `f` against central differences with step h.
/// `f` maps the input Vars to a scalar; parameters are perturbed in place.
/// Errors are ||analytic - numeric|| / max(||analytic||, ||numeric||) over a sample
/// of entries of each tensor (absolute when both norms vanish).
inline GradCheck gradcheck(std::vector<Tensor<double>> inputs, const std::vector<Parameter<double>*>& params,
                           const std::function<Var<double>(std::span<const Var<double>>)>& f, Rng& rng,
                           int samples = 10, double h = 1e-5) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  std::vector<Var<double>> pvars;
  for (auto* p : params) pvars.push_back(p->var);
  tape.backward(f(vars), pvars);

  auto evaluate = [&] {
    std::vector<Var<double>> cs;
    for (const auto& x : inputs) cs.push_back(Var<double>::constant(x));
    return f(cs).value()[0];
  };

  GradCheck result;
  auto check = [&](Tensor<double>& value, const Tensor<double>& grad, const std::string& name) {
    std::vector<int64_t> idx;
    if (value.numel() <= samples) {
      for (int64_t i = 0; i < value.numel(); ++i) idx.push_back(i);
    } else {
      for (int s = 0; s < samples; ++s) idx.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(value.numel()))));
    }
    double diff = 0, na = 0, nn = 0;
    for (int64_t i : idx) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = evaluate();
      value[i] = saved - h;
      const double down = evaluate();
      value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grad.empty() ? 0.0 : grad[i];
      diff += (analytic - numeric) * (analytic - numeric);
      na += analytic * analytic;
      nn += numeric * numeric;
    }
    const double den = std::max(std::sqrt(na), std::sqrt(nn));
    const double err = den > 1e-10 ? std::sqrt(diff) / den : std::sqrt(diff);
    if (err >= result.max_rel_err) {
      result.max_rel_err = err;
      result.worst = name;
    }
  };
  for (size_t k = 0; k < inputs.size(); ++k) check(inputs[k], vars[k].grad(), "input" + std::to_string(k));
  for (auto* p : params) {
    Tensor<double> grad = p->grad();
    check(p->mutable_value(), grad, p->name);
  }
  for (auto* p : params) p->clear_grad();
  return result;
}

/// sum(out * r) with a fixed random r, so every output element carries a distinct weight.
inline Var<double> weighted_sum(const Var<double>& out, uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, Var<double>::constant(random_tensor(out.shape(), rng))));
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("treenet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::vector<uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

}  // namespace treenet::testing
