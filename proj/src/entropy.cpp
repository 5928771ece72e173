#include "treenet/entropy.hpp"

#include <array>
#include <cmath>

namespace treenet {
namespace {

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
double std_normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus_d(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

}  // namespace

template <typename T>
Tensor<T> round_half_even(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::nearbyint(x[i]);
  return out;
}

template <typename T>
Var<T> quantize(const Var<T>& y, QuantMode mode, Rng* rng, const Var<T>* mean) {
  switch (mode) {
    case QuantMode::noise: {
      if (!rng) throw Error("quantize: noise mode needs a random generator");
      Tensor<T> u(y.shape());
      for (T& v : u.data()) v = static_cast<T>(rng->uniform() - 0.5);
      return add(y, Var<T>::constant(std::move(u)));
    }
    case QuantMode::round:
      return Var<T>::constant(round_half_even(y.value()));
    case QuantMode::round_around_mean: {
      if (!mean || !mean->defined()) throw Error("quantize: round_around_mean requires a mean");
      require_same_shape("quantize", y.shape(), mean->shape());
      Tensor<T> out(y.shape());
      const Tensor<T>& m = mean->value();
      for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::nearbyint(y.value()[i] - m[i]) + m[i];
      return Var<T>::constant(std::move(out));
    }
  }
  throw Error("quantize: unknown mode");
}

double gaussian_bin_probability(double k, double sigma) {
  const double s = std::max(sigma, kScaleFloor);
  const double v = std::abs(k);
  return std_normal_cdf((0.5 - v) / s) - std_normal_cdf((-0.5 - v) / s);
}

template <typename T>
Var<T> gaussian_likelihood(const Var<T>& y, const Var<T>& mu, const Var<T>& sigma,
                           double sigma_min) {
  require_same_shape("gaussian_likelihood", y.shape(), mu.shape());
  require_same_shape("gaussian_likelihood", y.shape(), sigma.shape());
  const int64_t n = y.value().numel();
  Tensor<T> out(y.shape());
  {
    const T* yv = y.value().ptr();
    const T* mv = mu.value().ptr();
    const T* sv = sigma.value().ptr();
    for (int64_t i = 0; i < n; ++i) {
      const double s = std::max<double>(sv[i], sigma_min);
      const double v = std::abs(static_cast<double>(yv[i]) - mv[i]);
      const double p = std_normal_cdf((0.5 - v) / s) - std_normal_cdf((-0.5 - v) / s);
      out[i] = static_cast<T>(std::max(p, kLikelihoodFloor));
    }
  }
  Var<T> r = make_result("gaussian_likelihood", std::move(out), {&y, &mu, &sigma});
  if (!r.requires_grad()) return r;
  r.tape()->record([yn = y.node(), mn = mu.node(), sn = sigma.node(), rn = r.node(), sigma_min, n] {
    if (rn->grad.empty()) return;
    T* gy = yn->requires_grad ? yn->grad_buffer().ptr() : nullptr;
    T* gm = mn->requires_grad ? mn->grad_buffer().ptr() : nullptr;
    T* gs = sn->requires_grad ? sn->grad_buffer().ptr() : nullptr;
    const T* yv = yn->value.ptr();
    const T* mv = mn->value.ptr();
    const T* sv = sn->value.ptr();
    for (int64_t i = 0; i < n; ++i) {
      const double g = rn->grad[i];
      const double raw_s = sv[i];
      const double s = std::max(raw_s, sigma_min);
      const double d = static_cast<double>(yv[i]) - mv[i];
      const double v = std::abs(d);
      const double a = (0.5 - v) / s, b = (-0.5 - v) / s;
      const double p = std_normal_cdf(a) - std_normal_cdf(b);
      if (p < kLikelihoodFloor && g >= 0) continue;
      const double pa = std_normal_pdf(a), pb = std_normal_pdf(b);
      const double dp_dv = (pb - pa) / s;
      const double dp_ds = (b * pb - a * pa) / s;
      const double sign = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      if (gy) gy[i] += static_cast<T>(g * dp_dv * sign);
      if (gm) gm[i] -= static_cast<T>(g * dp_dv * sign);
      const double gsig = g * dp_ds;
      if (gs && (raw_s >= sigma_min || gsig < 0)) gs[i] += static_cast<T>(gsig);
    }
  });
  return r;
}

// ---------------------------------------------------------------------------
// Factorized prior

namespace {

constexpr int kL = 4;
constexpr int kW[kL + 1] = {1, 3, 3, 3, 1};

// Double-precision snapshot of the prior's constrained parameters.
struct PriorView {
  int64_t channels = 0;
  std::array<std::vector<double>, kL> raw_m, sp, bias;
  std::array<std::vector<double>, kL - 1> raw_f, tf;

  template <typename T>
  explicit PriorView(const FactorizedPrior<T>& p) : channels(p.channels()) {
    for (int k = 0; k < kL; ++k) {
      for (T v : p.matrices[k].value().data()) {
        raw_m[k].push_back(v);
        sp[k].push_back(softplus_d(v));
      }
      for (T v : p.biases[k].value().data()) bias[k].push_back(v);
      if (k < kL - 1) {
        for (T v : p.factors[k].value().data()) {
          raw_f[k].push_back(v);
          tf[k].push_back(std::tanh(static_cast<double>(v)));
        }
      }
    }
  }
};

struct PriorTrace {
  double h[kL + 1][3];  // layer inputs; h[kL][0] is the logit
  double t[kL][3];      // tanh of pre-residual outputs
};

double prior_logit(const PriorView& pv, int64_t c, double v, PriorTrace* tr) {
  double h[3] = {v, 0, 0};
  PriorTrace local;
  PriorTrace& trace = tr ? *tr : local;
  for (int k = 0; k < kL; ++k) {
    const int wi = kW[k], wo = kW[k + 1];
    for (int j = 0; j < wi; ++j) trace.h[k][j] = h[j];
    double out[3];
    for (int i = 0; i < wo; ++i) {
      double u = pv.bias[k][c * wo + i];
      for (int j = 0; j < wi; ++j) u += pv.sp[k][(c * wo + i) * wi + j] * h[j];
      if (k < kL - 1) {
        const double t = std::tanh(u);
        trace.t[k][i] = t;
        u += pv.tf[k][c * wo + i] * t;
      }
      out[i] = u;
    }
    for (int i = 0; i < wo; ++i) h[i] = out[i];
  }
  trace.h[kL][0] = h[0];
  return h[0];
}

struct PriorGrads {
  std::array<std::vector<double>, kL> m, b;
  std::array<std::vector<double>, kL - 1> f;

  explicit PriorGrads(const PriorView& pv) {
    for (int k = 0; k < kL; ++k) {
      m[k].assign(pv.sp[k].size(), 0.0);
      b[k].assign(pv.bias[k].size(), 0.0);
      if (k < kL - 1) f[k].assign(pv.tf[k].size(), 0.0);
    }
  }
};

// Backpropagates d(loss)/d(logit) = g; returns d(loss)/d(v).
double prior_logit_backward(const PriorView& pv, int64_t c, const PriorTrace& tr, double g,
                            PriorGrads& grads) {
  double dh[3] = {g, 0, 0};
  for (int k = kL - 1; k >= 0; --k) {
    const int wi = kW[k], wo = kW[k + 1];
    double du[3];
    for (int i = 0; i < wo; ++i) {
      if (k < kL - 1) {
        const double t = tr.t[k][i];
        const int64_t fi = c * wo + i;
        du[i] = dh[i] * (1.0 + pv.tf[k][fi] * (1.0 - t * t));
        const double tf = pv.tf[k][fi];
        grads.f[k][fi] += dh[i] * t * (1.0 - tf * tf);
      } else {
        du[i] = dh[i];
      }
    }
    double dprev[3] = {0, 0, 0};
    for (int i = 0; i < wo; ++i) {
      grads.b[k][c * wo + i] += du[i];
      for (int j = 0; j < wi; ++j) {
        const int64_t mi = (c * wo + i) * wi + j;
        grads.m[k][mi] += du[i] * tr.h[k][j] * logistic(pv.raw_m[k][mi]);
        dprev[j] += du[i] * pv.sp[k][mi];
      }
    }
    for (int j = 0; j < wi; ++j) dh[j] = dprev[j];
  }
  return dh[0];
}

struct BinProbability {
  double p;
  double dp_dupper;
  double dp_dlower;
};

BinProbability bin_from_logits(double lower, double upper) {
  if (upper < lower) {
    throw Error("factorized_likelihood: non-monotone CDF (upper logit " + std::to_string(upper) +
                " < lower logit " + std::to_string(lower) + ")");
  }
  // Evaluate on the side of the sigmoid where the difference is well conditioned.
  const double sgn = (lower + upper > 0) ? -1.0 : 1.0;
  const double su = logistic(sgn * upper), sl = logistic(sgn * lower);
  return {sgn * (su - sl), su * (1 - su), -sl * (1 - sl)};
}

}  // namespace

template <typename T>
FactorizedPrior<T>::FactorizedPrior(const std::string& name, int64_t channels, Rng& rng,
                                    double init_scale)
    : channels_(channels) {
  const double scale = std::pow(init_scale, 1.0 / (kL + 1 - 1));
  for (int k = 0; k < kL; ++k) {
    const int64_t wi = kW[k], wo = kW[k + 1];
    const double init = std::log(std::expm1(1.0 / scale / static_cast<double>(wo)));
    matrices.emplace_back(name + ".matrix" + std::to_string(k),
                          Tensor<T>(Shape{channels, wo, wi, 1}, static_cast<T>(init)));
    Tensor<T> b(Shape{channels, wo, 1, 1});
    for (T& v : b.data()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
    biases.emplace_back(name + ".bias" + std::to_string(k), std::move(b));
    if (k < kL - 1) {
      factors.emplace_back(name + ".factor" + std::to_string(k), Tensor<T>(Shape{channels, wo, 1, 1}));
    }
  }
}

template <typename T>
int64_t FactorizedPrior<T>::param_count() const {
  int64_t n = 0;
  for (const auto& p : matrices) n += p.value().numel();
  for (const auto& p : biases) n += p.value().numel();
  for (const auto& p : factors) n += p.value().numel();
  return n;
}

template <typename T>
void FactorizedPrior<T>::collect(ParamList<T>& out) {
  for (int k = 0; k < kL; ++k) {
    out.push_back(&matrices[k]);
    out.push_back(&biases[k]);
    if (k < kL - 1) out.push_back(&factors[k]);
  }
}

template <typename T>
double FactorizedPrior<T>::cdf_logit(int64_t c, double v) const {
  return prior_logit(PriorView(*this), c, v, nullptr);
}

template <typename T>
double FactorizedPrior<T>::cdf(int64_t c, double v) const {
  return logistic(cdf_logit(c, v));
}

template <typename T>
std::vector<double> FactorizedPrior<T>::pmf(int64_t c, int64_t lo, int64_t hi) const {
  const PriorView pv(*this);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(hi - lo + 1));
  for (int64_t k = lo; k <= hi; ++k) {
    const double lower = prior_logit(pv, c, static_cast<double>(k) - 0.5, nullptr);
    const double upper = prior_logit(pv, c, static_cast<double>(k) + 0.5, nullptr);
    out.push_back(bin_from_logits(lower, upper).p);
  }
  return out;
}

template <typename T>
Var<T> FactorizedPrior<T>::likelihood(const Var<T>& z) const {
  const Shape s = z.shape();
  if (s.c != channels_) {
    throw ShapeError("factorized_likelihood: input " + s.str() + " but prior has " +
                     std::to_string(channels_) + " channels");
  }
  const PriorView pv(*this);
  Tensor<T> out(s);
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t i = 0; i < s.plane(); ++i) {
        const int64_t idx = (n * s.c + c) * s.plane() + i;
        const double v = z.value()[idx];
        const double lower = prior_logit(pv, c, v - 0.5, nullptr);
        const double upper = prior_logit(pv, c, v + 0.5, nullptr);
        out[idx] = static_cast<T>(std::max(bin_from_logits(lower, upper).p, kLikelihoodFloor));
      }

  Var<T> r = make_result("factorized_likelihood", std::move(out), {&z});
  bool params_need_grad = false;
  for (const auto& p : matrices) params_need_grad = params_need_grad || p.var.requires_grad();
  if (z.tape() && params_need_grad) r.node()->requires_grad = true;
  if (!r.requires_grad()) return r;

  std::vector<std::shared_ptr<VarNode<T>>> mats, bs, fs;
  for (const auto& p : matrices) mats.push_back(p.var.node());
  for (const auto& p : biases) bs.push_back(p.var.node());
  for (const auto& p : factors) fs.push_back(p.var.node());
  const FactorizedPrior<T>* self = this;
  r.tape()->record([self, zn = z.node(), rn = r.node(), mats, bs, fs] {
    if (rn->grad.empty()) return;
    const PriorView pv(*self);
    PriorGrads grads(pv);
    const Shape s = zn->value.shape();
    T* gz = zn->requires_grad ? zn->grad_buffer().ptr() : nullptr;
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t c = 0; c < s.c; ++c)
        for (int64_t i = 0; i < s.plane(); ++i) {
          const int64_t idx = (n * s.c + c) * s.plane() + i;
          const double g = rn->grad[idx];
          const double v = zn->value[idx];
          PriorTrace tl, tu;
          const double lower = prior_logit(pv, c, v - 0.5, &tl);
          const double upper = prior_logit(pv, c, v + 0.5, &tu);
          const BinProbability bp = bin_from_logits(lower, upper);
          if (bp.p < kLikelihoodFloor && g >= 0) continue;
          const double dv = prior_logit_backward(pv, c, tu, g * bp.dp_dupper, grads) +
                            prior_logit_backward(pv, c, tl, g * bp.dp_dlower, grads);
          if (gz) gz[idx] += static_cast<T>(dv);
        }
    auto flush = [](const std::shared_ptr<VarNode<T>>& node, const std::vector<double>& g) {
      if (!node->requires_grad) return;
      T* dst = node->grad_buffer().ptr();
      for (size_t i = 0; i < g.size(); ++i) dst[i] += static_cast<T>(g[i]);
    };
    for (int k = 0; k < kL; ++k) {
      flush(mats[k], grads.m[k]);
      flush(bs[k], grads.b[k]);
      if (k < kL - 1) flush(fs[k], grads.f[k]);
    }
  });
  return r;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> checkerboard_mask(const Shape& shape, bool anchors) {
  Tensor<T> m(Shape{1, 1, shape.h, shape.w});
  for (int64_t r = 0; r < shape.h; ++r)
    for (int64_t c = 0; c < shape.w; ++c) m.at(0, 0, r, c) = (is_anchor(r, c) == anchors) ? T(1) : T(0);
  return m;
}

template <typename T>
EntropyBottleneck<T>::EntropyBottleneck(const std::string& name, const EntropyConfig& cfg,
                                        Rng& rng)
    : cfg_(cfg) {
  const int64_t lc = cfg.latent_channels, hc = cfg.hyper_channels;
  const int64_t hc_mid = hc * 3 / 2;
  prior = FactorizedPrior<T>(name + ".prior", hc, rng);
  ha1 = Conv2d<T>(name + ".ha1", lc, hc, 3, 1, rng);
  ha2 = Conv2d<T>(name + ".ha2", hc, hc, 3, 2, rng);
  ha3 = Conv2d<T>(name + ".ha3", hc, hc, 3, 2, rng);
  hs1 = Conv2d<T>(name + ".hs1", hc, hc, 3, 1, rng);
  hs2 = SubpelConv<T>(name + ".hs2", hc, hc, rng);
  hs3 = Conv2d<T>(name + ".hs3", hc, hc_mid, 3, 1, rng);
  hs4 = SubpelConv<T>(name + ".hs4", hc_mid, hc_mid, rng);
  hs5 = Conv2d<T>(name + ".hs5", hc_mid, 2 * lc, 3, 1, rng);
  context = Conv2d<T>(name + ".context", lc, 2 * lc, cfg.context_kernel, 1, rng);
  Tensor<T> mask(context.weight.value().shape());
  for (int64_t o = 0; o < mask.shape().n; ++o)
    for (int64_t i = 0; i < mask.shape().c; ++i)
      for (int64_t ky = 0; ky < mask.shape().h; ++ky)
        for (int64_t kx = 0; kx < mask.shape().w; ++kx)
          mask.at(o, i, ky, kx) = ((ky + kx) % 2 == 1) ? T(1) : T(0);
  context.set_kernel_mask(std::move(mask));
  ep1 = Conv2d<T>(name + ".ep1", 4 * lc, lc * 10 / 3, 1, 1, rng);
  ep2 = Conv2d<T>(name + ".ep2", lc * 10 / 3, lc * 8 / 3, 1, 1, rng);
  ep3 = Conv2d<T>(name + ".ep3", lc * 8 / 3, 2 * lc, 1, 1, rng);
}

template <typename T>
Var<T> EntropyBottleneck<T>::hyper_analysis(const Var<T>& y) const {
  const Shape s = y.shape();
  if (s.c != cfg_.latent_channels || s.h % 4 != 0 || s.w % 4 != 0) {
    throw ShapeError("hyper_roundtrip: latent " + s.str() + " must have " +
                     std::to_string(cfg_.latent_channels) +
                     " channels and spatial dims divisible by 4");
  }
  return ha3.forward(leaky_relu(ha2.forward(leaky_relu(ha1.forward(y)))));
}

template <typename T>
Var<T> EntropyBottleneck<T>::hyper_synthesis(const Var<T>& z_hat) const {
  Var<T> h = leaky_relu(hs1.forward(z_hat));
  h = leaky_relu(hs2.forward(h));
  h = leaky_relu(hs3.forward(h));
  h = leaky_relu(hs4.forward(h));
  return hs5.forward(h);
}

template <typename T>
GaussianParams<T> EntropyBottleneck<T>::checkerboard_params(const Var<T>& y_partial,
                                                            const Var<T>& features) const {
  const Shape ys = y_partial.shape(), fs = features.shape();
  const int64_t lc = cfg_.latent_channels;
  if (ys.c != lc || fs.c != 2 * lc || ys.n != fs.n || ys.h != fs.h || ys.w != fs.w) {
    throw ShapeError("checkerboard_params: mask misalignment between latent " + ys.str() +
                     " and hyper features " + fs.str());
  }
  const Var<T> anchors_only =
      mul(y_partial, Var<T>::constant(checkerboard_mask<T>(ys, /*anchors=*/true)));
  const Var<T> ctx =
      mul(context.forward(anchors_only), Var<T>::constant(checkerboard_mask<T>(ys, false)));
  const std::array<Var<T>, 2> parts{features, ctx};
  Var<T> h = leaky_relu(ep1.forward(concat_channels<T>(parts)));
  h = leaky_relu(ep2.forward(h));
  h = ep3.forward(h);
  return {slice_channels(h, 0, lc), softplus(slice_channels(h, lc, lc))};
}

template <typename T>
LatentCode<T> EntropyBottleneck<T>::quantize_latent(const Var<T>& y) const {
  LatentCode<T> code;
  const Shape s = y.shape();
  code.z_hat = round_half_even(hyper_analysis(y).value());
  code.features = hyper_synthesis(Var<T>::constant(code.z_hat)).value();
  const Var<T> features = Var<T>::constant(code.features);

  const GaussianParams<T> pass1 = checkerboard_params(Var<T>::constant(Tensor<T>(s)), features);
  Tensor<T> partial(s);
  code.y_symbols.assign(static_cast<size_t>(s.numel()), 0);
  code.mu = Tensor<T>(s);
  code.sigma = Tensor<T>(s);
  const Tensor<T>& yv = y.value();
  auto visit = [&](bool anchors, const GaussianParams<T>& p, Tensor<T>& dst) {
    for (int64_t n = 0; n < s.n; ++n)
      for (int64_t c = 0; c < s.c; ++c)
        for (int64_t r = 0; r < s.h; ++r)
          for (int64_t q = 0; q < s.w; ++q) {
            if (is_anchor(r, q) != anchors) continue;
            const int64_t i = yv.offset(n, c, r, q);
            const T m = p.mu.value()[i];
            const T sym = std::nearbyint(yv[i] - m);
            code.y_symbols[static_cast<size_t>(i)] = static_cast<int32_t>(sym);
            dst[i] = sym + m;
            code.mu[i] = m;
            code.sigma[i] = p.sigma.value()[i];
          }
  };
  visit(true, pass1, partial);
  const GaussianParams<T> pass2 = checkerboard_params(Var<T>::constant(partial), features);
  code.y_hat = partial;
  visit(false, pass2, code.y_hat);

  code.z_symbols.reserve(static_cast<size_t>(code.z_hat.numel()));
  for (T v : code.z_hat.data()) code.z_symbols.push_back(static_cast<int32_t>(v));
  return code;
}

template <typename T>
typename EntropyBottleneck<T>::TrainOutput EntropyBottleneck<T>::forward_train(const Var<T>& y,
                                                                               Rng& rng) const {
  const Var<T> z = hyper_analysis(y);
  const Var<T> z_hat = quantize(z, QuantMode::noise, &rng);
  const Var<T> z_lik = prior.likelihood(z_hat);
  const Var<T> features = hyper_synthesis(z_hat);
  const Var<T> y_hat = quantize(y, QuantMode::noise, &rng);
  const GaussianParams<T> p = checkerboard_params(y_hat, features);
  return {y_hat, gaussian_likelihood(y_hat, p.mu, p.sigma), z_lik};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> EntropyBottleneck<T>::round_likelihoods(
    const LatentCode<T>& code) const {
  const Var<T> y_lik = gaussian_likelihood(Var<T>::constant(code.y_hat), Var<T>::constant(code.mu),
                                           Var<T>::constant(code.sigma));
  const Var<T> z_lik = prior.likelihood(Var<T>::constant(code.z_hat));
  std::pair<Tensor<T>, Tensor<T>> out{y_lik.value(), z_lik.value()};
  for (Tensor<T>* t : {&out.first, &out.second}) {
    for (T& v : t->data()) v = std::max(v, static_cast<T>(kCodingLikelihoodFloor));
  }
  return out;
}

template <typename T>
MacCount EntropyBottleneck<T>::count_hyper_analysis(const Shape& latent) const {
  const Shape s1 = ha1.output_shape(latent);
  const Shape s2 = ha2.output_shape(s1);
  return ha1.count(latent) + ha2.count(s1) + ha3.count(s2);
}

template <typename T>
MacCount EntropyBottleneck<T>::count_hyper_synthesis(const Shape& latent) const {
  const int64_t hc = cfg_.hyper_channels;
  const Shape z{latent.n, hc, latent.h / 4, latent.w / 4};
  const Shape z2{latent.n, hc, latent.h / 2, latent.w / 2};
  const Shape mid{latent.n, hs3.out_channels(), latent.h / 2, latent.w / 2};
  const Shape full{latent.n, hs4.conv.out_channels() / 4, latent.h, latent.w};
  return hs1.count(z) + hs2.count(z) + hs3.count(z2) + hs4.count(mid) + hs5.count(full);
}

template <typename T>
MacCount EntropyBottleneck<T>::count_context(const Shape& latent) const {
  return context.count(latent);
}

template <typename T>
MacCount EntropyBottleneck<T>::count_entropy_parameters(const Shape& latent) const {
  const Shape in{latent.n, ep1.in_channels(), latent.h, latent.w};
  const Shape s1{latent.n, ep1.out_channels(), latent.h, latent.w};
  const Shape s2{latent.n, ep2.out_channels(), latent.h, latent.w};
  return ep1.count(in) + ep2.count(s1) + ep3.count(s2);
}

template <typename T>
void EntropyBottleneck<T>::collect(ParamList<T>& out) {
  prior.collect(out);
  for (Conv2d<T>* c : {&ha1, &ha2, &ha3, &hs1, &hs3, &hs5, &context, &ep1, &ep2, &ep3}) c->collect(out);
  hs2.collect(out);
  hs4.collect(out);
}

template <typename T>
double rate_bits(std::span<const Tensor<T>> likelihoods) {
  double bits = 0;
  for (const Tensor<T>& t : likelihoods) {
    for (T p : t.data()) {
      if (!(p > T(0)) || p > T(1) + T(1e-6)) {
        throw Error("rate_bits: probability " + std::to_string(static_cast<double>(p)) +
                    " outside (0, 1]");
      }
      bits -= std::log2(static_cast<double>(p));
    }
  }
  return bits;
}

template <typename T>
Var<T> rate_bits(const Var<T>& likelihood) {
  return mul_scalar(sum(log2(likelihood)), T(-1));
}

#define TREENET_INSTANTIATE(T)                                                            \
  template Tensor<T> round_half_even(const Tensor<T>&);                                   \
  template Var<T> quantize(const Var<T>&, QuantMode, Rng*, const Var<T>*);                \
  template Var<T> gaussian_likelihood(const Var<T>&, const Var<T>&, const Var<T>&, double); \
  template class FactorizedPrior<T>;                                                      \
  template Tensor<T> checkerboard_mask(const Shape&, bool);                               \
  template class EntropyBottleneck<T>;                                                    \
  template double rate_bits(std::span<const Tensor<T>>);                                  \
  template Var<T> rate_bits(const Var<T>&);

TREENET_INSTANTIATE(float)
TREENET_INSTANTIATE(double)
#undef TREENET_INSTANTIATE

}  // namespace treenet
