#include "treenet/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "treenet/image_io.hpp"
#include "treenet/kernels.hpp"

namespace treenet {

double mse_8bit(const Tensor<float>& a, const Tensor<float>& b) {
  require_same_shape("psnr", a.shape(), b.shape());
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(to_u8(a[i])) - to_u8(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

double psnr_from_mse(double mse) {
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

double psnr(const Tensor<float>& a, const Tensor<float>& b) { return psnr_from_mse(mse_8bit(a, b)); }

template <typename T>
std::vector<T> ssim_window() {
  std::vector<double> g(kSsimWindow);
  double total = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double x = i - (kSsimWindow - 1) / 2.0;
    g[i] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
    total += g[i];
  }
  std::vector<T> out;
  for (double v : g) out.push_back(static_cast<T>(v / total));
  return out;
}

namespace {

// Halves both sides with 2x2 averaging; an odd side first repeats its last row/column.
Tensor<double> downsample(const Tensor<double>& x) {
  const Shape s = x.shape();
  const Shape o{s.n, s.c, (s.h + 1) / 2, (s.w + 1) / 2};
  Tensor<double> out(o);
  for (int64_t p = 0; p < s.n * s.c; ++p) {
    const double* src = x.ptr() + p * s.plane();
    double* dst = out.ptr() + p * o.plane();
    for (int64_t r = 0; r < o.h; ++r)
      for (int64_t c = 0; c < o.w; ++c) {
        double acc = 0;
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx) {
            const int64_t y = std::min(2 * r + dy, s.h - 1), xx = std::min(2 * c + dx, s.w - 1);
            acc += src[y * s.w + xx];
          }
        dst[r * o.w + c] = acc / 4;
      }
  }
  return out;
}

Tensor<double> product(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

}  // namespace

double ms_ssim(const Tensor<double>& a, const Tensor<double>& b, double data_range) {
  require_same_shape("ms_ssim", a.shape(), b.shape());
  const Shape s = a.shape();
  if (std::min(s.h, s.w) < kMsSsimMinSide) {
    throw Error("ms_ssim: image " + s.str() + " is smaller than " + std::to_string(kMsSsimMinSide) +
                " pixels on a side; fewer than five scales is not supported");
  }
  const std::vector<double> taps = ssim_window<double>();
  const double c1 = std::pow(0.01 * data_range, 2), c2 = std::pow(0.03 * data_range, 2);
  const int64_t planes = s.n * s.c;
  std::vector<double> result(static_cast<size_t>(planes), 1.0);
  Tensor<double> x = a, y = b;
  for (size_t scale = 0; scale < kMsSsimWeights.size(); ++scale) {
    const Tensor<double> mx = kernels::separable_filter_valid<double>(x, taps);
    const Tensor<double> my = kernels::separable_filter_valid<double>(y, taps);
    const Tensor<double> sxx = kernels::separable_filter_valid<double>(product(x, x), taps);
    const Tensor<double> syy = kernels::separable_filter_valid<double>(product(y, y), taps);
    const Tensor<double> sxy = kernels::separable_filter_valid<double>(product(x, y), taps);
    const int64_t plane = mx.shape().plane();
    const bool last = scale + 1 == kMsSsimWeights.size();
    for (int64_t p = 0; p < planes; ++p) {
      double cs_sum = 0, ssim_sum = 0;
      for (int64_t i = p * plane; i < (p + 1) * plane; ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i];
        const double cov = sxy[i] - mx[i] * my[i];
        const double cs = (2 * cov + c2) / (vx + vy + c2);
        const double lum = (2 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        cs_sum += cs;
        ssim_sum += lum * cs;
      }
      const double term = std::max(0.0, (last ? ssim_sum : cs_sum) / static_cast<double>(plane));
      result[static_cast<size_t>(p)] *= std::pow(term, kMsSsimWeights[scale]);
    }
    if (!last) {
      x = downsample(x);
      y = downsample(y);
    }
  }
  double mean = 0;
  for (double v : result) mean += v;
  return mean / static_cast<double>(planes);
}

double ms_ssim(const Tensor<float>& a, const Tensor<float>& b) {
  return ms_ssim(a.cast<double>(), b.cast<double>(), 1.0);
}

int ms_ssim_scales_for(int64_t side) {
  int scales = 0;
  while (scales < static_cast<int>(kMsSsimWeights.size()) && (side >> scales) >= kSsimWindow) ++scales;
  return scales;
}

template <typename T>
Var<T> ms_ssim_differentiable(const Var<T>& a, const Var<T>& b) {
  require_same_shape("ms_ssim", a.shape(), b.shape());
  const Shape s = a.shape();
  const int scales = ms_ssim_scales_for(std::min(s.h, s.w));
  if (scales < 1) throw Error("ms_ssim: image " + s.str() + " is smaller than the 11-tap window");
  if (scales > 1 && (s.h % (1 << (scales - 1)) != 0 || s.w % (1 << (scales - 1)) != 0)) {
    throw ShapeError("ms_ssim: sides of " + s.str() + " must be divisible by " + std::to_string(1 << (scales - 1)));
  }
  double wsum = 0;
  for (int i = 0; i < scales; ++i) wsum += kMsSsimWeights[i];
  const std::vector<T> taps = ssim_window<T>();
  const T c1 = T(1e-4), c2 = T(9e-4);
  Var<T> x = a, y = b, result;
  for (int scale = 0; scale < scales; ++scale) {
    const Var<T> mx = separable_filter_valid(x, taps), my = separable_filter_valid(y, taps);
    const Var<T> mxx = mul(mx, mx), myy = mul(my, my), mxy = mul(mx, my);
    const Var<T> vx = sub(separable_filter_valid(mul(x, x), taps), mxx);
    const Var<T> vy = sub(separable_filter_valid(mul(y, y), taps), myy);
    const Var<T> cov = sub(separable_filter_valid(mul(x, y), taps), mxy);
    Var<T> map = div(add_scalar(mul_scalar(cov, T(2)), c2), add_scalar(add(vx, vy), c2));
    const bool last = scale + 1 == scales;
    if (last) {
      map = mul(map, div(add_scalar(mul_scalar(mxy, T(2)), c1), add_scalar(add(mxx, myy), c1)));
    }
    const Var<T> term = pow_scalar(clamp_min(global_avg_pool(map), T(1e-6)),
                                   static_cast<T>(kMsSsimWeights[scale] / wsum));
    result = result.defined() ? mul(result, term) : term;
    if (!last) {
      x = avg_pool2x2(x);
      y = avg_pool2x2(y);
    }
  }
  return mean(result);
}

template std::vector<float> ssim_window();
template std::vector<double> ssim_window();
template Var<float> ms_ssim_differentiable(const Var<float>&, const Var<float>&);
template Var<double> ms_ssim_differentiable(const Var<double>&, const Var<double>&);

}  // namespace treenet
