#pragma once

// Image quality metrics.

#include <array>

#include "treenet/autodiff.hpp"

namespace treenet {

inline constexpr double kPsnrCap = 100.0;

/// Mean squared error between the 8-bit quantizations of two [0, 1] images.
double mse_8bit(const Tensor<float>& a, const Tensor<float>& b);
/// 10 log10(255^2 / mse), capped at kPsnrCap.
double psnr_from_mse(double mse);
/// PSNR of two [0, 1] images after 8-bit quantization.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
/// Smallest side that fits five dyadic scales of the 11-tap window.
inline constexpr int64_t kMsSsimMinSide = kSsimWindow << 4;

/// Five-scale MS-SSIM of two images with values in [0, data_range], averaged
/// over channels and batch. Throws Error when the smaller side is below 176.
double ms_ssim(const Tensor<double>& a, const Tensor<double>& b, double data_range = 1.0);
double ms_ssim(const Tensor<float>& a, const Tensor<float>& b);

/// Differentiable MS-SSIM for [0, 1] images using as many of the five scales as
/// fit the window, with the weights of the used scales renormalized to sum to 1.
template <typename T>
Var<T> ms_ssim_differentiable(const Var<T>& a, const Var<T>& b);

/// Number of scales ms_ssim_differentiable uses for a given smaller side.
int ms_ssim_scales_for(int64_t side);

/// 11 normalized Gaussian taps with sigma 1.5.
template <typename T>
std::vector<T> ssim_window();

}  // namespace treenet
