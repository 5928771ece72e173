#pragma once

// Rate-distortion evaluation, BD-rate and complexity accounting.

#include <string>
#include <vector>

#include "treenet/model.hpp"

namespace treenet {

struct RDPoint {
  double bpp = 0;
  double psnr = 0;
  double msssim = 0;
};

struct RDCurve {
  std::string codec;
  std::vector<RDPoint> points;

  /// Sorts by bpp and checks: >= 4 points, strictly increasing positive bpp, finite metrics.
  void normalize();
};

enum class Metric { psnr, msssim };
Metric parse_metric(const std::string& name);
const char* metric_name(Metric m);

struct BDResult {
  double percent = 0;
  double overlap_lo = 0;  // metric interval the fits were integrated over
  double overlap_hi = 0;
  Metric metric = Metric::psnr;
};

/// Average rate difference of `test` relative to `base` at equal quality, in
/// percent: cubic least-squares fits of log10(bpp) against the metric,
/// integrated over the overlap of the two metric ranges.
BDResult bd_rate(RDCurve base, RDCurve test, Metric metric);

/// Curve CSV with header `codec,bpp,psnr,msssim`; all rows become one curve.
RDCurve read_curve_csv(const std::string& path);
void write_curve_csv(const std::string& path, const std::vector<RDCurve>& curves);

struct ComplexityEntry {
  std::string module;
  MacCount count;
  double kmacs_per_pixel = 0;
  double mparams = 0;
};

struct ComplexityReport {
  int64_t height = 256;
  int64_t width = 256;
  std::vector<ComplexityEntry> modules;
  ComplexityEntry encoder;
  ComplexityEntry decoder;
  ComplexityEntry total;

  std::string table() const;
  std::string csv() const;
};

/// Encoder = g_a + 4 h_a; decoder = g_s + 4 (h_s + context + h_ep) plus the prior parameters.
ComplexityReport complexity_report(const ModelConfig& cfg, int64_t height = 256, int64_t width = 256);

struct ImageResult {
  std::string image;
  bool ok = false;
  std::string error;
  double bpp = 0;
  double psnr = 0;
  double msssim = 0;  // NaN when the image is too small for five scales
};

struct CorpusResult {
  std::vector<ImageResult> images;
  RDPoint mean;  // over images that were processed
};

/// Full encode -> serialize -> parse -> decode round trip per image. Files are
/// visited in name order; unreadable ones are recorded and skipped.
CorpusResult evaluate_corpus(const TreeNet<float>& model, const std::vector<std::string>& files,
                             uint8_t lambda_index = 0, int jobs = 1);
ImageResult evaluate_image(const TreeNet<float>& model, const std::string& path,
                           uint8_t lambda_index = 0);

/// Image files (.png / .ppm) in a directory, sorted by name.
std::vector<std::string> list_images(const std::string& dir);

void write_image_csv(const std::string& path, const CorpusResult& result);

}  // namespace treenet
