#include "treenet/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "treenet/bitstream.hpp"
#include "treenet/image_io.hpp"
#include "treenet/metrics.hpp"

namespace treenet {

void RDCurve::normalize() {
  if (points.size() < 4) {
    throw Error("RD curve '" + codec + "' needs at least 4 points, has " + std::to_string(points.size()));
  }
  std::sort(points.begin(), points.end(), [](const RDPoint& a, const RDPoint& b) { return a.bpp < b.bpp; });
  for (size_t i = 0; i < points.size(); ++i) {
    const RDPoint& p = points[i];
    if (!(p.bpp > 0) || !std::isfinite(p.bpp) || !std::isfinite(p.psnr) || !std::isfinite(p.msssim)) {
      throw Error("RD curve '" + codec + "': non-finite or non-positive point");
    }
    if (i > 0 && !(p.bpp > points[i - 1].bpp)) {
      throw Error("RD curve '" + codec + "': rates must be strictly increasing");
    }
  }
}

Metric parse_metric(const std::string& name) {
  if (name == "psnr") return Metric::psnr;
  if (name == "msssim" || name == "ms-ssim" || name == "ms_ssim") return Metric::msssim;
  throw Error("unknown metric '" + name + "' (expected psnr or msssim)");
}

const char* metric_name(Metric m) { return m == Metric::psnr ? "psnr" : "msssim"; }

namespace {

double metric_of(const RDPoint& p, Metric m) { return m == Metric::psnr ? p.psnr : p.msssim; }

// Least-squares cubic through (metric, log10 bpp); coefficients in ascending powers.
Eigen::Vector4d fit_cubic(const RDCurve& c, Metric m) {
  const auto n = static_cast<Eigen::Index>(c.points.size());
  Eigen::MatrixXd a(n, 4);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = metric_of(c.points[static_cast<size_t>(i)], m);
    a.row(i) << 1.0, x, x * x, x * x * x;
    b(i) = std::log10(c.points[static_cast<size_t>(i)].bpp);
  }
  return a.colPivHouseholderQr().solve(b);
}

double antiderivative(const Eigen::Vector4d& p, double x) {
  return p(0) * x + p(1) * x * x / 2 + p(2) * x * x * x / 3 + p(3) * x * x * x * x / 4;
}

}  // namespace

BDResult bd_rate(RDCurve base, RDCurve test, Metric metric) {
  base.normalize();
  test.normalize();
  auto range = [&](const RDCurve& c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const RDPoint& p : c.points) {
      lo = std::min(lo, metric_of(p, metric));
      hi = std::max(hi, metric_of(p, metric));
    }
    return std::pair{lo, hi};
  };
  const auto [alo, ahi] = range(base);
  const auto [blo, bhi] = range(test);
  const double lo = std::max(alo, blo), hi = std::min(ahi, bhi);
  if (!(hi > lo)) throw Error("bd_rate: the two curves have no overlapping " + std::string(metric_name(metric)) + " range");
  const Eigen::Vector4d pa = fit_cubic(base, metric), pb = fit_cubic(test, metric);
  const double ia = antiderivative(pa, hi) - antiderivative(pa, lo);
  const double ib = antiderivative(pb, hi) - antiderivative(pb, lo);
  const double avg = (ib - ia) / (hi - lo);
  return {(std::pow(10.0, avg) - 1.0) * 100.0, lo, hi, metric};
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell.erase(0, cell.find_first_not_of(" \t\r"));
    cell.erase(cell.find_last_not_of(" \t\r") + 1);
    out.push_back(cell);
  }
  return out;
}

double parse_number(const std::string& s, const std::string& where) {
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(where + ": '" + s + "' is not a number");
  }
}

}  // namespace

RDCurve read_curve_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error(path + ": empty file");
  const std::vector<std::string> header = split_csv(line);
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(path + ": missing column '" + name + "'");
    return static_cast<size_t>(it - header.begin());
  };
  const size_t cb = column("bpp"), cp = column("psnr"), cm = column("msssim");
  const auto codec_it = std::find(header.begin(), header.end(), "codec");
  RDCurve curve;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::vector<std::string> cells = split_csv(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (cells.size() != header.size()) throw Error(where + ": expected " + std::to_string(header.size()) + " fields");
    if (codec_it != header.end() && curve.codec.empty()) curve.codec = cells[static_cast<size_t>(codec_it - header.begin())];
    curve.points.push_back({parse_number(cells[cb], where), parse_number(cells[cp], where), parse_number(cells[cm], where)});
  }
  if (curve.codec.empty()) curve.codec = std::filesystem::path(path).stem().string();
  return curve;
}

void write_curve_csv(const std::string& path, const std::vector<RDCurve>& curves) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "codec,bpp,psnr,msssim\n" << std::setprecision(10);
  for (const RDCurve& c : curves)
    for (const RDPoint& p : c.points) out << c.codec << ',' << p.bpp << ',' << p.psnr << ',' << p.msssim << '\n';
}

// ---------------------------------------------------------------------------

ComplexityReport complexity_report(const ModelConfig& cfg, int64_t height, int64_t width) {
  if (height % kPadMultiple != 0 || width % kPadMultiple != 0) {
    throw ShapeError("complexity_report: reference size must be a multiple of 64");
  }
  const TreeNet<float> model(cfg, 0);
  const auto c = model.complexity(height, width);
  const double pixels = static_cast<double>(height * width);
  auto entry = [&](std::string name, MacCount m) {
    return ComplexityEntry{std::move(name), m, static_cast<double>(m.macs) / pixels / 1e3,
                           static_cast<double>(m.params) / 1e6};
  };
  ComplexityReport r;
  r.height = height;
  r.width = width;
  r.modules = {entry("g_a", c.analysis),          entry("h_a x4", c.hyper_analysis),
               entry("g_s", c.synthesis),         entry("h_s x4", c.hyper_synthesis),
               entry("context x4", c.context),    entry("h_ep x4", c.entropy_parameters),
               entry("prior x4", c.priors)};
  r.encoder = entry("encoder", c.analysis + c.hyper_analysis);
  r.decoder = entry("decoder", c.synthesis + c.hyper_synthesis + c.context + c.entropy_parameters + c.priors);
  r.total = entry("total", r.encoder.count + r.decoder.count);
  return r;
}

std::string ComplexityReport::table() const {
  std::ostringstream os;
  os << "Complexity at " << width << "x" << height << "\n";
  os << std::left << std::setw(12) << "module" << std::right << std::setw(14) << "kMACs/pixel"
     << std::setw(14) << "params (M)" << std::setw(16) << "MACs" << "\n";
  auto row = [&](const ComplexityEntry& e) {
    os << std::left << std::setw(12) << e.module << std::right << std::fixed << std::setprecision(3)
       << std::setw(14) << e.kmacs_per_pixel << std::setprecision(4) << std::setw(14) << e.mparams
       << std::setw(16) << e.count.macs << "\n";
  };
  for (const auto& e : modules) row(e);
  os << std::string(56, '-') << "\n";
  row(encoder);
  row(decoder);
  row(total);
  return os.str();
}

std::string ComplexityReport::csv() const {
  std::ostringstream os;
  os << "module,macs,params,kmacs_per_pixel,mparams\n" << std::setprecision(10);
  auto row = [&](const ComplexityEntry& e) {
    os << e.module << ',' << e.count.macs << ',' << e.count.params << ',' << e.kmacs_per_pixel << ','
       << e.mparams << "\n";
  };
  for (const auto& e : modules) row(e);
  row(encoder);
  row(decoder);
  row(total);
  return os.str();
}

// ---------------------------------------------------------------------------

std::vector<std::string> list_images(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error("'" + dir + "' is not a directory");
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png" || ext == ".ppm") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

ImageResult evaluate_image(const TreeNet<float>& model, const std::string& path, uint8_t lambda_index) {
  ImageResult r;
  r.image = std::filesystem::path(path).filename().string();
  try {
    const Tensor<float> x = read_image(path);
    const std::vector<uint8_t> bytes = encode_image(model, x, lambda_index).stream.serialize();
    const Tensor<float> x_hat = quantize_8bit(decode_image(model, Bitstream::parse(bytes)));
    const Tensor<float> x8 = quantize_8bit(x);
    r.bpp = static_cast<double>(bytes.size()) * 8.0 / static_cast<double>(x.shape().plane());
    r.psnr = psnr(x8, x_hat);
    r.msssim = std::min(x.shape().h, x.shape().w) >= kMsSsimMinSide
                   ? ms_ssim(x8, x_hat)
                   : std::numeric_limits<double>::quiet_NaN();
    r.ok = true;
  } catch (const Error& e) {
    r.error = e.what();
  }
  return r;
}

CorpusResult evaluate_corpus(const TreeNet<float>& model, const std::vector<std::string>& files,
                             uint8_t lambda_index, int jobs) {
  CorpusResult out;
  out.images.resize(files.size());
  const auto n = static_cast<int64_t>(files.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, jobs))
  for (int64_t i = 0; i < n; ++i) {
    out.images[static_cast<size_t>(i)] = evaluate_image(model, files[static_cast<size_t>(i)], lambda_index);
  }
  double count = 0, ms_count = 0;
  for (const ImageResult& r : out.images) {
    if (!r.ok) continue;
    out.mean.bpp += r.bpp;
    out.mean.psnr += r.psnr;
    ++count;
    if (std::isfinite(r.msssim)) {
      out.mean.msssim += r.msssim;
      ++ms_count;
    }
  }
  if (count == 0) throw Error("evaluate_corpus: no image could be evaluated");
  out.mean.bpp /= count;
  out.mean.psnr /= count;
  out.mean.msssim = ms_count > 0 ? out.mean.msssim / ms_count : std::numeric_limits<double>::quiet_NaN();
  return out;
}

void write_image_csv(const std::string& path, const CorpusResult& result) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "image,bpp,psnr,msssim\n" << std::setprecision(10);
  for (const ImageResult& r : result.images) {
    if (r.ok) {
      out << r.image << ',' << r.bpp << ',' << r.psnr << ',' << r.msssim << '\n';
    } else {
      out << r.image << ",nan,nan,nan\n";
    }
  }
}

}  // namespace treenet
