#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "treenet/bitstream.hpp"
#include "treenet/byteio.hpp"
#include "treenet/eval.hpp"
#include "treenet/image_io.hpp"
#include "treenet/interp.hpp"
#include "treenet/metrics.hpp"
#include "treenet/train.hpp"

namespace fs = std::filesystem;
using namespace treenet;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  uint64_t seed = 1;
  std::string config;
  bool verbose = false;
  std::string out = ".";
  bool csv = false;
  int jobs = 1;
};

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// The resolved configuration goes to stdout as comments, or to stderr when
// stdout carries CSV.
void print_config(const Globals& g, const std::string& command, const std::string& body) {
  std::ostream& os = g.csv ? std::cerr : std::cout;
  os << "# treenet " << command << "\n";
  std::istringstream lines(body);
  std::string line;
  while (std::getline(lines, line)) os << "# " << line << "\n";
}

std::vector<std::string> expand_inputs(const std::vector<std::string>& inputs) {
  std::vector<std::string> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      const auto listed = list_images(in);
      files.insert(files.end(), listed.begin(), listed.end());
    } else {
      files.push_back(in);
    }
  }
  if (files.empty()) throw Error("no input images");
  return files;
}

std::string out_path(const Globals& g, const std::string& input, const std::string& suffix) {
  fs::create_directories(g.out);
  return (fs::path(g.out) / (fs::path(input).stem().string() + suffix)).string();
}

// ---------------------------------------------------------------------------

struct ConfigFlags {
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void add(CLI::App* cmd, const std::vector<std::string>& keys) {
    const std::string defaults = describe(TrainConfig{});
    for (const auto& key : keys) {
      std::string def;
      std::istringstream lines(defaults);
      std::string line;
      while (std::getline(lines, line)) {
        if (line.rfind(key + " = ", 0) == 0) def = line.substr(key.size() + 3);
      }
      options[key] = cmd->add_option("--" + dashed(key), values[key], key)->default_str(def);
    }
  }

  TrainConfig resolve(const Globals& g, bool seed_flag) const {
    std::map<std::string, std::string> kv;
    if (!g.config.empty() && g.config != "default") kv = parse_key_values(slurp(g.config), g.config);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) kv[key] = values.at(key);
    }
    if (seed_flag) kv["seed"] = std::to_string(g.seed);
    TrainConfig cfg;
    apply_config(kv, cfg);
    return cfg;
  }
};

const std::vector<std::string> kModelKeys = {"channels", "latent_channels", "hyper_channels", "aff_reduction",
                                             "context_kernel"};

std::string model_description(const ModelConfig& m) {
  std::ostringstream os;
  os << "channels = " << m.channels << "\nlatent_channels = " << m.latent_channels
     << "\nhyper_channels = " << m.hyper_channels << "\naff_reduction = " << m.aff_reduction
     << "\ncontext_kernel = " << m.context_kernel << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------

int run_train(const Globals& g, const ConfigFlags& flags, bool seed_flag, const std::string& resume, bool out_flag) {
  TrainConfig cfg;
  try {
    cfg = flags.resolve(g, seed_flag);
    if (out_flag || cfg.out_dir == ".") cfg.out_dir = g.out;
    cfg.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  print_config(g, "train", describe(cfg) + (resume.empty() ? "" : "resume = " + resume + "\n"));
  TrainOptions options;
  options.resume_from = resume;
  options.on_step = [&](int64_t step, const StepResult& r) {
    if (g.verbose || step % 50 == 0) {
      std::cerr << "step " << step << "  loss " << r.report.total << "  bpp " << r.report.bpp() << "  mse "
                << r.report.mse << "  1-msssim " << r.report.msssim_term << (r.skipped ? "  (skipped)" : "")
                << "\n";
    }
  };
  const std::string path = train_loop(cfg, options);
  std::cout << path << "\n";
  return 0;
}

int run_encode(const Globals& g, const std::string& model_path, const std::vector<std::string>& inputs) {
  print_config(g, "encode", "model = " + model_path + "\nout = " + g.out + "\n");
  const TrainedModel tm = load_trained_model(model_path);
  if (g.csv) std::cout << "image,bitstream,bytes,bpp\n";
  for (const auto& file : expand_inputs(inputs)) {
    const Tensor<float> img = read_image(file);
    const Bitstream stream = encode_image(tm.model, img, static_cast<uint8_t>(tm.lambda_index)).stream;
    const std::vector<uint8_t> bytes = stream.serialize();
    const std::string path = out_path(g, file, ".tnbs");
    write_file(path, bytes);
    const double bpp = static_cast<double>(bytes.size()) * 8.0 / static_cast<double>(img.shape().h * img.shape().w);
    if (g.csv) {
      std::cout << file << ',' << path << ',' << bytes.size() << ',' << bpp << "\n";
    } else {
      std::cout << file << " -> " << path << "  " << bytes.size() << " bytes  " << std::fixed
                << std::setprecision(4) << bpp << " bpp\n"
                << std::defaultfloat;
    }
  }
  return 0;
}

int run_decode(const Globals& g, const std::string& model_path, const std::vector<std::string>& inputs) {
  print_config(g, "decode", "model = " + model_path + "\nout = " + g.out + "\n");
  const TrainedModel tm = load_trained_model(model_path);
  for (const auto& file : inputs) {
    const Bitstream stream = Bitstream::parse(read_file(file));
    const std::string path = out_path(g, file, ".png");
    write_image(path, decode_image(tm.model, stream));
    std::cout << file << " -> " << path << "\n";
  }
  return 0;
}

int run_eval(const Globals& g, const std::vector<std::string>& models, const std::string& data,
             const std::string& codec) {
  std::string body = "data = " + data + "\ncodec = " + codec + "\njobs = " + std::to_string(g.jobs) + "\n";
  for (const auto& m : models) body += "model = " + m + "\n";
  print_config(g, "eval", body);
  if (g.jobs < 1) throw UsageError("--jobs must be >= 1");
  const std::vector<std::string> files = list_images(data);
  if (files.empty()) throw Error("eval: no images in '" + data + "'");
  fs::create_directories(g.out);
  RDCurve curve{codec, {}};
  if (g.csv) std::cout << "model,lambda_index,bpp,psnr,msssim,failed\n";
  for (size_t k = 0; k < models.size(); ++k) {
    const TrainedModel tm = load_trained_model(models[k]);
    const CorpusResult r = evaluate_corpus(tm.model, files, static_cast<uint8_t>(tm.lambda_index), g.jobs);
    write_image_csv((fs::path(g.out) / (codec + "_model" + std::to_string(k) + "_images.csv")).string(), r);
    const auto failed = std::count_if(r.images.begin(), r.images.end(), [](const ImageResult& i) { return !i.ok; });
    curve.points.push_back(r.mean);
    if (g.csv) {
      std::cout << models[k] << ',' << tm.lambda_index << ',' << r.mean.bpp << ',' << r.mean.psnr << ','
                << r.mean.msssim << ',' << failed << "\n";
    } else {
      std::cout << models[k] << "  lambda " << tm.lambda_index << "  bpp " << std::fixed << std::setprecision(4)
                << r.mean.bpp << "  psnr " << std::setprecision(3) << r.mean.psnr << " dB  ms-ssim "
                << std::setprecision(5) << r.mean.msssim << std::defaultfloat << "  (" << r.images.size() - failed
                << " images, " << failed << " failed)\n";
    }
  }
  const std::string curve_path = (fs::path(g.out) / (codec + "_curve.csv")).string();
  write_curve_csv(curve_path, {curve});
  if (!g.csv) std::cout << "curve: " << curve_path << "\n";
  return 0;
}

int run_bd(const Globals& g, const std::string& base, const std::string& test, const std::string& metric_name_) {
  print_config(g, "bd", "base = " + base + "\ntest = " + test + "\nmetric = " + metric_name_ + "\n");
  Metric metric;
  try {
    metric = parse_metric(metric_name_);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const BDResult r = bd_rate(read_curve_csv(base), read_curve_csv(test), metric);
  const double shown = std::abs(r.percent) < 0.005 ? 0.0 : r.percent;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f%%", shown);
  if (g.csv) {
    std::cout << "metric,bd_rate_percent,overlap_lo,overlap_hi\n"
              << metric_name(metric) << ',' << r.percent << ',' << r.overlap_lo << ',' << r.overlap_hi << "\n";
  } else {
    std::cout << buf << "\n";
  }
  return 0;
}

int run_complexity(const Globals& g, const ConfigFlags& flags, int64_t height, int64_t width) {
  TrainConfig cfg;
  try {
    cfg = flags.resolve(g, false);
    cfg.model.validate();
    if (height < 1 || width < 1) throw Error("complexity: --height and --width must be positive");
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  print_config(g, "complexity",
               model_description(cfg.model) + "height = " + std::to_string(height) + "\nwidth = " +
                   std::to_string(width) + "\n");
  const ComplexityReport r = complexity_report(cfg.model, height, width);
  std::cout << (g.csv ? r.csv() : r.table());
  return 0;
}

struct AblationRow {
  std::string image;
  std::string error;
  std::vector<std::pair<std::string, double>> mse;
};

int run_ablate(const Globals& g, const std::string& model_path, const std::vector<std::string>& inputs) {
  print_config(g, "ablate", "model = " + model_path + "\nout = " + g.out + "\njobs = " + std::to_string(g.jobs) + "\n");
  if (g.jobs < 1) throw UsageError("--jobs must be >= 1");
  const TrainedModel tm = load_trained_model(model_path);
  const std::vector<std::string> files = expand_inputs(inputs);
  fs::create_directories(g.out);
  std::vector<AblationRow> rows(files.size());
#pragma omp parallel for schedule(dynamic) num_threads(g.jobs)
  for (size_t k = 0; k < files.size(); ++k) {
    AblationRow& row = rows[k];
    row.image = files[k];
    try {
      const Tensor<float> img = read_image(files[k]);
      const Bitstream stream = encode_image(tm.model, img).stream;
      const DecodedLatents d = decode_latents(tm.model, stream);
      for (auto mode : {PropagationMode::selective, PropagationMode::accumulative}) {
        for (int i = 1; i <= kNumLatents; ++i) {
          const PropagationSpec spec{mode, i};
          const Tensor<float> out =
              reconstruct(tm.model, select_latents(d.y_hat, spec), stream.header.width, stream.header.height);
          write_image(out_path(g, files[k], "_" + spec.tag() + ".png"), out);
          row.mse.emplace_back(spec.tag(), mse_8bit(img, out));
        }
      }
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  }
  bool failed = false;
  if (g.csv) std::cout << "image,output,mse\n";
  for (const auto& row : rows) {
    if (!row.error.empty()) {
      std::cerr << row.image << ": " << row.error << "\n";
      failed = true;
      continue;
    }
    if (!g.csv) std::cout << row.image << "\n";
    for (const auto& [tag, mse] : row.mse) {
      if (g.csv) {
        std::cout << row.image << ',' << tag << ',' << mse << "\n";
      } else {
        std::cout << "  " << tag << "  mse " << std::fixed << std::setprecision(3) << mse << "  psnr "
                  << psnr_from_mse(mse) << " dB\n"
                  << std::defaultfloat;
      }
    }
  }
  return failed ? 2 : 0;
}

int run_bitmap(const Globals& g, const std::string& model_path, const std::vector<std::string>& inputs, int index) {
  print_config(g, "bitmap", "model = " + model_path + "\nout = " + g.out + "\nindex = " + std::to_string(index) + "\n");
  if (index < 0 || index > kNumLatents) throw UsageError("--index must be 0 (all) or 1..4");
  const TrainedModel tm = load_trained_model(model_path);
  if (g.csv) std::cout << "image,latent,min_bits,max_bits,mean_bits,total_bits\n";
  for (const auto& file : expand_inputs(inputs)) {
    const Tensor<float> img = read_image(file);
    for (int i = 1; i <= kNumLatents; ++i) {
      if (index != 0 && i != index) continue;
      const Bitmap m = bitmap(tm.model, img, i);
      const std::string path = out_path(g, file, "_bitmap" + std::to_string(i) + ".png");
      write_bitmap(path, m);
      const double total = m.sum() * static_cast<double>(m.channels);
      const double mean = m.sum() / static_cast<double>(m.grid.numel());
      if (g.csv) {
        std::cout << file << ',' << i << ',' << m.min() << ',' << m.max() << ',' << mean << ',' << total << "\n";
      } else {
        std::cout << path << "  bits/position min " << m.min() << " max " << m.max() << " mean " << mean
                  << "  total " << total << " bits\n";
      }
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TreeNet learned image codec"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--config", g.config, "key = value config file ('default' for built-in defaults)");
  app.add_flag("--verbose", g.verbose, "Log every training step");
  auto* out_opt = app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_flag("--csv", g.csv, "Machine-readable CSV on stdout");
  app.add_option("--jobs", g.jobs, "Images processed in parallel (eval, ablate)")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train one model for one lambda pair");
  ConfigFlags train_flags;
  std::vector<std::string> train_keys;
  for (const auto& k : config_keys()) {
    if (k != "seed" && k != "out_dir") train_keys.push_back(k);
  }
  train_flags.add(train, train_keys);
  std::string resume;
  train->add_option("--resume", resume, "Continue from a training checkpoint");

  std::string model_path;
  std::vector<std::string> inputs;
  auto* encode = app.add_subcommand("encode", "Compress images to .tnbs bitstreams");
  encode->add_option("--model", model_path, "Checkpoint")->required();
  encode->add_option("--input", inputs, "Image files or directories")->required();

  auto* decode = app.add_subcommand("decode", "Reconstruct .tnbs bitstreams as PNG");
  decode->add_option("--model", model_path, "Checkpoint")->required();
  decode->add_option("--input", inputs, "Bitstream files")->required();

  std::vector<std::string> models;
  std::string data, codec = "treenet";
  auto* eval = app.add_subcommand("eval", "Rate-distortion evaluation over an image directory");
  eval->add_option("--model", models, "Checkpoints, one RD point each")->required();
  eval->add_option("--data", data, "Image directory")->required();
  eval->add_option("--codec", codec, "Curve name")->capture_default_str();

  std::string base, test, metric = "psnr";
  auto* bd = app.add_subcommand("bd", "BD-rate of a test curve against a base curve");
  bd->add_option("--base", base, "Base curve CSV")->required();
  bd->add_option("--test", test, "Test curve CSV")->required();
  bd->add_option("--metric", metric, "psnr or msssim")->capture_default_str();

  int64_t height = 256, width = 256;
  auto* complexity = app.add_subcommand("complexity", "Analytic MAC and parameter counts");
  ConfigFlags model_flags;
  model_flags.add(complexity, kModelKeys);
  complexity->add_option("--height", height, "Image height")->capture_default_str();
  complexity->add_option("--width", width, "Image width")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Selective and accumulative latent propagation");
  ablate->add_option("--model", model_path, "Checkpoint")->required();
  ablate->add_option("--input", inputs, "Image files or directories")->required();

  int index = 0;
  auto* bitmap_cmd = app.add_subcommand("bitmap", "Per-position bit maps of each latent");
  bitmap_cmd->add_option("--model", model_path, "Checkpoint")->required();
  bitmap_cmd->add_option("--input", inputs, "Image files or directories")->required();
  bitmap_cmd->add_option("--index", index, "Latent 1..4, 0 for all")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train) return run_train(g, train_flags, seed_opt->count() > 0, resume, out_opt->count() > 0);
    if (*encode) return run_encode(g, model_path, inputs);
    if (*decode) return run_decode(g, model_path, inputs);
    if (*eval) return run_eval(g, models, data, codec);
    if (*bd) return run_bd(g, base, test, metric);
    if (*complexity) return run_complexity(g, model_flags, height, width);
    if (*ablate) return run_ablate(g, model_path, inputs);
    if (*bitmap_cmd) return run_bitmap(g, model_path, inputs, index);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
