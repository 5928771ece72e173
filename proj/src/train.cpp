#include "treenet/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "treenet/eval.hpp"
#include "treenet/image_io.hpp"
#include "treenet/metrics.hpp"

namespace treenet {

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
  uint64_t z = seed;
  for (uint64_t v : {a, b}) {
    z += 0x9E3779B97F4A7C15ull + v;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    z ^= z >> 31;
  }
  return z;
}

void TrainConfig::validate() const {
  if (!(lambda1 >= 0) || !(lambda2 >= 0) || (lambda1 == 0 && lambda2 == 0)) {
    throw Error("config: lambda1 and lambda2 must be >= 0 and not both zero");
  }
  if (lambda_index < 0 || lambda_index >= static_cast<int>(kLambdaPairs.size())) {
    throw Error("config: lambda_index must be in 0..3");
  }
  if (batch < 1) throw Error("config: batch must be >= 1");
  if (crop < kPadMultiple || crop % kPadMultiple != 0) throw Error("config: crop must be a positive multiple of 64");
  if (!(lr > 0)) throw Error("config: lr must be positive");
  if (steps < 0 || (steps == 0 && epochs < 1)) throw Error("config: need epochs >= 1 or steps >= 1");
  if (checkpoint_every < 0) throw Error("config: checkpoint_every must be >= 0");
  if (!(clip_norm > 0)) throw Error("config: clip_norm must be positive");
  model.validate();
}

namespace {

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (!is || !is.eof()) throw Error("config: invalid value '" + text + "' for " + key);
  return v;
}

struct Field {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename M>
Field number_field(std::string key, M TrainConfig::*member) {
  return {key,
          [key, member](TrainConfig& c, const std::string& v) { c.*member = parse_value<M>(key, v); },
          [member](const TrainConfig& c) {
            std::ostringstream os;
            os << std::setprecision(10) << c.*member;
            return os.str();
          }};
}

template <typename M>
Field model_field(std::string key, M ModelConfig::*member) {
  return {key,
          [key, member](TrainConfig& c, const std::string& v) { c.model.*member = parse_value<M>(key, v); },
          [member](const TrainConfig& c) { return std::to_string(c.model.*member); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      number_field("lambda1", &TrainConfig::lambda1),
      number_field("lambda2", &TrainConfig::lambda2),
      number_field("lambda_index", &TrainConfig::lambda_index),
      number_field("batch", &TrainConfig::batch),
      number_field("crop", &TrainConfig::crop),
      number_field("lr", &TrainConfig::lr),
      number_field("epochs", &TrainConfig::epochs),
      number_field("steps", &TrainConfig::steps),
      number_field("seed", &TrainConfig::seed),
      {"data_dir", [](TrainConfig& c, const std::string& v) { c.data_dir = v; },
       [](const TrainConfig& c) { return c.data_dir; }},
      {"out_dir", [](TrainConfig& c, const std::string& v) { c.out_dir = v; },
       [](const TrainConfig& c) { return c.out_dir; }},
      number_field("checkpoint_every", &TrainConfig::checkpoint_every),
      number_field("clip_norm", &TrainConfig::clip_norm),
      model_field("channels", &ModelConfig::channels),
      model_field("latent_channels", &ModelConfig::latent_channels),
      model_field("hyper_channels", &ModelConfig::hyper_channels),
      model_field("aff_reduction", &ModelConfig::aff_reduction),
      model_field("context_kernel", &ModelConfig::context_kernel),
  };
  return f;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const Field& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& source) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw Error(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw Error(where + ": expected 'key = value'");
    if (!kv.emplace(key, value).second) throw Error(where + ": duplicate key '" + key + "'");
  }
  return kv;
}

void apply_config(const std::map<std::string, std::string>& kv, TrainConfig& cfg) {
  std::vector<std::string> unknown;
  for (const auto& [key, value] : kv) {
    if (std::find(config_keys().begin(), config_keys().end(), key) == config_keys().end()) unknown.push_back(key);
  }
  if (!unknown.empty()) {
    std::string msg = "config: unknown key(s):";
    for (const auto& k : unknown) msg += " " + k;
    throw Error(msg);
  }
  for (const Field& f : fields()) {
    const auto it = kv.find(f.key);
    if (it != kv.end()) f.set(cfg, it->second);
  }
  if (kv.count("lambda_index")) {
    if (cfg.lambda_index < 0 || cfg.lambda_index >= static_cast<int>(kLambdaPairs.size())) {
      throw Error("config: lambda_index must be in 0..3");
    }
    if (!kv.count("lambda1")) cfg.lambda1 = kLambdaPairs[static_cast<size_t>(cfg.lambda_index)].first;
    if (!kv.count("lambda2")) cfg.lambda2 = kLambdaPairs[static_cast<size_t>(cfg.lambda_index)].second;
  }
}

std::string describe(const TrainConfig& cfg) {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

// ---------------------------------------------------------------------------

LossGraph loss_eval(const TreeNet<float>& model, const Tensor<float>& batch, double lambda1,
                    double lambda2, Rng& rng, Tape<float>& tape) {
  const Shape s = batch.shape();
  const Var<float> x = tape.constant(batch);
  const auto f = model.forward_train(x, rng);
  const auto inv_pixels = static_cast<float>(1.0 / static_cast<double>(s.n * s.h * s.w));

  Var<float> bits_y, bits_z;
  for (int i = 0; i < kNumLatents; ++i) {
    const Var<float> by = rate_bits(f.y_likelihood[i]), bz = rate_bits(f.z_likelihood[i]);
    bits_y = bits_y.defined() ? add(bits_y, by) : by;
    bits_z = bits_z.defined() ? add(bits_z, bz) : bz;
  }
  const Var<float> bpp_y = mul_scalar(bits_y, inv_pixels), bpp_z = mul_scalar(bits_z, inv_pixels);
  const Var<float> mse = mul_scalar(mean(pow_scalar(sub(f.x_hat, x), 2.0f)), 255.0f * 255.0f);
  const Var<float> msssim_term = add_scalar(mul_scalar(ms_ssim_differentiable(f.x_hat, x), -1.0f), 1.0f);

  LossGraph g;
  g.loss = add(add(bpp_y, bpp_z), add(mul_scalar(mse, static_cast<float>(lambda1)),
                                      mul_scalar(msssim_term, static_cast<float>(lambda2))));
  LossReport& r = g.report;
  r.bpp_y = bpp_y.value()[0];
  r.bpp_z = bpp_z.value()[0];
  r.mse = mse.value()[0];
  r.msssim_term = msssim_term.value()[0];
  r.lambda1 = lambda1;
  r.lambda2 = lambda2;
  for (const auto& [name, v] : {std::pair{"bpp_y", r.bpp_y}, {"bpp_z", r.bpp_z}, {"mse", r.mse},
                                {"msssim_term", r.msssim_term}}) {
    if (!std::isfinite(v)) throw NumericError(std::string("loss_eval: non-finite ") + name);
  }
  r.total = r.recomposed();
  return g;
}

// ---------------------------------------------------------------------------

DataPipeline::DataPipeline(std::vector<Tensor<float>> images, int64_t batch, int64_t crop, uint64_t seed)
    : images_(std::move(images)), batch_(batch), crop_(crop), seed_(seed) {
  if (images_.empty()) throw Error("DataPipeline: empty corpus");
  for (size_t i = 0; i < images_.size(); ++i) {
    const Shape s = images_[i].shape();
    if (s.n != 1 || s.c != 3 || s.h < crop || s.w < crop) {
      throw Error("DataPipeline: image " + std::to_string(i) + " " + s.str() + " is smaller than the " +
                  std::to_string(crop) + " crop");
    }
  }
  if (batches_per_epoch() < 1) {
    throw Error("DataPipeline: " + std::to_string(images_.size()) + " images cannot fill a batch of " +
                std::to_string(batch));
  }
}

DataPipeline DataPipeline::from_directory(const std::string& dir, int64_t batch, int64_t crop, uint64_t seed) {
  std::vector<Tensor<float>> images;
  for (const std::string& f : list_images(dir)) {
    try {
      images.push_back(read_image(f));
    } catch (const Error& e) {
      std::cerr << "warning: skipping " << f << ": " << e.what() << "\n";
    }
  }
  if (images.empty()) throw Error("DataPipeline: no readable images in '" + dir + "'");
  return DataPipeline(std::move(images), batch, crop, seed);
}

int64_t DataPipeline::batches_per_epoch() const { return static_cast<int64_t>(images_.size()) / batch_; }

std::vector<size_t> DataPipeline::order(int64_t epoch) const {
  std::vector<size_t> idx(images_.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(mix_seed(seed_, static_cast<uint64_t>(epoch), 1));
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

Tensor<float> DataPipeline::batch(int64_t epoch, int64_t index) const {
  if (index < 0 || index >= batches_per_epoch()) throw Error("DataPipeline: batch index out of range");
  const std::vector<size_t> idx = order(epoch);
  Rng rng(mix_seed(mix_seed(seed_, static_cast<uint64_t>(epoch), 2), static_cast<uint64_t>(index)));
  Tensor<float> out(Shape{batch_, 3, crop_, crop_});
  for (int64_t b = 0; b < batch_; ++b) {
    const Tensor<float>& img = images_[idx[static_cast<size_t>(index * batch_ + b)]];
    const Shape s = img.shape();
    const auto oy = static_cast<int64_t>(rng.below(static_cast<uint64_t>(s.h - crop_ + 1)));
    const auto ox = static_cast<int64_t>(rng.below(static_cast<uint64_t>(s.w - crop_ + 1)));
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t r = 0; r < crop_; ++r)
        for (int64_t q = 0; q < crop_; ++q) out.at(b, c, r, q) = img.at(0, c, oy + r, ox + q);
  }
  return out;
}

// ---------------------------------------------------------------------------

StepResult train_step(TreeNet<float>& model, const Tensor<float>& batch, const TrainConfig& cfg, uint64_t step) {
  ParamList<float> params = model.parameters();
  std::vector<Var<float>> vars;
  vars.reserve(params.size());
  for (Parameter<float>* p : params) vars.push_back(p->var);

  StepResult out;
  Rng rng(mix_seed(cfg.seed, step, 3));
  Tape<float> tape;
  try {
    LossGraph g = loss_eval(model, batch, cfg.lambda1, cfg.lambda2, rng, tape);
    out.report = g.report;
    tape.backward(g.loss, vars);
  } catch (const NumericError& e) {
    std::cerr << "warning: step " << step << " skipped: " << e.what() << "\n";
    for (Parameter<float>* p : params) p->clear_grad();
    out.skipped = true;
    out.grad_norm = std::numeric_limits<double>::quiet_NaN();
    return out;
  }
  out.grad_norm = global_grad_norm<float>(params);
  if (!std::isfinite(out.grad_norm)) {
    std::cerr << "warning: step " << step << " skipped: non-finite gradient\n";
    for (Parameter<float>* p : params) p->clear_grad();
    out.skipped = true;
    return out;
  }
  if (out.grad_norm > cfg.clip_norm) scale_grads<float>(params, cfg.clip_norm / out.grad_norm);
  AdamOptions opt;
  opt.lr = cfg.lr;
  adam_step<float>(params, opt);
  return out;
}

namespace {
Tensor<float> scalar_tensor(double v) { return Tensor<float>(Shape{1, 1, 1, 1}, static_cast<float>(v)); }
}  // namespace

Checkpoint make_training_checkpoint(TreeNet<float>& model, int64_t step, int lambda_index) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.records = model_state(model);
  int64_t adam_steps = 0;
  for (Parameter<float>* p : model.parameters()) {
    ckpt.records.emplace_back("optim/m1/" + p->name, p->moment1);
    ckpt.records.emplace_back("optim/m2/" + p->name, p->moment2);
    adam_steps = std::max(adam_steps, p->step_count);
  }
  ckpt.records.emplace_back("meta/step", scalar_tensor(static_cast<double>(step)));
  ckpt.records.emplace_back("meta/adam_steps", scalar_tensor(static_cast<double>(adam_steps)));
  ckpt.records.emplace_back("meta/lambda_index", scalar_tensor(lambda_index));
  return ckpt;
}

int64_t restore_training_checkpoint(TreeNet<float>& model, const Checkpoint& ckpt) {
  load_model_state(model, ckpt);
  const Tensor<float>* adam = ckpt.find("meta/adam_steps");
  for (Parameter<float>* p : model.parameters()) {
    const Tensor<float>* m1 = ckpt.find("optim/m1/" + p->name);
    const Tensor<float>* m2 = ckpt.find("optim/m2/" + p->name);
    if (!m1 || !m2) continue;
    if (!(m1->shape() == p->value().shape()) || !(m2->shape() == p->value().shape())) {
      throw ShapeError("checkpoint: optimizer state for '" + p->name + "' has the wrong shape");
    }
    p->moment1 = *m1;
    p->moment2 = *m2;
    p->step_count = adam ? static_cast<int64_t>((*adam)[0]) : 0;
  }
  const Tensor<float>* step = ckpt.find("meta/step");
  return step ? static_cast<int64_t>((*step)[0]) : 0;
}

TrainedModel load_trained_model(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  TrainedModel out{TreeNet<float>(ckpt.config, 0), 0};
  load_model_state(out.model, ckpt);
  if (const Tensor<float>* li = ckpt.find("meta/lambda_index")) out.lambda_index = static_cast<int>((*li)[0]);
  return out;
}

std::string train_loop(const TrainConfig& cfg, const TrainOptions& options) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (cfg.data_dir.empty()) throw Error("train: data_dir is not set");
  const DataPipeline data = DataPipeline::from_directory(cfg.data_dir, cfg.batch, cfg.crop, cfg.seed);
  TreeNet<float> model(cfg.model, cfg.seed);
  int64_t start = 0;
  if (!options.resume_from.empty()) {
    const Checkpoint ckpt = load_checkpoint(options.resume_from);
    if (!(ckpt.config == cfg.model)) throw Error("train: checkpoint model config differs from the run config");
    start = restore_training_checkpoint(model, ckpt);
  }
  const int64_t bpe = data.batches_per_epoch();
  const int64_t total = cfg.steps > 0 ? cfg.steps : cfg.epochs * bpe;

  fs::create_directories(cfg.out_dir);
  const std::string log_path = (fs::path(cfg.out_dir) / "train_log.csv").string();
  const bool append = start > 0 && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw Error("cannot open '" + log_path + "' for writing");
  if (!append) log << "step,epoch,bpp_y,bpp_z,mse,msssim_term,loss,grad_norm,skipped\n";
  log << std::setprecision(9);

  const std::string ckpt_path = (fs::path(cfg.out_dir) / "checkpoint.tnwt").string();
  for (int64_t step = start; step < total; ++step) {
    const int64_t epoch = step / bpe;
    const StepResult r = train_step(model, data.batch(epoch, step % bpe), cfg, static_cast<uint64_t>(step));
    log << step << ',' << epoch << ',' << r.report.bpp_y << ',' << r.report.bpp_z << ',' << r.report.mse << ','
        << r.report.msssim_term << ',' << r.report.total << ',' << r.grad_norm << ',' << (r.skipped ? 1 : 0)
        << '\n';
    log.flush();
    if (options.on_step) options.on_step(step, r);
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(ckpt_path, make_training_checkpoint(model, step + 1, cfg.lambda_index));
    }
  }
  const std::string final_path = (fs::path(cfg.out_dir) / "model.tnwt").string();
  save_checkpoint(final_path, make_training_checkpoint(model, std::max(start, total), cfg.lambda_index));
  return final_path;
}

}  // namespace treenet
