#pragma once

// Rate-distortion training: configuration, data pipeline, loss and loop.

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "treenet/model.hpp"

namespace treenet {

/// (lambda1, lambda2) operating points, matched by index.
inline constexpr std::array<std::pair<double, double>, 4> kLambdaPairs = {
    {{0.01, 2.4}, {0.005, 1.2}, {0.0025, 0.6}, {0.00125, 0.3}}};

struct TrainConfig {
  double lambda1 = kLambdaPairs[0].first;
  double lambda2 = kLambdaPairs[0].second;
  int lambda_index = 0;
  int64_t batch = 16;
  int64_t crop = 256;
  double lr = 1e-4;
  int64_t epochs = 50;
  int64_t steps = 0;  // when > 0, stop after this many optimizer steps instead
  uint64_t seed = 1;
  std::string data_dir;
  std::string out_dir = ".";
  int64_t checkpoint_every = 500;
  double clip_norm = 1.0;
  ModelConfig model;

  /// Throws Error on out-of-range values.
  void validate() const;
};

/// `key = value` lines; '#' starts a comment. Throws Error with the line number
/// on malformed lines and on duplicate keys.
std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& source);

/// Applies parsed entries to `cfg`; unknown keys are reported together in one Error.
/// Setting lambda_index also selects its lambda pair unless lambda1 / lambda2 are given.
void apply_config(const std::map<std::string, std::string>& kv, TrainConfig& cfg);

/// Keys accepted by apply_config.
const std::vector<std::string>& config_keys();

/// "key = value" dump of every field.
std::string describe(const TrainConfig& cfg);

struct LossReport {
  double bpp_y = 0;
  double bpp_z = 0;
  double mse = 0;           // 0-255 scale
  double msssim_term = 0;   // 1 - MS-SSIM
  double total = 0;
  double lambda1 = 0;
  double lambda2 = 0;

  double bpp() const { return bpp_y + bpp_z; }
  /// bpp + lambda1 mse + lambda2 msssim_term recomputed from the parts.
  double recomposed() const { return bpp_y + bpp_z + lambda1 * mse + lambda2 * msssim_term; }
};

struct LossGraph {
  LossReport report;
  Var<float> loss;
};

/// Noise-quantized loss of a batch of padded images in [0, 1]. Throws Error
/// naming the component when one is not finite.
LossGraph loss_eval(const TreeNet<float>& model, const Tensor<float>& batch, double lambda1,
                    double lambda2, Rng& rng, Tape<float>& tape);

/// Per-epoch shuffled random crops over an in-memory image list.
class DataPipeline {
 public:
  DataPipeline(std::vector<Tensor<float>> images, int64_t batch, int64_t crop, uint64_t seed);
  /// Loads every readable image in `dir` (sorted by name).
  static DataPipeline from_directory(const std::string& dir, int64_t batch, int64_t crop, uint64_t seed);

  /// Full batches per epoch; a trailing partial batch is dropped.
  int64_t batches_per_epoch() const;
  /// Batch number `index` of `epoch`; depends only on (seed, epoch, index).
  Tensor<float> batch(int64_t epoch, int64_t index) const;
  /// Image order of an epoch.
  std::vector<size_t> order(int64_t epoch) const;
  size_t size() const { return images_.size(); }

 private:
  std::vector<Tensor<float>> images_;
  int64_t batch_, crop_;
  uint64_t seed_;
};

struct StepResult {
  LossReport report;
  double grad_norm = 0;
  bool skipped = false;
};

/// One backward pass and Adam update with gradient-norm clipping. A non-finite
/// loss or gradient skips the update.
StepResult train_step(TreeNet<float>& model, const Tensor<float>& batch, const TrainConfig& cfg,
                      uint64_t step);

/// Model weights plus optimizer state and step counter.
Checkpoint make_training_checkpoint(TreeNet<float>& model, int64_t step, int lambda_index);
/// Restores weights and, when present, optimizer state; returns the stored step (0 if absent).
int64_t restore_training_checkpoint(TreeNet<float>& model, const Checkpoint& ckpt);

/// Model weights plus the lambda index stored by training.
struct TrainedModel {
  TreeNet<float> model;
  int lambda_index = 0;
};
TrainedModel load_trained_model(const std::string& path);

struct TrainOptions {
  std::string resume_from;  // checkpoint to continue from, empty for a fresh start
  std::function<void(int64_t step, const StepResult&)> on_step;
};

/// Trains until `cfg.steps` (or `cfg.epochs` full epochs). Writes
/// `<out_dir>/train_log.csv`, periodic `<out_dir>/checkpoint.tnwt` and the final
/// `<out_dir>/model.tnwt`, whose path is returned.
std::string train_loop(const TrainConfig& cfg, const TrainOptions& options = {});

/// Mixes a seed with stream identifiers (splitmix64).
uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b = 0);

}  // namespace treenet
