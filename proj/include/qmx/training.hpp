#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "qmx/checkpoint.hpp"
#include "qmx/data.hpp"
#include "qmx/losses.hpp"
#include "qmx/metrics.hpp"
#include "qmx/model.hpp"

namespace qmx {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::int64_t epochs = 200;
  std::int64_t batch_size = 8;
  LossWeights loss_weights;
  ModelConfig model = ModelConfig::desk();
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  bool dice_include_background = true;
  bool augment = true;

  std::int64_t image_size() const { return model.input_size(); }
  const ComponentToggles& toggles() const { return model.toggles; }
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Cosine annealing from cfg.lr down to 0 over `total_steps`.
double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);

/// Stacked tensors for one mini-batch.
struct Batch {
  torch::Tensor image;     // (B, C, S, S) float
  torch::Tensor scribble;  // (B, S, S) int64, unknown = num_classes
  torch::Tensor edge_gt;   // (B, 1, S, S) float
  std::int64_t unknown_code = 4;
};

Batch make_batch(const std::vector<ImageSample>& samples, torch::ScalarType dtype = torch::kFloat32);
torch::Tensor image_tensor(const cv::Mat& image);

/// Loss terms for one forward pass. ssl falls back to partial_ce(y1) when the
/// model has no y2; psl is absent without y2 and esl without edge_pred.
LossComponents compute_losses(const ModelOutputs& out, const Batch& batch, double alpha, const TrainConfig& cfg);

struct StepRecord {
  double total = 0.0, ssl = 0.0, psl = 0.0, esl = 0.0;
  double alpha = 0.0;
};

struct TrainState {
  explicit TrainState(const TrainConfig& cfg);

  TrainConfig cfg;
  QMaxViTUnet model{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer;
  std::mt19937_64 rng;
  std::int64_t step = 0;

  void set_lr(double lr);
  double draw_alpha();
};

/// One optimizer update on `batch`. Throws NumericError on a non-finite loss.
StepRecord train_step(TrainState& state, const Batch& batch, double alpha);

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based
  double loss_total = 0.0, loss_ssl = 0.0, loss_psl = 0.0, loss_esl = 0.0;
  double val_dsc = std::numeric_limits<double>::quiet_NaN();
  double val_hd95 = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  void write_csv(const std::filesystem::path& path) const;
  static TrainHistory read_csv(const std::filesystem::path& path);
};

struct FitOptions {
  std::filesystem::path out_dir;  // checkpoints + history when non-empty
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  TrainHistory history;
  Checkpoint best;  // best validation DSC, or the last epoch without a validation split
  std::int64_t best_epoch = 0;
  std::vector<double> alphas;
};

FitResult fit(const TrainConfig& cfg, const std::vector<ImageSample>& train, const std::vector<ImageSample>& val,
              const FitOptions& opts = {});

/// Argmax of y1 for each sample, CV_32SC1.
std::vector<cv::Mat> predict(QMaxViTUnet& model, const std::vector<ImageSample>& samples, std::int64_t batch_size = 8);

struct Evaluation {
  MetricReport summary;
  std::vector<MetricReport> per_sample;
  std::vector<cv::Mat> predictions;
};

/// Metrics of the y1 prediction against dense_gt. Every sample must carry
/// dense_gt and use the model's class count.
Evaluation evaluate(QMaxViTUnet& model, const std::vector<ImageSample>& samples, std::int64_t batch_size = 8);

/// The eight dual/query/edge combinations: dual outermost, edge innermost,
/// all-off first.
std::vector<ComponentToggles> toggle_grid();

struct WeightSet {
  std::string name;
  LossWeights weights;
};

/// Loss-weight ablation sets #1..#4; #4 is the default (1, 0.5, 0.2).
std::vector<WeightSet> weight_grid();

// Checkpoints embed {"config": TrainConfig, "epoch", "step", "rng"}.
Checkpoint model_checkpoint(const QMaxViTUnet& model, const TrainConfig& cfg, nlohmann::json extra = {});
QMaxViTUnet load_model(const Checkpoint& ckpt, TrainConfig* cfg_out = nullptr);
QMaxViTUnet load_model(const std::filesystem::path& path, TrainConfig* cfg_out = nullptr);

}  // namespace qmx
