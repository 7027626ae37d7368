#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace qmx {

/// Sparse labels: entries are class ids in [0, num_classes) or `unknown_code`
/// for unlabeled pixels. `labels` is an int64 tensor of shape (H, W) or
/// (B, H, W).
struct ScribbleMap {
  torch::Tensor labels;
  std::int64_t unknown_code = 255;
};

struct LossWeights {
  double ssl = 1.0;  // lambda1
  double psl = 0.5;  // lambda2
  double esl = 0.2;  // lambda3
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossComponents {
  torch::Tensor ssl, psl, esl;  // undefined when the term is absent
};

constexpr double kDiceEpsilon = 1e-5;

// All functions accept a single map (C, H, W) or a batch (B, C, H, W); the
// class axis is dim -3 and batch pixels are pooled.

/// Mean over annotated pixels of -log softmax(logits)[label]. Zero (still
/// attached to the graph) when nothing is annotated.
torch::Tensor partial_ce(const torch::Tensor& logits, const ScribbleMap& scribble);

/// Hard pseudo label argmax(alpha * y1 + (1 - alpha) * y2) over the class
/// axis. Computed without autograd. alpha must lie in (0, 1).
torch::Tensor mix_pseudo_label(const torch::Tensor& y1_probs, const torch::Tensor& y2_probs, double alpha);

/// Mean over classes of 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps).
/// With include_background = false, class 0 is left out of the mean.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target_onehot, bool include_background = true,
                        double eps = kDiceEpsilon);

/// 1/2 [dice(y1, Y) + dice(y2, Y)] with Y = mix_pseudo_label(y1, y2, alpha).
torch::Tensor psl_loss(const torch::Tensor& y1_probs, const torch::Tensor& y2_probs, double alpha,
                       bool include_background = true);

/// Mean squared error over all pixels.
torch::Tensor esl_loss(const torch::Tensor& edge_pred, const torch::Tensor& edge_gt);

/// 1/2 [partial_ce(y1) + partial_ce(y2)].
torch::Tensor ssl_loss(const ScribbleMap& scribble, const torch::Tensor& y1_logits, const torch::Tensor& y2_logits);

/// lambda1 * ssl + lambda2 * psl + lambda3 * esl; absent terms contribute
/// nothing.
torch::Tensor total_loss(const LossComponents& parts, const LossWeights& w);
double total_loss(double ssl, double psl, double esl, const LossWeights& w);

/// One-hot encoding along a new class axis at dim -3.
torch::Tensor one_hot_labels(const torch::Tensor& labels, std::int64_t num_classes, torch::ScalarType dtype);

}  // namespace qmx
