#include "qmx/losses.hpp"

#include <string>

#include "qmx/errors.hpp"

namespace qmx {
namespace {

void require_class_maps(const torch::Tensor& t, const char* what) {
  if (t.dim() != 3 && t.dim() != 4)
    throw ShapeError(std::string(what) + " must be (C,H,W) or (B,C,H,W)");
}

// Sum over every axis except the class axis (dim -3).
torch::Tensor sum_per_class(const torch::Tensor& t) {
  return t.dim() == 3 ? t.sum({1, 2}) : t.sum({0, 2, 3});
}

}  // namespace

void to_json(nlohmann::json& j, const LossWeights& w) { j = {{"lambda1", w.ssl}, {"lambda2", w.psl}, {"lambda3", w.esl}}; }

void from_json(const nlohmann::json& j, LossWeights& w) {
  j.at("lambda1").get_to(w.ssl);
  j.at("lambda2").get_to(w.psl);
  j.at("lambda3").get_to(w.esl);
}

torch::Tensor one_hot_labels(const torch::Tensor& labels, std::int64_t num_classes, torch::ScalarType dtype) {
  auto oh = torch::one_hot(labels, num_classes).to(dtype);  // (..., H, W, C)
  return labels.dim() == 2 ? oh.permute({2, 0, 1}) : oh.permute({0, 3, 1, 2});
}

torch::Tensor partial_ce(const torch::Tensor& logits, const ScribbleMap& scribble) {
  require_class_maps(logits, "logits");
  const auto& labels = scribble.labels;
  if (labels.dim() != logits.dim() - 1 || labels.size(-1) != logits.size(-1) || labels.size(-2) != logits.size(-2) ||
      (labels.dim() == 3 && labels.size(0) != logits.size(0)))
    throw ShapeError("scribble shape does not match logits");
  const auto classes = logits.size(-3);

  auto annotated = labels != scribble.unknown_code;
  auto bad = annotated & ((labels < 0) | (labels >= classes));
  if (bad.any().item<bool>())
    throw ConfigError("annotated scribble label outside [0, " + std::to_string(classes) + ")");

  const auto count = annotated.sum().item<std::int64_t>();
  if (count == 0) return logits.sum() * 0.0;

  auto log_probs = torch::log_softmax(logits, -3);
  auto safe = torch::where(annotated, labels, torch::zeros_like(labels)).unsqueeze(-3);
  // masked_select keeps unlabeled pixels out of the reduction entirely, so
  // their logits cannot affect the value (not even through inf * 0).
  auto picked = log_probs.gather(-3, safe).squeeze(-3).masked_select(annotated);
  return -picked.sum() / static_cast<double>(count);
}

torch::Tensor mix_pseudo_label(const torch::Tensor& y1_probs, const torch::Tensor& y2_probs, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1), got " + std::to_string(alpha));
  if (y1_probs.sizes() != y2_probs.sizes()) throw ShapeError("y1 and y2 shapes differ");
  require_class_maps(y1_probs, "probabilities");
  torch::NoGradGuard guard;
  return (alpha * y1_probs.detach() + (1.0 - alpha) * y2_probs.detach()).argmax(-3);
}

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target_onehot, bool include_background,
                        double eps) {
  require_class_maps(probs, "probabilities");
  if (probs.sizes() != target_onehot.sizes()) throw ShapeError("dice inputs differ in shape");
  auto target = target_onehot.to(probs.dtype());
  auto inter = sum_per_class(probs * target);
  auto denom = sum_per_class(probs) + sum_per_class(target);
  auto per_class = 1.0 - (2.0 * inter + eps) / (denom + eps);
  if (!include_background) per_class = per_class.slice(0, 1);
  return per_class.mean();
}

torch::Tensor psl_loss(const torch::Tensor& y1_probs, const torch::Tensor& y2_probs, double alpha,
                       bool include_background) {
  auto pseudo = mix_pseudo_label(y1_probs, y2_probs, alpha);
  auto target = one_hot_labels(pseudo, y1_probs.size(-3), y1_probs.scalar_type());
  return 0.5 * (dice_loss(y1_probs, target, include_background) + dice_loss(y2_probs, target, include_background));
}

torch::Tensor esl_loss(const torch::Tensor& edge_pred, const torch::Tensor& edge_gt) {
  if (edge_pred.sizes() != edge_gt.sizes()) throw ShapeError("edge prediction and ground truth differ in shape");
  return (edge_pred - edge_gt.to(edge_pred.dtype())).square().mean();
}

torch::Tensor ssl_loss(const ScribbleMap& scribble, const torch::Tensor& y1_logits, const torch::Tensor& y2_logits) {
  return 0.5 * (partial_ce(y1_logits, scribble) + partial_ce(y2_logits, scribble));
}

torch::Tensor total_loss(const LossComponents& parts, const LossWeights& w) {
  torch::Tensor total;
  auto add = [&](const torch::Tensor& term, double weight) {
    if (!term.defined()) return;
    auto weighted = weight * term;
    total = total.defined() ? total + weighted : weighted;
  };
  add(parts.ssl, w.ssl);
  add(parts.psl, w.psl);
  add(parts.esl, w.esl);
  if (!total.defined()) throw ConfigError("total_loss needs at least one component");
  return total;
}

double total_loss(double ssl, double psl, double esl, const LossWeights& w) {
  return w.ssl * ssl + w.psl * psl + w.esl * esl;
}

}  // namespace qmx
