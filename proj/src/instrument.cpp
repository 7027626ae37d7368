#include "qmx/instrument.hpp"

#include <cmath>

namespace qmx {
namespace {
thread_local OpCounts* active_counts = nullptr;
}  // namespace

CountScope::CountScope() : previous_(active_counts) { active_counts = &counts_; }

CountScope::~CountScope() { active_counts = previous_; }

namespace ops {

torch::Tensor conv(torch::nn::Conv2d& layer, const torch::Tensor& x) {
  auto y = layer->forward(x);
  if (active_counts) {
    const auto& opt = layer->options;
    const auto kernel = (*opt.kernel_size())[0] * (*opt.kernel_size())[1];
    active_counts->conv_macs += y.numel() * (opt.in_channels() / opt.groups()) * kernel;
  }
  return y;
}

torch::Tensor linear(torch::nn::Linear& layer, const torch::Tensor& x) {
  auto y = layer->forward(x);
  if (active_counts) active_counts->linear_macs += y.numel() * layer->options.in_features();
  return y;
}

torch::Tensor attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                        const torch::Tensor& bias) {
  const auto head_dim = q.size(-1);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) * (1.0 / std::sqrt(static_cast<double>(head_dim)));
  if (bias.defined()) scores = scores + bias;
  auto out = torch::matmul(scores.softmax(-1), v);
  if (active_counts) {
    active_counts->attention_scores += scores.numel();
    active_counts->attention_macs += scores.numel() * head_dim * 2;
  }
  return out;
}

}  // namespace ops
}  // namespace qmx
