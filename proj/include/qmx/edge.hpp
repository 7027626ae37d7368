#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "qmx/backbone.hpp"

namespace qmx {

struct EdgeOutputs {
  torch::Tensor edge_pred;        // (B, 1, H/4, W/4), linear (regressed with MSE)
  FeatureMap edge_attention;      // MaxViT-stage output at stride 4
  std::vector<FeatureMap> d_block_injections;  // edge_attention resampled to strides 8 and 4
};

/// Per-class query vectors, (batch, num_classes, d_e4). Columns
/// [0, d_e4/2) are the learnable (zero-initialized) part, [d_e4/2, d_e4) the
/// edge-conditioned part.
struct QuerySet {
  torch::Tensor queries;

  std::int64_t num_classes() const { return queries.size(1); }
  std::int64_t width() const { return queries.size(2); }
};

/// conv1x1 -> BN -> ReLU -> conv3x3 -> BN -> ReLU.
class ConvPairImpl : public torch::nn::Module {
 public:
  ConvPairImpl(std::int64_t in_channels, std::int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv3{nullptr};
  torch::nn::BatchNorm2d norm1{nullptr}, norm3{nullptr};
};
TORCH_MODULE(ConvPair);

/// Edge enhancement on the two shallowest encoder levels: E2 is upsampled to
/// E1's resolution, both pass a 1x1-3x3 conv pair, and the concatenation feeds
/// an edge-map head and a MaxViT stage producing edge attention features.
class EdgeEnhanceImpl : public torch::nn::Module {
 public:
  EdgeEnhanceImpl(const BackboneConfig& backbone, std::int64_t edge_channels = 64);

  EdgeOutputs forward(const FeatureMap& e1, const FeatureMap& e2);

  std::int64_t edge_channels() const { return edge_channels_; }

  ConvPair e1_branch{nullptr}, e2_branch{nullptr};
  torch::nn::Conv2d edge_head{nullptr};
  MaxViTStage attention_stage{nullptr};

 private:
  std::int64_t edge_channels_;
};
TORCH_MODULE(EdgeEnhance);

/// Seeds the class queries: edge attention is adaptive-pooled to one vector
/// per class, mapped by a linear layer to d_e4/2, and placed next to
/// zero-initialized learnable queries of width d_e4/2.
class QueryEnhancerImpl : public torch::nn::Module {
 public:
  QueryEnhancerImpl(std::int64_t edge_channels, std::int64_t num_classes, std::int64_t d_e4);

  QuerySet forward(const FeatureMap& edge_attention);

  torch::Tensor learnable;  // (num_classes, d_e4/2), zero-initialized
  torch::nn::Linear proj{nullptr};

 private:
  std::int64_t num_classes_;
};
TORCH_MODULE(QueryEnhancer);

}  // namespace qmx
