#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "qmx/backbone.hpp"
#include "qmx/edge.hpp"

namespace qmx {

struct RefinedBottleneck {
  FeatureMap features;  // same shape as E4
  QuerySet updated_queries;
};

/// Fixed 2-D sine/cosine embedding, (1, channels, height, width). Half of the
/// channels encode the row, half the column.
torch::Tensor sinusoidal_position_embedding(std::int64_t channels, std::int64_t height, std::int64_t width,
                                            torch::TensorOptions options = {});

/// Multi-head attention whose internal width is `dim / downsample`.
class TokenAttentionImpl : public torch::nn::Module {
 public:
  TokenAttentionImpl(std::int64_t dim, std::int64_t heads, std::int64_t downsample = 1);
  torch::Tensor forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v);

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

 private:
  std::int64_t heads_;
};
TORCH_MODULE(TokenAttention);

/// One two-way round: query self-attention, query-to-feature cross-attention,
/// query MLP, feature-to-query cross-attention. Post-norm residuals.
class TwoWayLayerImpl : public torch::nn::Module {
 public:
  TwoWayLayerImpl(std::int64_t dim, std::int64_t heads, double mlp_ratio, std::int64_t cross_downsample);

  // queries (B, K, D), keys (B, N, D), key_pe (1 or B, N, D). Returns updated pair.
  std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor queries, torch::Tensor keys, const torch::Tensor& key_pe);

  TokenAttention self_attn{nullptr}, query_to_feature{nullptr}, feature_to_query{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr}, norm4{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(TwoWayLayer);

/// Query-guided two-way Transformer refining the bottleneck and the class
/// queries together.
class TwoWayTransformerImpl : public torch::nn::Module {
 public:
  TwoWayTransformerImpl(std::int64_t dim, std::int64_t layers = 2, std::int64_t heads = 8, double mlp_ratio = 4.0,
                        std::int64_t cross_downsample = 2);

  RefinedBottleneck forward(const FeatureMap& bottleneck, const QuerySet& queries);

  std::int64_t num_layers() const { return static_cast<std::int64_t>(layers->size()); }

  torch::nn::ModuleList layers;

 private:
  std::int64_t dim_;
};
TORCH_MODULE(TwoWayTransformer);

/// Pyramid pooling on E4 followed by a top-down FPN over E3 and E2; output at
/// stride 8 with `fpn_channels` channels.
class PPMFPNImpl : public torch::nn::Module {
 public:
  PPMFPNImpl(std::int64_t c2, std::int64_t c3, std::int64_t c4, std::int64_t fpn_channels = 256,
             std::array<std::int64_t, 4> bins = {1, 2, 3, 6});

  FeatureMap forward(const FeatureMap& e2, const FeatureMap& e3, const FeatureMap& e4);

  // Adaptive-average-pooled E4 for each bin (before the per-bin convolution).
  std::vector<torch::Tensor> pool_bins(const torch::Tensor& e4) const;

  std::vector<torch::nn::Conv2d> ppm_convs;
  torch::nn::Conv2d ppm_merge{nullptr}, lateral3{nullptr}, lateral2{nullptr}, smooth{nullptr};

 private:
  std::array<std::int64_t, 4> bins_;
};
TORCH_MODULE(PPMFPN);

/// y2: per-pixel dot products between projected queries and fused features,
/// bilinearly upsampled to the output size. Bias-free, so the logits are
/// linear in the queries.
class AuxMaskHeadImpl : public torch::nn::Module {
 public:
  AuxMaskHeadImpl(std::int64_t d_e4, std::int64_t fpn_channels);

  torch::Tensor forward(const QuerySet& queries, const FeatureMap& fused, std::int64_t out_size);

  torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(AuxMaskHead);

}  // namespace qmx
