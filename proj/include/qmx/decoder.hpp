#pragma once

#include <array>
#include <cstdint>
#include <span>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "qmx/backbone.hpp"

namespace qmx {

struct DecoderConfig {
  std::int64_t num_classes = 4;
  std::array<std::int64_t, 3> d_block_depths{1, 1, 1};
  bool fuse_edge = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);

/// Adds an edge feature map to a decoder feature map after resampling it to
/// the decoder resolution (area pooling down, bilinear up) and matching
/// channels with a bias-free 1x1 convolution.
class EdgeFusionImpl : public torch::nn::Module {
 public:
  EdgeFusionImpl(std::int64_t edge_channels, std::int64_t out_channels, bool resample = true);

  torch::Tensor forward(const torch::Tensor& decoder_feat, const torch::Tensor& edge_feat);
  // The additive term alone: project(resample(edge_feat)).
  torch::Tensor projected(const torch::Tensor& edge_feat, std::int64_t height, std::int64_t width);

  bool resample;
  torch::nn::Conv2d proj{nullptr};
};
TORCH_MODULE(EdgeFusion);

/// One upsampling D-block: 2x bilinear + 1x1 conv, concatenation with the
/// matching encoder skip, 1x1 reduction, then a MaxViT stage.
class DecoderBlockImpl : public torch::nn::Module {
 public:
  DecoderBlockImpl(std::int64_t in_channels, std::int64_t skip_channels, std::int64_t out_channels, std::int64_t depth,
                   std::int64_t heads, std::int64_t window, std::int64_t grid, double mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

  torch::nn::Conv2d up_proj{nullptr}, reduce{nullptr};
  MaxViTStage stage{nullptr};
};
TORCH_MODULE(DecoderBlock);

/// Mirrored decoder: three D-blocks (strides 32 -> 16 -> 8 -> 4) consuming
/// E3, E2, E1, optional edge injections into the stride-8 and stride-4
/// blocks, and a 1x1 head upsampled 4x to full-resolution logits y1.
class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl(DecoderConfig cfg, const BackboneConfig& backbone, std::int64_t edge_channels);

  // `edge_feats` holds the stride-8 and stride-4 injections (in that order) or
  // is empty. It is ignored when fuse_edge is off.
  torch::Tensor forward(const FeatureMap& bottleneck, const FeaturePyramid& skips,
                        std::span<const FeatureMap> edge_feats = {});

  const DecoderConfig& config() const { return cfg_; }

  torch::nn::ModuleList blocks;
  EdgeFusion fuse_s8{nullptr}, fuse_s4{nullptr};
  torch::nn::Conv2d head{nullptr};

 private:
  DecoderConfig cfg_;
};
TORCH_MODULE(Decoder);

}  // namespace qmx
