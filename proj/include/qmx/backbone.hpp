#pragma once

#include <array>
#include <cstdint>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace qmx {

/// A batch of feature maps (batch x channels x height x width) tagged with its
/// downsampling factor relative to the network input.
struct FeatureMap {
  torch::Tensor data;
  std::int64_t stride = 1;

  std::int64_t channels() const { return data.size(1); }
  std::int64_t height() const { return data.size(2); }
  std::int64_t width() const { return data.size(3); }
};

/// Encoder outputs at strides 4, 8, 16 and 32.
struct FeaturePyramid {
  FeatureMap e1, e2, e3, e4;

  std::int64_t d_e4() const { return e4.channels(); }
};

struct BackboneConfig {
  std::int64_t base_channels = 96;
  std::array<std::int64_t, 4> depths{2, 2, 5, 2};
  std::int64_t window_size = 0;  // 0: input_size / 32
  std::int64_t grid_size = 0;    // 0: input_size / 32
  std::array<std::int64_t, 4> num_heads{0, 0, 0, 0};  // 0: channels / head_dim
  std::int64_t head_dim = 32;
  std::int64_t input_size = 256;
  double mlp_ratio = 4.0;
  double stochastic_depth = 0.0;

  std::int64_t stage_channels(int stage) const { return base_channels << stage; }
  std::int64_t heads(int stage) const;
  std::int64_t window() const { return window_size > 0 ? window_size : input_size / 32; }
  std::int64_t grid() const { return grid_size > 0 ? grid_size : input_size / 32; }

  // Throws ConfigError when the input size or partition sizes do not tile
  // every stage.
  void validate() const;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

// Stochastic depth on a residual branch (per-sample).
torch::Tensor drop_path(const torch::Tensor& x, double p, bool training);

// ---------------------------------------------------------------------------

/// 3x3 convolution + batch norm + ReLU lifting a grayscale image to the three
/// channels the encoder expects.
class GrayProjectionImpl : public torch::nn::Module {
 public:
  explicit GrayProjectionImpl(bool bias = true);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d norm{nullptr};
};
TORCH_MODULE(GrayProjection);

class SqueezeExciteImpl : public torch::nn::Module {
 public:
  SqueezeExciteImpl(std::int64_t channels, std::int64_t reduced);
  torch::Tensor forward(const torch::Tensor& x);

  // Replaces the sigmoid gate by ones (testing hook).
  bool force_identity = false;

  torch::nn::Conv2d reduce{nullptr}, expand{nullptr};
};
TORCH_MODULE(SqueezeExcite);

/// Inverted-bottleneck block: pre-norm, 1x1 expansion (x4), depthwise 3x3
/// (stride 2 when downsampling), squeeze-excitation, 1x1 projection, plus a
/// shortcut that average-pools and/or projects when the shape changes.
class MBConvImpl : public torch::nn::Module {
 public:
  MBConvImpl(std::int64_t in_channels, std::int64_t out_channels, bool downsample, double expand_ratio = 4.0,
             double se_ratio = 0.25);
  torch::Tensor forward(const torch::Tensor& x);

  bool use_se = true;
  double drop_path_rate = 0.0;
  bool downsample() const { return downsample_; }
  bool has_projection() const { return !shortcut_proj.is_empty(); }

  torch::nn::BatchNorm2d pre_norm{nullptr};
  torch::nn::Conv2d expand{nullptr};
  torch::nn::BatchNorm2d expand_norm{nullptr};
  torch::nn::Conv2d depthwise{nullptr};
  torch::nn::BatchNorm2d depthwise_norm{nullptr};
  SqueezeExcite se{nullptr};
  torch::nn::Conv2d project{nullptr};
  torch::nn::Conv2d shortcut_proj{nullptr};

 private:
  bool downsample_;
};
TORCH_MODULE(MBConv);

enum class Partition { block, grid };

/// Multi-head self-attention with a learned relative position bias over
/// partitions of `size` x `size` tokens.
class RelativeAttentionImpl : public torch::nn::Module {
 public:
  RelativeAttentionImpl(std::int64_t dim, std::int64_t heads, std::int64_t size);
  // tokens: (groups, size*size, dim)
  torch::Tensor forward(const torch::Tensor& tokens);

  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  torch::Tensor bias_table;  // ((2*size-1)^2, heads)

 private:
  std::int64_t heads_, size_;
  torch::Tensor bias_index_;  // (size*size*size*size), not persisted
};
TORCH_MODULE(RelativeAttention);

/// Block (local window) or grid (dilated, strided) attention followed by an
/// MLP, both pre-norm with residuals. Operates on NCHW maps whose sides are
/// multiples of `size`.
class PartitionAttentionImpl : public torch::nn::Module {
 public:
  PartitionAttentionImpl(Partition kind, std::int64_t dim, std::int64_t heads, std::int64_t size,
                         double mlp_ratio = 4.0);
  torch::Tensor forward(const torch::Tensor& x);

  // Just x + attention(norm(x)), without the MLP.
  torch::Tensor attention_sublayer(const torch::Tensor& x);

  Partition kind() const { return kind_; }
  double drop_path_rate = 0.0;

  torch::nn::LayerNorm attn_norm{nullptr}, mlp_norm{nullptr};
  RelativeAttention attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};

 private:
  torch::Tensor partition(const torch::Tensor& nhwc) const;
  torch::Tensor unpartition(const torch::Tensor& tokens, std::int64_t batch, std::int64_t h, std::int64_t w) const;

  Partition kind_;
  std::int64_t size_;
};
TORCH_MODULE(PartitionAttention);

/// Global self-attention over every token of the map. Only used as the
/// quadratic-cost reference in complexity checks.
class FullAttentionImpl : public torch::nn::Module {
 public:
  FullAttentionImpl(std::int64_t dim, std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear qkv{nullptr}, proj{nullptr};

 private:
  std::int64_t heads_;
};
TORCH_MODULE(FullAttention);

class MaxViTBlockImpl : public torch::nn::Module {
 public:
  MaxViTBlockImpl(std::int64_t in_channels, std::int64_t out_channels, bool downsample, std::int64_t heads,
                  std::int64_t window, std::int64_t grid, double mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x);
  void set_drop_path(double rate);

  MBConv mbconv{nullptr};
  PartitionAttention block_attn{nullptr}, grid_attn{nullptr};
};
TORCH_MODULE(MaxViTBlock);

/// `depth` MaxViT blocks; the first one changes width and optionally halves
/// the resolution.
class MaxViTStageImpl : public torch::nn::Module {
 public:
  MaxViTStageImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t depth, bool downsample,
                  std::int64_t heads, std::int64_t window, std::int64_t grid, double mlp_ratio = 4.0);
  torch::Tensor forward(torch::Tensor x);

  torch::nn::ModuleList blocks;
};
TORCH_MODULE(MaxViTStage);

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(BackboneConfig cfg);

  // image: (batch, 3, input_size, input_size)
  FeaturePyramid forward(const torch::Tensor& image);

  const BackboneConfig& config() const { return cfg_; }

  torch::nn::Conv2d stem_conv1{nullptr}, stem_conv2{nullptr};
  torch::nn::BatchNorm2d stem_norm{nullptr};
  torch::nn::ModuleList stages;

 private:
  BackboneConfig cfg_;
};
TORCH_MODULE(Backbone);

}  // namespace qmx
