#include "qmx/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qmx/errors.hpp"
#include "qmx/instrument.hpp"

namespace nn = torch::nn;

namespace qmx {
namespace {

nn::Conv2d conv2d(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1, bool bias = true,
                  std::int64_t groups = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(bias).groups(groups));
}

std::string shape_str(const torch::Tensor& t) {
  std::string s = "[";
  for (std::int64_t i = 0; i < t.dim(); ++i) s += (i ? "x" : "") + std::to_string(t.size(i));
  return s + "]";
}

}  // namespace

std::int64_t BackboneConfig::heads(int stage) const {
  if (num_heads[stage] > 0) return num_heads[stage];
  return std::max<std::int64_t>(1, stage_channels(stage) / head_dim);
}

void BackboneConfig::validate() const {
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (input_size < 32 || input_size % 32 != 0)
    throw ConfigError("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
  if (window() < 1 || grid() < 1) throw ConfigError("window and grid sizes must be >= 1");
  for (int i = 0; i < 4; ++i) {
    if (depths[i] < 1) throw ConfigError("every stage depth must be >= 1");
    const auto side = input_size >> (2 + i);
    if (side % window() != 0 || side % grid() != 0)
      throw ConfigError("stage " + std::to_string(i) + " side " + std::to_string(side) +
                        " is not divisible by window/grid size");
    if (stage_channels(i) % heads(i) != 0) throw ConfigError("stage channels must be divisible by head count");
  }
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"base_channels", c.base_channels}, {"depths", c.depths},         {"window_size", c.window_size},
       {"grid_size", c.grid_size},         {"num_heads", c.num_heads},   {"head_dim", c.head_dim},
       {"input_size", c.input_size},       {"mlp_ratio", c.mlp_ratio},   {"stochastic_depth", c.stochastic_depth}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  j.at("base_channels").get_to(c.base_channels);
  j.at("depths").get_to(c.depths);
  j.at("window_size").get_to(c.window_size);
  j.at("grid_size").get_to(c.grid_size);
  j.at("num_heads").get_to(c.num_heads);
  j.at("head_dim").get_to(c.head_dim);
  j.at("input_size").get_to(c.input_size);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("stochastic_depth").get_to(c.stochastic_depth);
}

torch::Tensor drop_path(const torch::Tensor& x, double p, bool training) {
  if (p <= 0.0 || !training) return x;
  auto keep = torch::empty({x.size(0), 1, 1, 1}, x.options()).bernoulli_(1.0 - p);
  return x * keep / (1.0 - p);
}

// ---------------------------------------------------------------------------

GrayProjectionImpl::GrayProjectionImpl(bool bias) {
  conv = register_module("conv", conv2d(1, 3, 3, 1, bias));
  norm = register_module("norm", nn::BatchNorm2d(3));
}

torch::Tensor GrayProjectionImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 1) throw ShapeError("gray projection expects (B,1,H,W), got " + shape_str(x));
  return torch::relu(norm(ops::conv(conv, x)));
}

SqueezeExciteImpl::SqueezeExciteImpl(std::int64_t channels, std::int64_t reduced) {
  reduce = register_module("reduce", conv2d(channels, reduced, 1));
  expand = register_module("expand", conv2d(reduced, channels, 1));
}

torch::Tensor SqueezeExciteImpl::forward(const torch::Tensor& x) {
  if (force_identity) return x;
  auto s = x.mean({2, 3}, /*keepdim=*/true);
  s = torch::sigmoid(ops::conv(expand, torch::silu(ops::conv(reduce, s))));
  return x * s;
}

MBConvImpl::MBConvImpl(std::int64_t in_channels, std::int64_t out_channels, bool downsample, double expand_ratio,
                       double se_ratio)
    : downsample_(downsample) {
  const auto mid = static_cast<std::int64_t>(std::lround(out_channels * expand_ratio));
  const auto reduced = std::max<std::int64_t>(1, std::lround(in_channels * se_ratio));
  pre_norm = register_module("pre_norm", nn::BatchNorm2d(in_channels));
  expand = register_module("expand", conv2d(in_channels, mid, 1, 1, false));
  expand_norm = register_module("expand_norm", nn::BatchNorm2d(mid));
  depthwise = register_module("depthwise", conv2d(mid, mid, 3, downsample ? 2 : 1, false, mid));
  depthwise_norm = register_module("depthwise_norm", nn::BatchNorm2d(mid));
  se = register_module("se", SqueezeExcite(mid, reduced));
  project = register_module("project", conv2d(mid, out_channels, 1));
  if (in_channels != out_channels) shortcut_proj = register_module("shortcut_proj", conv2d(in_channels, out_channels, 1));
}

torch::Tensor MBConvImpl::forward(const torch::Tensor& x) {
  auto shortcut = downsample_ ? torch::avg_pool2d(x, 2) : x;
  if (!shortcut_proj.is_empty()) shortcut = ops::conv(shortcut_proj, shortcut);

  auto h = pre_norm(x);
  h = torch::gelu(expand_norm(ops::conv(expand, h)));
  h = torch::gelu(depthwise_norm(ops::conv(depthwise, h)));
  if (use_se) h = se(h);
  h = ops::conv(project, h);
  return shortcut + drop_path(h, drop_path_rate, is_training());
}

RelativeAttentionImpl::RelativeAttentionImpl(std::int64_t dim, std::int64_t heads, std::int64_t size)
    : heads_(heads), size_(size) {
  qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
  proj = register_module("proj", nn::Linear(dim, dim));
  const auto span = 2 * size - 1;
  bias_table = register_parameter("bias_table", torch::zeros({span * span, heads}));
  nn::init::normal_(bias_table, 0.0, 0.02);

  const auto tokens = size * size;
  auto index = torch::empty({tokens * tokens}, torch::kLong);
  auto acc = index.accessor<std::int64_t, 1>();
  for (std::int64_t a = 0; a < tokens; ++a)
    for (std::int64_t b = 0; b < tokens; ++b) {
      const auto dy = a / size - b / size + size - 1;
      const auto dx = a % size - b % size + size - 1;
      acc[a * tokens + b] = dy * span + dx;
    }
  bias_index_ = index;
}

torch::Tensor RelativeAttentionImpl::forward(const torch::Tensor& tokens) {
  const auto groups = tokens.size(0), n = tokens.size(1), dim = tokens.size(2);
  auto qkv_t = ops::linear(qkv, tokens).view({groups, n, 3, heads_, dim / heads_}).permute({2, 0, 3, 1, 4});
  auto bias = bias_table.index_select(0, bias_index_).view({n, n, heads_}).permute({2, 0, 1}).unsqueeze(0);
  auto out = ops::attention(qkv_t[0], qkv_t[1], qkv_t[2], bias);
  out = out.transpose(1, 2).reshape({groups, n, dim});
  return ops::linear(proj, out);
}

PartitionAttentionImpl::PartitionAttentionImpl(Partition kind, std::int64_t dim, std::int64_t heads, std::int64_t size,
                                               double mlp_ratio)
    : kind_(kind), size_(size) {
  const auto hidden = static_cast<std::int64_t>(std::lround(dim * mlp_ratio));
  attn_norm = register_module("attn_norm", nn::LayerNorm(nn::LayerNormOptions({dim})));
  attn = register_module("attn", RelativeAttention(dim, heads, size));
  mlp_norm = register_module("mlp_norm", nn::LayerNorm(nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", nn::Linear(dim, hidden));
  fc2 = register_module("fc2", nn::Linear(hidden, dim));
}

torch::Tensor PartitionAttentionImpl::partition(const torch::Tensor& x) const {
  const auto b = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3), p = size_;
  if (kind_ == Partition::block)
    return x.view({b, h / p, p, w / p, p, c}).permute({0, 1, 3, 2, 4, 5}).reshape({-1, p * p, c});
  return x.view({b, p, h / p, p, w / p, c}).permute({0, 2, 4, 1, 3, 5}).reshape({-1, p * p, c});
}

torch::Tensor PartitionAttentionImpl::unpartition(const torch::Tensor& t, std::int64_t b, std::int64_t h,
                                                  std::int64_t w) const {
  const auto c = t.size(2), p = size_;
  if (kind_ == Partition::block)
    return t.view({b, h / p, w / p, p, p, c}).permute({0, 1, 3, 2, 4, 5}).reshape({b, h, w, c});
  return t.view({b, h / p, w / p, p, p, c}).permute({0, 3, 1, 4, 2, 5}).reshape({b, h, w, c});
}

torch::Tensor PartitionAttentionImpl::attention_sublayer(const torch::Tensor& x) {
  if (x.size(2) % size_ != 0 || x.size(3) % size_ != 0)
    throw ConfigError("feature map " + shape_str(x) + " is not divisible by partition size " + std::to_string(size_));
  const auto b = x.size(0), h = x.size(2), w = x.size(3);
  auto nhwc = x.permute({0, 2, 3, 1});
  auto y = unpartition(attn(partition(attn_norm(nhwc).contiguous())), b, h, w);
  return (nhwc + drop_path(y, drop_path_rate, is_training())).permute({0, 3, 1, 2});
}

torch::Tensor PartitionAttentionImpl::forward(const torch::Tensor& x) {
  auto nhwc = attention_sublayer(x).permute({0, 2, 3, 1});
  auto y = ops::linear(fc2, torch::gelu(ops::linear(fc1, mlp_norm(nhwc))));
  return (nhwc + drop_path(y, drop_path_rate, is_training())).permute({0, 3, 1, 2}).contiguous();
}

FullAttentionImpl::FullAttentionImpl(std::int64_t dim, std::int64_t heads) : heads_(heads) {
  qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
  proj = register_module("proj", nn::Linear(dim, dim));
}

torch::Tensor FullAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3), n = h * w;
  auto tokens = x.flatten(2).transpose(1, 2);
  auto qkv_t = ops::linear(qkv, tokens).view({b, n, 3, heads_, c / heads_}).permute({2, 0, 3, 1, 4});
  auto out = ops::attention(qkv_t[0], qkv_t[1], qkv_t[2]).transpose(1, 2).reshape({b, n, c});
  return ops::linear(proj, out).transpose(1, 2).reshape({b, c, h, w});
}

MaxViTBlockImpl::MaxViTBlockImpl(std::int64_t in_channels, std::int64_t out_channels, bool downsample,
                                 std::int64_t heads, std::int64_t window, std::int64_t grid, double mlp_ratio) {
  mbconv = register_module("mbconv", MBConv(in_channels, out_channels, downsample));
  block_attn =
      register_module("block_attn", PartitionAttention(Partition::block, out_channels, heads, window, mlp_ratio));
  grid_attn = register_module("grid_attn", PartitionAttention(Partition::grid, out_channels, heads, grid, mlp_ratio));
}

torch::Tensor MaxViTBlockImpl::forward(const torch::Tensor& x) { return grid_attn(block_attn(mbconv(x))); }

void MaxViTBlockImpl::set_drop_path(double rate) {
  mbconv->drop_path_rate = rate;
  block_attn->drop_path_rate = rate;
  grid_attn->drop_path_rate = rate;
}

MaxViTStageImpl::MaxViTStageImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t depth,
                                 bool downsample, std::int64_t heads, std::int64_t window, std::int64_t grid,
                                 double mlp_ratio) {
  blocks = register_module("blocks", nn::ModuleList());
  for (std::int64_t i = 0; i < depth; ++i)
    blocks->push_back(MaxViTBlock(i == 0 ? in_channels : out_channels, out_channels, downsample && i == 0, heads,
                                  window, grid, mlp_ratio));
}

torch::Tensor MaxViTStageImpl::forward(torch::Tensor x) {
  for (const auto& b : *blocks) x = b->as<MaxViTBlock>()->forward(x);
  return x;
}

BackboneImpl::BackboneImpl(BackboneConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto c0 = cfg_.base_channels;
  stem_conv1 = register_module("stem_conv1", conv2d(3, c0, 3, 2));
  stem_norm = register_module("stem_norm", nn::BatchNorm2d(c0));
  stem_conv2 = register_module("stem_conv2", conv2d(c0, c0, 3));
  stages = register_module("stages", nn::ModuleList());

  std::int64_t total_blocks = 0;
  for (auto d : cfg_.depths) total_blocks += d;
  std::int64_t block_index = 0;
  std::int64_t in = c0;
  for (int i = 0; i < 4; ++i) {
    const auto out = cfg_.stage_channels(i);
    MaxViTStage stage(in, out, cfg_.depths[i], /*downsample=*/true, cfg_.heads(i), cfg_.window(), cfg_.grid(),
                      cfg_.mlp_ratio);
    for (const auto& b : *stage->blocks) {
      const double rate = total_blocks > 1 ? cfg_.stochastic_depth * block_index / (total_blocks - 1) : 0.0;
      b->as<MaxViTBlock>()->set_drop_path(rate);
      ++block_index;
    }
    stages->push_back(stage);
    in = out;
  }
}

FeaturePyramid BackboneImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 3 || image.size(2) != cfg_.input_size || image.size(3) != cfg_.input_size)
    throw ShapeError("backbone expects (B,3," + std::to_string(cfg_.input_size) + "," +
                     std::to_string(cfg_.input_size) + "), got " + shape_str(image));
  auto x = ops::conv(stem_conv2, torch::gelu(stem_norm(ops::conv(stem_conv1, image))));
  std::array<torch::Tensor, 4> outs;
  for (int i = 0; i < 4; ++i) {
    x = stages[i]->as<MaxViTStage>()->forward(x);
    outs[i] = x;
  }
  return {{outs[0], 4}, {outs[1], 8}, {outs[2], 16}, {outs[3], 32}};
}

}  // namespace qmx
