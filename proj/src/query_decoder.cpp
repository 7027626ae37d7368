#include "qmx/query_decoder.hpp"

#include <cmath>
#include <string>

#include "qmx/errors.hpp"
#include "qmx/instrument.hpp"

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace qmx {
namespace {

torch::Tensor resize(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

void check_pair(const FeatureMap& fine, const FeatureMap& coarse, const char* what) {
  if (coarse.stride != 2 * fine.stride || coarse.height() * 2 != fine.height() || coarse.width() * 2 != fine.width())
    throw ShapeError(std::string("PPM-FPN stride mismatch between ") + what);
}

}  // namespace

torch::Tensor sinusoidal_position_embedding(std::int64_t channels, std::int64_t height, std::int64_t width,
                                            torch::TensorOptions options) {
  if (channels % 4 != 0) throw ConfigError("positional embedding needs channels divisible by 4");
  const auto quarter = channels / 4;
  auto opts = options.dtype(torch::kFloat64);
  auto freq = torch::pow(10000.0, -torch::arange(quarter, opts) / static_cast<double>(quarter));
  auto ys = (torch::arange(height, opts) + 0.5) / static_cast<double>(height) * 2.0 * M_PI;
  auto xs = (torch::arange(width, opts) + 0.5) / static_cast<double>(width) * 2.0 * M_PI;
  auto ay = torch::outer(ys, freq);  // (H, Q)
  auto ax = torch::outer(xs, freq);  // (W, Q)
  auto pe_y = torch::cat({ay.sin(), ay.cos()}, 1).t().unsqueeze(2).expand({2 * quarter, height, width});
  auto pe_x = torch::cat({ax.sin(), ax.cos()}, 1).t().unsqueeze(1).expand({2 * quarter, height, width});
  return torch::cat({pe_y, pe_x}, 0).unsqueeze(0).to(options);
}

TokenAttentionImpl::TokenAttentionImpl(std::int64_t dim, std::int64_t heads, std::int64_t downsample) : heads_(heads) {
  const auto inner = dim / downsample;
  if (inner % heads != 0) throw ConfigError("attention width must be divisible by the head count");
  q_proj = register_module("q_proj", nn::Linear(dim, inner));
  k_proj = register_module("k_proj", nn::Linear(dim, inner));
  v_proj = register_module("v_proj", nn::Linear(dim, inner));
  out_proj = register_module("out_proj", nn::Linear(inner, dim));
}

torch::Tensor TokenAttentionImpl::forward(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
  auto split = [this](const torch::Tensor& t) {
    return t.view({t.size(0), t.size(1), heads_, t.size(2) / heads_}).transpose(1, 2);
  };
  auto qh = split(ops::linear(q_proj, q)), kh = split(ops::linear(k_proj, k)), vh = split(ops::linear(v_proj, v));
  auto out = ops::attention(qh, kh, vh).transpose(1, 2);
  return ops::linear(out_proj, out.reshape({out.size(0), out.size(1), -1}));
}

TwoWayLayerImpl::TwoWayLayerImpl(std::int64_t dim, std::int64_t heads, double mlp_ratio,
                                 std::int64_t cross_downsample) {
  const auto hidden = static_cast<std::int64_t>(std::lround(dim * mlp_ratio));
  self_attn = register_module("self_attn", TokenAttention(dim, heads));
  query_to_feature = register_module("query_to_feature", TokenAttention(dim, heads, cross_downsample));
  feature_to_query = register_module("feature_to_query", TokenAttention(dim, heads, cross_downsample));
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm3 = register_module("norm3", nn::LayerNorm(nn::LayerNormOptions({dim})));
  norm4 = register_module("norm4", nn::LayerNorm(nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", nn::Linear(dim, hidden));
  fc2 = register_module("fc2", nn::Linear(hidden, dim));
}

std::pair<torch::Tensor, torch::Tensor> TwoWayLayerImpl::forward(torch::Tensor queries, torch::Tensor keys,
                                                                 const torch::Tensor& key_pe) {
  queries = norm1(queries + self_attn(queries, queries, queries));
  auto keys_pe = keys + key_pe;
  queries = norm2(queries + query_to_feature(queries, keys_pe, keys));
  queries = norm3(queries + ops::linear(fc2, torch::relu(ops::linear(fc1, queries))));
  keys = norm4(keys + feature_to_query(keys_pe, queries, queries));
  return {queries, keys};
}

TwoWayTransformerImpl::TwoWayTransformerImpl(std::int64_t dim, std::int64_t num_layers, std::int64_t heads,
                                             double mlp_ratio, std::int64_t cross_downsample)
    : dim_(dim) {
  layers = register_module("layers", nn::ModuleList());
  for (std::int64_t i = 0; i < num_layers; ++i) layers->push_back(TwoWayLayer(dim, heads, mlp_ratio, cross_downsample));
}

RefinedBottleneck TwoWayTransformerImpl::forward(const FeatureMap& bottleneck, const QuerySet& queries) {
  if (queries.width() != bottleneck.channels() || bottleneck.channels() != dim_)
    throw ShapeError("query width " + std::to_string(queries.width()) + " must equal bottleneck channels " +
                     std::to_string(bottleneck.channels()));
  const auto b = bottleneck.data.size(0), c = bottleneck.channels(), h = bottleneck.height(), w = bottleneck.width();
  auto keys = bottleneck.data.flatten(2).transpose(1, 2);
  auto pe = sinusoidal_position_embedding(c, h, w, bottleneck.data.options()).flatten(2).transpose(1, 2);
  auto q = queries.queries;
  for (const auto& layer : *layers) std::tie(q, keys) = layer->as<TwoWayLayer>()->forward(q, keys, pe);
  return {{keys.transpose(1, 2).reshape({b, c, h, w}), bottleneck.stride}, {q}};
}

PPMFPNImpl::PPMFPNImpl(std::int64_t c2, std::int64_t c3, std::int64_t c4, std::int64_t fpn_channels,
                       std::array<std::int64_t, 4> bins)
    : bins_(bins) {
  const auto branch = std::max<std::int64_t>(1, c4 / 4);
  for (std::size_t i = 0; i < bins.size(); ++i)
    ppm_convs.push_back(
        register_module("ppm_conv" + std::to_string(i), nn::Conv2d(nn::Conv2dOptions(c4, branch, 1))));
  ppm_merge = register_module(
      "ppm_merge", nn::Conv2d(nn::Conv2dOptions(c4 + branch * static_cast<std::int64_t>(bins.size()), fpn_channels, 3).padding(1)));
  lateral3 = register_module("lateral3", nn::Conv2d(nn::Conv2dOptions(c3, fpn_channels, 1)));
  lateral2 = register_module("lateral2", nn::Conv2d(nn::Conv2dOptions(c2, fpn_channels, 1)));
  smooth = register_module("smooth", nn::Conv2d(nn::Conv2dOptions(fpn_channels, fpn_channels, 3).padding(1)));
}

std::vector<torch::Tensor> PPMFPNImpl::pool_bins(const torch::Tensor& e4) const {
  std::vector<torch::Tensor> pooled;
  for (auto bin : bins_) pooled.push_back(torch::adaptive_avg_pool2d(e4, {bin, bin}));
  return pooled;
}

FeatureMap PPMFPNImpl::forward(const FeatureMap& e2, const FeatureMap& e3, const FeatureMap& e4) {
  check_pair(e2, e3, "E2 and E3");
  check_pair(e3, e4, "E3 and E4");
  const auto h4 = e4.height(), w4 = e4.width();
  std::vector<torch::Tensor> parts{e4.data};
  auto pooled = pool_bins(e4.data);
  for (std::size_t i = 0; i < pooled.size(); ++i)
    parts.push_back(resize(torch::relu(ops::conv(ppm_convs[i], pooled[i])), h4, w4));
  auto p4 = torch::relu(ops::conv(ppm_merge, torch::cat(parts, 1)));
  auto p3 = ops::conv(lateral3, e3.data) + resize(p4, e3.height(), e3.width());
  auto p2 = ops::conv(lateral2, e2.data) + resize(p3, e2.height(), e2.width());
  return {torch::relu(ops::conv(smooth, p2)), e2.stride};
}

AuxMaskHeadImpl::AuxMaskHeadImpl(std::int64_t d_e4, std::int64_t fpn_channels) {
  proj = register_module("proj", nn::Linear(nn::LinearOptions(d_e4, fpn_channels).bias(false)));
}

torch::Tensor AuxMaskHeadImpl::forward(const QuerySet& queries, const FeatureMap& fused, std::int64_t out_size) {
  if (queries.width() != proj->options.in_features()) throw ShapeError("query width does not match mask head");
  if (fused.channels() != proj->options.out_features()) throw ShapeError("fused features do not match mask head");
  const auto b = fused.data.size(0), h = fused.height(), w = fused.width();
  auto q = ops::linear(proj, queries.queries);                            // (B, K, D_fpn)
  auto logits = torch::matmul(q, fused.data.flatten(2)).view({b, -1, h, w});  // (B, K, h, w)
  return resize(logits, out_size, out_size);
}

}  // namespace qmx
