#include "qmx/edge.hpp"

#include <string>

#include "qmx/errors.hpp"
#include "qmx/instrument.hpp"

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace qmx {

ConvPairImpl::ConvPairImpl(std::int64_t in_channels, std::int64_t out_channels) {
  conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1).bias(false)));
  norm1 = register_module("norm1", nn::BatchNorm2d(out_channels));
  conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1).bias(false)));
  norm3 = register_module("norm3", nn::BatchNorm2d(out_channels));
}

torch::Tensor ConvPairImpl::forward(const torch::Tensor& x) {
  auto h = torch::relu(norm1(ops::conv(conv1, x)));
  return torch::relu(norm3(ops::conv(conv3, h)));
}

EdgeEnhanceImpl::EdgeEnhanceImpl(const BackboneConfig& bb, std::int64_t edge_channels)
    : edge_channels_(edge_channels) {
  const auto heads = std::max<std::int64_t>(1, edge_channels / bb.head_dim);
  e1_branch = register_module("e1_branch", ConvPair(bb.stage_channels(0), edge_channels));
  e2_branch = register_module("e2_branch", ConvPair(bb.stage_channels(1), edge_channels));
  edge_head = register_module("edge_head", nn::Conv2d(nn::Conv2dOptions(2 * edge_channels, 1, 1)));
  attention_stage = register_module(
      "attention_stage", MaxViTStage(2 * edge_channels, edge_channels, 1, false, heads, bb.window(), bb.grid(), bb.mlp_ratio));
}

EdgeOutputs EdgeEnhanceImpl::forward(const FeatureMap& e1, const FeatureMap& e2) {
  if (e2.stride != 2 * e1.stride || e2.height() * 2 != e1.height() || e2.width() * 2 != e1.width())
    throw ShapeError("edge module expects E2 at half the resolution of E1 (strides " + std::to_string(e1.stride) +
                     ", " + std::to_string(e2.stride) + ")");
  auto up = F::interpolate(e2.data, F::InterpolateFuncOptions()
                                        .size(std::vector<std::int64_t>{e1.height(), e1.width()})
                                        .mode(torch::kBilinear)
                                        .align_corners(false));
  auto cat = torch::cat({e1_branch(e1.data), e2_branch(up)}, 1);

  EdgeOutputs out;
  out.edge_pred = ops::conv(edge_head, cat);
  out.edge_attention = {attention_stage(cat), e1.stride};
  out.d_block_injections = {{torch::avg_pool2d(out.edge_attention.data, 2), 2 * e1.stride}, out.edge_attention};
  return out;
}

QueryEnhancerImpl::QueryEnhancerImpl(std::int64_t edge_channels, std::int64_t num_classes, std::int64_t d_e4)
    : num_classes_(num_classes) {
  if (d_e4 % 2 != 0) throw ConfigError("query width d_e4 must be even, got " + std::to_string(d_e4));
  learnable = register_parameter("learnable", torch::zeros({num_classes, d_e4 / 2}));
  proj = register_module("proj", nn::Linear(edge_channels, d_e4 / 2));
}

QuerySet QueryEnhancerImpl::forward(const FeatureMap& edge_attention) {
  const auto batch = edge_attention.data.size(0);
  // One pooled vector per class row: (B, C, K, 1) -> (B, K, C).
  auto pooled = torch::adaptive_avg_pool2d(edge_attention.data, {num_classes_, 1}).squeeze(-1).transpose(1, 2);
  auto conditioned = ops::linear(proj, pooled);
  auto left = learnable.unsqueeze(0).expand({batch, -1, -1});
  return {torch::cat({left, conditioned}, 2)};
}

}  // namespace qmx
