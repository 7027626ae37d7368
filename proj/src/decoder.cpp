#include "qmx/decoder.hpp"

#include <string>

#include "qmx/errors.hpp"
#include "qmx/instrument.hpp"

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace qmx {
namespace {

torch::Tensor upsample(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

}  // namespace

void DecoderConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  for (auto d : d_block_depths)
    if (d < 1) throw ConfigError("decoder block depths must be >= 1");
}

void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"num_classes", c.num_classes}, {"d_block_depths", c.d_block_depths}, {"fuse_edge", c.fuse_edge}};
}

void from_json(const nlohmann::json& j, DecoderConfig& c) {
  j.at("num_classes").get_to(c.num_classes);
  j.at("d_block_depths").get_to(c.d_block_depths);
  j.at("fuse_edge").get_to(c.fuse_edge);
}

EdgeFusionImpl::EdgeFusionImpl(std::int64_t edge_channels, std::int64_t out_channels, bool resample_)
    : resample(resample_) {
  proj = register_module("proj", nn::Conv2d(nn::Conv2dOptions(edge_channels, out_channels, 1).bias(false)));
}

torch::Tensor EdgeFusionImpl::projected(const torch::Tensor& edge_feat, std::int64_t height, std::int64_t width) {
  auto e = edge_feat;
  if (e.size(2) != height || e.size(3) != width) {
    if (!resample)
      throw ShapeError("edge feature " + std::to_string(e.size(2)) + "x" + std::to_string(e.size(3)) +
                       " does not match decoder feature " + std::to_string(height) + "x" + std::to_string(width));
    e = e.size(2) > height ? torch::adaptive_avg_pool2d(e, {height, width}) : upsample(e, height, width);
  }
  return ops::conv(proj, e);
}

torch::Tensor EdgeFusionImpl::forward(const torch::Tensor& decoder_feat, const torch::Tensor& edge_feat) {
  return decoder_feat + projected(edge_feat, decoder_feat.size(2), decoder_feat.size(3));
}

DecoderBlockImpl::DecoderBlockImpl(std::int64_t in_channels, std::int64_t skip_channels, std::int64_t out_channels,
                                   std::int64_t depth, std::int64_t heads, std::int64_t window, std::int64_t grid,
                                   double mlp_ratio) {
  up_proj = register_module("up_proj", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  reduce = register_module("reduce", nn::Conv2d(nn::Conv2dOptions(out_channels + skip_channels, out_channels, 1)));
  stage = register_module("stage", MaxViTStage(out_channels, out_channels, depth, false, heads, window, grid, mlp_ratio));
}

torch::Tensor DecoderBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  if (skip.size(2) != 2 * x.size(2) || skip.size(3) != 2 * x.size(3))
    throw ShapeError("skip connection must have twice the decoder input resolution");
  auto up = ops::conv(up_proj, upsample(x, skip.size(2), skip.size(3)));
  return stage(ops::conv(reduce, torch::cat({up, skip}, 1)));
}

DecoderImpl::DecoderImpl(DecoderConfig cfg, const BackboneConfig& bb, std::int64_t edge_channels) : cfg_(cfg) {
  cfg_.validate();
  blocks = register_module("blocks", nn::ModuleList());
  // D-block k mirrors encoder stage 3-k: input width from the stage above,
  // output width equal to the skip it consumes.
  for (int k = 0; k < 3; ++k) {
    const int level = 2 - k;
    blocks->push_back(DecoderBlock(bb.stage_channels(level + 1), bb.stage_channels(level), bb.stage_channels(level),
                                   cfg_.d_block_depths[k], bb.heads(level), bb.window(), bb.grid(), bb.mlp_ratio));
  }
  fuse_s8 = register_module("fuse_s8", EdgeFusion(edge_channels, bb.stage_channels(1)));
  fuse_s4 = register_module("fuse_s4", EdgeFusion(edge_channels, bb.stage_channels(0)));
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(bb.stage_channels(0), cfg_.num_classes, 1)));
}

torch::Tensor DecoderImpl::forward(const FeatureMap& bottleneck, const FeaturePyramid& skips,
                                   std::span<const FeatureMap> edge_feats) {
  if (bottleneck.data.sizes() != skips.e4.data.sizes())
    throw ShapeError("refined bottleneck must have the shape of E4");
  const bool fuse = cfg_.fuse_edge && !edge_feats.empty();
  if (fuse && edge_feats.size() != 2) throw ShapeError("expected two edge injections (stride 8 and 4)");

  auto x = blocks[0]->as<DecoderBlock>()->forward(bottleneck.data, skips.e3.data);
  x = blocks[1]->as<DecoderBlock>()->forward(x, skips.e2.data);
  if (fuse) x = fuse_s8(x, edge_feats[0].data);
  x = blocks[2]->as<DecoderBlock>()->forward(x, skips.e1.data);
  if (fuse) x = fuse_s4(x, edge_feats[1].data);
  auto logits = ops::conv(head, x);
  return upsample(logits, x.size(2) * skips.e1.stride, x.size(3) * skips.e1.stride);
}

}  // namespace qmx
