#include "qmx/model.hpp"

#include "qmx/errors.hpp"

namespace qmx {

std::string ComponentToggles::label() const {
  return std::string("dual=") + (dual_decoder ? "1" : "0") + ",query=" + (query ? "1" : "0") +
         ",edge=" + (edge ? "1" : "0");
}

void to_json(nlohmann::json& j, const ComponentToggles& t) {
  j = {{"dual_decoder", t.dual_decoder}, {"query", t.query}, {"edge", t.edge}};
}

void from_json(const nlohmann::json& j, ComponentToggles& t) {
  j.at("dual_decoder").get_to(t.dual_decoder);
  j.at("query").get_to(t.query);
  j.at("edge").get_to(t.edge);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"backbone", c.backbone},
       {"decoder", c.decoder},
       {"in_channels", c.in_channels},
       {"edge_channels", c.edge_channels},
       {"fpn_channels", c.fpn_channels},
       {"transformer_layers", c.transformer_layers},
       {"transformer_heads", c.transformer_heads},
       {"toggles", c.toggles}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("backbone").get_to(c.backbone);
  j.at("decoder").get_to(c.decoder);
  j.at("in_channels").get_to(c.in_channels);
  j.at("edge_channels").get_to(c.edge_channels);
  j.at("fpn_channels").get_to(c.fpn_channels);
  j.at("transformer_layers").get_to(c.transformer_layers);
  j.at("transformer_heads").get_to(c.transformer_heads);
  j.at("toggles").get_to(c.toggles);
}

void ModelConfig::validate() const {
  backbone.validate();
  decoder.validate();
  if (in_channels != 1 && in_channels != 3) throw ConfigError("in_channels must be 1 or 3");
  if (edge_channels < 1 || fpn_channels < 1) throw ConfigError("edge/fpn widths must be >= 1");
  if (transformer_layers < 0) throw ConfigError("transformer_layers must be >= 0");
  if (backbone.stage_channels(3) % 2 != 0) throw ConfigError("d_e4 must be even");
}

ModelConfig ModelConfig::standard(std::int64_t num_classes, std::int64_t input_size) {
  ModelConfig c;
  c.backbone.input_size = input_size;
  c.decoder.num_classes = num_classes;
  return c;
}

ModelConfig ModelConfig::desk(std::int64_t num_classes, std::int64_t input_size) {
  ModelConfig c;
  c.backbone.base_channels = 32;
  c.backbone.depths = {1, 1, 1, 1};
  c.backbone.input_size = input_size;
  c.decoder.num_classes = num_classes;
  c.edge_channels = 32;
  c.fpn_channels = 128;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name, std::int64_t num_classes, std::int64_t input_size) {
  if (name == "standard") return standard(num_classes, input_size);
  if (name == "desk") return desk(num_classes, input_size);
  throw ConfigError("unknown model preset '" + name + "' (expected standard or desk)");
}

QMaxViTUnetImpl::QMaxViTUnetImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& bb = cfg_.backbone;
  const auto k = cfg_.num_classes();
  const auto d_e4 = bb.stage_channels(3);
  cfg_.decoder.fuse_edge = cfg_.toggles.edge;

  if (cfg_.in_channels == 1) gray = register_module("gray", GrayProjection());
  backbone = register_module("backbone", Backbone(bb));
  edge = register_module("edge", EdgeEnhance(bb, cfg_.edge_channels));
  query_enhancer = register_module("query_enhancer", QueryEnhancer(cfg_.edge_channels, k, d_e4));
  zero_queries = register_parameter("zero_queries", torch::zeros({k, d_e4}));
  transformer = register_module("transformer", TwoWayTransformer(d_e4, cfg_.transformer_layers, cfg_.transformer_heads));
  decoder = register_module("decoder", Decoder(cfg_.decoder, bb, cfg_.edge_channels));
  ppm_fpn = register_module("ppm_fpn", PPMFPN(bb.stage_channels(1), bb.stage_channels(2), d_e4, cfg_.fpn_channels));
  aux_head = register_module("aux_head", AuxMaskHead(d_e4, cfg_.fpn_channels));
}

void QMaxViTUnetImpl::set_toggles(const ComponentToggles& t) {
  cfg_.toggles = t;
  cfg_.decoder.fuse_edge = t.edge;
}

QuerySet QMaxViTUnetImpl::initial_queries(std::int64_t batch, const EdgeOutputs* edge_out) {
  if (cfg_.toggles.edge && edge_out) return query_enhancer(edge_out->edge_attention);
  return {zero_queries.unsqueeze(0).expand({batch, -1, -1})};
}

ModelOutputs QMaxViTUnetImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != cfg_.in_channels)
    throw ShapeError("model expects (B," + std::to_string(cfg_.in_channels) + ",S,S) input");
  const auto& t = cfg_.toggles;
  const auto batch = image.size(0);
  auto x = cfg_.in_channels == 1 ? gray(image) : image;
  auto pyr = backbone(x);

  ModelOutputs out;
  EdgeOutputs edge_out;
  if (t.edge) {
    edge_out = edge(pyr.e1, pyr.e2);
    out.edge_pred = edge_out.edge_pred;
  }

  FeatureMap bottleneck = pyr.e4;
  QuerySet queries;
  if (t.query || t.dual_decoder) queries = initial_queries(batch, t.edge ? &edge_out : nullptr);
  if (t.query) {
    auto refined = transformer(pyr.e4, queries);
    bottleneck = refined.features;
    queries = refined.updated_queries;
  }

  out.y1 = decoder(bottleneck, pyr, t.edge ? std::span<const FeatureMap>(edge_out.d_block_injections)
                                           : std::span<const FeatureMap>());
  if (t.dual_decoder) {
    auto fused = ppm_fpn(pyr.e2, pyr.e3, pyr.e4);
    out.y2 = aux_head(queries, fused, image.size(2));
  }
  return out;
}

bool is_edge_parameter(const std::string& name) {
  return name.starts_with("edge.") || name.starts_with("query_enhancer.") || name.starts_with("decoder.fuse_s");
}

bool is_query_parameter(const std::string& name) { return name.starts_with("transformer."); }

bool is_dual_parameter(const std::string& name) {
  return name.starts_with("ppm_fpn.") || name.starts_with("aux_head.");
}

std::int64_t count_parameters(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace qmx
