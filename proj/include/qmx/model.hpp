#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "qmx/backbone.hpp"
#include "qmx/decoder.hpp"
#include "qmx/edge.hpp"
#include "qmx/query_decoder.hpp"

namespace qmx {

/// Ablation switches. `dual_decoder` adds the PPM-FPN/query head producing y2,
/// `query` adds the two-way Transformer refinement of the bottleneck, `edge`
/// adds the edge module (edge map, decoder injections, query enhancer).
struct ComponentToggles {
  bool dual_decoder = true;
  bool query = true;
  bool edge = true;

  std::string label() const;
  bool operator==(const ComponentToggles&) const = default;
};

struct ModelConfig {
  BackboneConfig backbone;
  DecoderConfig decoder;
  std::int64_t in_channels = 1;
  std::int64_t edge_channels = 64;
  std::int64_t fpn_channels = 256;
  std::int64_t transformer_layers = 2;
  std::int64_t transformer_heads = 8;
  ComponentToggles toggles;

  std::int64_t num_classes() const { return decoder.num_classes; }
  std::int64_t input_size() const { return backbone.input_size; }
  void validate() const;

  // Base width 96, depths [2,2,5,2], window = grid = input/32.
  static ModelConfig standard(std::int64_t num_classes = 4, std::int64_t input_size = 256);
  // Narrow variant for single-core training runs: width 32, depths [1,1,1,1],
  // 32-channel edge features, 128-channel FPN.
  static ModelConfig desk(std::int64_t num_classes = 4, std::int64_t input_size = 64);
  static ModelConfig preset(const std::string& name, std::int64_t num_classes, std::int64_t input_size);
};

void to_json(nlohmann::json& j, const ComponentToggles& t);
void from_json(const nlohmann::json& j, ComponentToggles& t);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ModelOutputs {
  torch::Tensor y1;         // (B, K, H, W) logits of the main decoder
  torch::Tensor y2;         // (B, K, H, W) logits of the query head; undefined without dual decoder
  torch::Tensor edge_pred;  // (B, 1, H/4, W/4); undefined without edge module
};

/// U-shaped MaxViT network with edge enhancement, query-guided bottleneck
/// refinement and an auxiliary query/PPM-FPN mask head.
///
/// All submodules are always constructed so that every toggle combination
/// shares one parameter layout; disabled paths are skipped in forward and
/// therefore receive no gradient.
class QMaxViTUnetImpl : public torch::nn::Module {
 public:
  explicit QMaxViTUnetImpl(ModelConfig cfg);

  // image: (B, in_channels, S, S) with S = input_size.
  ModelOutputs forward(const torch::Tensor& image);

  // Query rows fed to the transformer / mask head for the given features.
  QuerySet initial_queries(std::int64_t batch, const EdgeOutputs* edge);

  const ModelConfig& config() const { return cfg_; }
  void set_toggles(const ComponentToggles& t);

  GrayProjection gray{nullptr};
  Backbone backbone{nullptr};
  EdgeEnhance edge{nullptr};
  QueryEnhancer query_enhancer{nullptr};
  torch::Tensor zero_queries;  // (K, d_e4) queries used when the edge module is off
  TwoWayTransformer transformer{nullptr};
  Decoder decoder{nullptr};
  PPMFPN ppm_fpn{nullptr};
  AuxMaskHead aux_head{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(QMaxViTUnet);

// Parameter names owned by each optional component (prefix match).
bool is_edge_parameter(const std::string& name);
bool is_query_parameter(const std::string& name);
bool is_dual_parameter(const std::string& name);

std::int64_t count_parameters(const torch::nn::Module& module);

}  // namespace qmx
