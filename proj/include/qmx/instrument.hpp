#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace qmx {

/// Operation tally gathered by an instrumented forward pass.
///
/// Every convolution, linear layer and attention product in the model goes
/// through the helpers below, which add their analytic multiply-accumulate
/// count to the active `CountScope` (if any). Attention additionally records
/// the number of entries in its score matrices, which is what the block/grid
/// cost checks compare against closed-form counts.
struct OpCounts {
  std::int64_t conv_macs = 0;
  std::int64_t linear_macs = 0;
  std::int64_t attention_macs = 0;
  std::int64_t attention_scores = 0;

  std::int64_t total_macs() const { return conv_macs + linear_macs + attention_macs; }
};

/// RAII scope that activates counting on the current thread. Scopes nest; the
/// innermost one receives the counts.
class CountScope {
 public:
  CountScope();
  ~CountScope();
  CountScope(const CountScope&) = delete;
  CountScope& operator=(const CountScope&) = delete;

  const OpCounts& counts() const { return counts_; }

 private:
  OpCounts counts_;
  OpCounts* previous_;
};

namespace ops {

torch::Tensor conv(torch::nn::Conv2d& layer, const torch::Tensor& x);
torch::Tensor linear(torch::nn::Linear& layer, const torch::Tensor& x);

// Scaled dot-product attention over (batch, heads, tokens, head_dim) inputs.
// `bias`, if defined, is added to the scores before the softmax.
torch::Tensor attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                        const torch::Tensor& bias = {});

}  // namespace ops
}  // namespace qmx
