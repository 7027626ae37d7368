#include <gtest/gtest.h>

#include <cmath>

#include "qmx/errors.hpp"
#include "qmx/losses.hpp"
#include "qmx/training.hpp"
#include "support/oracles.hpp"
#include "support/tensor_io.hpp"

using namespace qmx;
using testing_support::rel_error;
using testing_support::to_labels;
using testing_support::to_maps;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

torch::Tensor random_scribble(std::int64_t classes, std::int64_t h, std::int64_t w, double unknown_rate) {
  auto labels = torch::randint(classes, {h, w}, torch::kInt64);
  auto drop = torch::rand({h, w}, kF64) < unknown_rate;
  return torch::where(drop, torch::full_like(labels, classes), labels);
}

}  // namespace

TEST(PartialCE, AllUnknownIsZero) {
  auto logits = torch::randn({4, 8, 8}, kF64);
  ScribbleMap s{torch::full({8, 8}, 4, torch::kInt64), 4};
  EXPECT_EQ(partial_ce(logits, s).item<double>(), 0.0);
}

TEST(PartialCE, UniformLogitsSinglePixelIsLogK) {
  auto logits = torch::zeros({4, 3, 3}, kF64);
  auto labels = torch::full({3, 3}, 4, torch::kInt64);
  labels[1][2] = 2;
  EXPECT_NEAR(partial_ce(logits, {labels, 4}).item<double>(), std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);
}

TEST(PartialCE, TwoByTwoMatchesOracle) {
  auto logits = torch::tensor({0.3, -1.2, 2.0, 0.5, -0.7, 0.9, 1.1, -0.4}, kF64).view({2, 2, 2});
  auto labels = torch::tensor({0, 1, 2, 1}, torch::kInt64).view({2, 2});  // 2 = unknown
  const double expected = oracle::partial_ce(to_maps(logits), to_labels(labels), 2);
  EXPECT_LT(rel_error(partial_ce(logits, {labels, 2}).item<double>(), expected), 1e-12);
}

TEST(PartialCE, RejectsOutOfRangeAnnotatedLabel) {
  auto logits = torch::zeros({4, 2, 2}, kF64);
  auto labels = torch::tensor({0, 7, 4, 4}, torch::kInt64).view({2, 2});
  EXPECT_THROW(partial_ce(logits, {labels, 4}), ConfigError);
}

TEST(PartialCE, EqualsCrossEntropyWhenFullyAnnotated) {
  torch::manual_seed(3);
  auto logits = torch::randn({2, 4, 8, 8}, kF64);
  auto labels = torch::randint(4, {2, 8, 8}, torch::kInt64);
  const double ours = partial_ce(logits, {labels, 4}).item<double>();
  const double ref = torch::nn::functional::cross_entropy(logits, labels).item<double>();
  EXPECT_LT(rel_error(ours, ref), 1e-9);
}

TEST(PartialCE, InvariantToLogitsAtUnknownPixels) {
  torch::manual_seed(4);
  auto logits = torch::randn({4, 8, 8}, kF64);
  auto labels = random_scribble(4, 8, 8, 0.6);
  auto unknown = (labels == 4).unsqueeze(0).expand_as(logits);
  auto perturbed = torch::where(unknown, logits + 1e6 * torch::randn_like(logits), logits);
  EXPECT_EQ(partial_ce(logits, {labels, 4}).item<double>(), partial_ce(perturbed, {labels, 4}).item<double>());
}

TEST(PartialCE, NoGradientAtUnknownPixels) {
  auto logits = torch::randn({4, 6, 6}, kF64).requires_grad_();
  auto labels = random_scribble(4, 6, 6, 0.5);
  partial_ce(logits, {labels, 4}).backward();
  auto unknown = (labels == 4).unsqueeze(0).expand_as(logits);
  EXPECT_EQ(logits.grad().masked_select(unknown).abs().max().item<double>(), 0.0);
}

TEST(MixPseudoLabel, EqualInputsGiveTheirArgmax) {
  auto y = torch::softmax(torch::randn({4, 8, 8}, kF64), 0);
  for (double a : {0.1, 0.5, 0.93}) EXPECT_TRUE(torch::equal(mix_pseudo_label(y, y, a), y.argmax(0)));
}

TEST(MixPseudoLabel, HandComputedPixel) {
  auto y1 = torch::tensor({0.6, 0.4}, kF64).view({2, 1, 1});
  auto y2 = torch::tensor({0.3, 0.7}, kF64).view({2, 1, 1});
  EXPECT_EQ(mix_pseudo_label(y1, y2, 0.5).item<std::int64_t>(), 1);  // (0.45, 0.55)
}

TEST(MixPseudoLabel, RejectsAlphaOutsideOpenInterval) {
  auto y = torch::softmax(torch::randn({3, 2, 2}, kF64), 0);
  EXPECT_THROW(mix_pseudo_label(y, y, 0.0), ConfigError);
  EXPECT_THROW(mix_pseudo_label(y, y, 1.0), ConfigError);
  EXPECT_THROW(mix_pseudo_label(y, y, -0.2), ConfigError);
}

TEST(MixPseudoLabel, CarriesNoGradient) {
  auto y1 = torch::softmax(torch::randn({3, 4, 4}, kF64), 0).requires_grad_();
  auto y2 = torch::softmax(torch::randn({3, 4, 4}, kF64), 0).requires_grad_();
  EXPECT_FALSE(mix_pseudo_label(y1, y2, 0.3).requires_grad());
}

TEST(MixPseudoLabel, SharedArgmaxPreserved) {
  torch::manual_seed(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto y1 = torch::softmax(torch::randn({4, 8, 8}, kF64), 0);
    auto y2 = torch::softmax(torch::randn({4, 8, 8}, kF64), 0);
    const double a = 0.01 + 0.98 * torch::rand({1}, kF64).item<double>();
    auto shared = y1.argmax(0) == y2.argmax(0);
    auto y = mix_pseudo_label(y1, y2, a);
    EXPECT_TRUE(torch::equal(y.masked_select(shared), y1.argmax(0).masked_select(shared)));
  }
}

TEST(DiceLoss, PerfectOverlapNearZero) {
  auto labels = torch::randint(4, {8, 8}, torch::kInt64);
  auto target = one_hot_labels(labels, 4, torch::kFloat64);
  EXPECT_LE(dice_loss(target, target).item<double>(), 1e-4);
}

TEST(DiceLoss, DisjointClassPlaneNearOne) {
  auto p = torch::zeros({1, 4, 4}, kF64);
  auto g = torch::zeros({1, 4, 4}, kF64);
  p[0][0][0] = 1.0;
  g[0][3][3] = 1.0;
  EXPECT_NEAR(dice_loss(p, g).item<double>(), 1.0, 1e-5);
}

TEST(DiceLoss, RandomInstanceMatchesOracle) {
  torch::manual_seed(6);
  auto p = torch::softmax(torch::randn({2, 4, 4}, kF64), 0);
  auto g = one_hot_labels(torch::randint(2, {4, 4}, torch::kInt64), 2, torch::kFloat64);
  EXPECT_LT(rel_error(dice_loss(p, g).item<double>(), oracle::dice(to_maps(p), to_maps(g))), 1e-12);
  EXPECT_LT(rel_error(dice_loss(p, g, false).item<double>(), oracle::dice(to_maps(p), to_maps(g), false)), 1e-12);
}

TEST(DiceLoss, ShapeMismatchThrows) {
  EXPECT_THROW(dice_loss(torch::zeros({2, 4, 4}), torch::zeros({3, 4, 4})), ShapeError);
}

TEST(PslLoss, IdenticalHardPredictionsNearZero) {
  auto hard = one_hot_labels(torch::randint(4, {8, 8}, torch::kInt64), 4, torch::kFloat64);
  EXPECT_LE(psl_loss(hard, hard, 0.37).item<double>(), 1e-4);
}

TEST(PslLoss, SwapSymmetry) {
  torch::manual_seed(7);
  auto y1 = torch::softmax(torch::randn({4, 8, 8}, kF64), 0);
  auto y2 = torch::softmax(torch::randn({4, 8, 8}, kF64), 0);
  EXPECT_NEAR(psl_loss(y1, y2, 0.3).item<double>(), psl_loss(y2, y1, 0.7).item<double>(), 1e-12);
}

TEST(PslLoss, MatchesCompositionOfOracles) {
  torch::manual_seed(8);
  auto y1 = torch::softmax(torch::randn({4, 8, 8}, kF64), 0);
  auto y2 = torch::softmax(torch::randn({4, 8, 8}, kF64), 0);
  const double ref = oracle::psl(to_maps(y1), to_maps(y2), 0.62);
  EXPECT_LT(rel_error(psl_loss(y1, y2, 0.62).item<double>(), ref), 1e-12);
}

TEST(EslLoss, Basics) {
  auto a = torch::rand({1, 8, 8}, kF64);
  EXPECT_EQ(esl_loss(a, a).item<double>(), 0.0);
  EXPECT_DOUBLE_EQ(esl_loss(torch::ones({1, 4, 4}, kF64), torch::zeros({1, 4, 4}, kF64)).item<double>(), 1.0);
}

TEST(EslLoss, HandComputedTwoByTwo) {
  auto pred = torch::tensor({0.0, 0.5, 1.0, 0.25}, kF64).view({1, 2, 2});
  auto gt = torch::tensor({0.0, 1.0, 1.0, 0.0}, kF64).view({1, 2, 2});
  EXPECT_DOUBLE_EQ(esl_loss(pred, gt).item<double>(), 0.078125);
  EXPECT_THROW(esl_loss(pred, torch::zeros({1, 3, 3}, kF64)), ShapeError);
}

TEST(SslLoss, IdenticalHeadsEqualSingleTerm) {
  auto logits = torch::randn({4, 8, 8}, kF64);
  ScribbleMap s{random_scribble(4, 8, 8, 0.5), 4};
  EXPECT_DOUBLE_EQ(ssl_loss(s, logits, logits).item<double>(), partial_ce(logits, s).item<double>());
}

TEST(SslLoss, AllUnknownIsZero) {
  ScribbleMap s{torch::full({8, 8}, 4, torch::kInt64), 4};
  EXPECT_EQ(ssl_loss(s, torch::randn({4, 8, 8}, kF64), torch::randn({4, 8, 8}, kF64)).item<double>(), 0.0);
}

TEST(SslLoss, MatchesAverageOfOracles) {
  torch::manual_seed(9);
  auto l1 = torch::randn({4, 8, 8}, kF64), l2 = torch::randn({4, 8, 8}, kF64);
  auto labels = random_scribble(4, 8, 8, 0.7);
  const double ref = 0.5 * (oracle::partial_ce(to_maps(l1), to_labels(labels), 4) +
                            oracle::partial_ce(to_maps(l2), to_labels(labels), 4));
  EXPECT_LT(rel_error(ssl_loss({labels, 4}, l1, l2).item<double>(), ref), 1e-12);
}

TEST(TotalLoss, DefaultWeights) {
  LossWeights w;
  EXPECT_DOUBLE_EQ(w.ssl, 1.0);
  EXPECT_DOUBLE_EQ(w.psl, 0.5);
  EXPECT_DOUBLE_EQ(w.esl, 0.2);
  EXPECT_NEAR(total_loss(1.0, 0.4, 0.5, w), 1.3, 1e-15);
  EXPECT_EQ(total_loss(0.0, 0.0, 0.0, w), 0.0);
}

TEST(TotalLoss, WeightSetOne) {
  const auto sets = weight_grid();
  ASSERT_EQ(sets.size(), 4u);
  EXPECT_EQ(sets[0].name, "#1");
  EXPECT_DOUBLE_EQ(total_loss(2.0, 2.0, 2.0, sets[0].weights), 3.0);
}

TEST(TotalLoss, TensorFormSkipsAbsentTerms) {
  LossComponents parts;
  parts.ssl = torch::tensor(1.0, kF64);
  parts.esl = torch::tensor(0.5, kF64);
  EXPECT_DOUBLE_EQ(total_loss(parts, LossWeights{}).item<double>(), 1.1);
  EXPECT_THROW(total_loss(LossComponents{}, LossWeights{}), ConfigError);
}
