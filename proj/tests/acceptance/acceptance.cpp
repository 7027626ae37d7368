// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "qmx/backbone.hpp"
#include "qmx/instrument.hpp"
#include "qmx/losses.hpp"
#include "qmx/metrics.hpp"
#include "qmx/model.hpp"
#include "qmx/report.hpp"
#include "qmx/training.hpp"
#include "support/oracles.hpp"
#include "support/tensor_io.hpp"
#include "support/tiny_model.hpp"

using namespace qmx;
using testing_support::rel_error;
using testing_support::to_labels;
using testing_support::to_maps;
using testing_support::to_values;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

// ---------------------------------------------------------------------------
// 1. Loss oracles

Outcome loss_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(101);
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr int kClasses = 4, kSide = 8, kUnknown = kClasses;
  double worst_pce = 0.0, worst_dice = 0.0, worst_esl = 0.0, worst_psl = 0.0;

  for (int trial = 0; trial < 200; ++trial) {
    auto logits = torch::randn({kClasses, kSide, kSide}, kF64) * 3.0;
    auto labels = torch::randint(0, kClasses + 1, {kSide, kSide}, torch::kInt64);
    labels[0][0] = trial % kClasses;
    const double pce = partial_ce(logits, {labels, kUnknown}).item<double>();
    worst_pce = std::max(worst_pce, rel_error(pce, oracle::partial_ce(to_maps(logits), to_labels(labels), kUnknown)));

    auto probs = torch::softmax(torch::randn({kClasses, kSide, kSide}, kF64), 0);
    auto dense = torch::randint(0, kClasses, {kSide, kSide}, torch::kInt64);
    auto onehot = one_hot_labels(dense, kClasses, torch::kFloat64);
    const double d = dice_loss(probs, onehot).item<double>();
    const auto dense_v = to_labels(dense);
    worst_dice = std::max(
        worst_dice, rel_error(d, oracle::dice(to_maps(probs), oracle::one_hot(dense_v, kClasses, kSide, kSide))));

    auto pred = torch::rand({1, kSide, kSide}, kF64), gt = torch::rand({1, kSide, kSide}, kF64);
    worst_esl = std::max(worst_esl, rel_error(esl_loss(pred, gt).item<double>(),
                                              oracle::mse(to_values(pred), to_values(gt))));

    auto y1 = torch::softmax(torch::randn({kClasses, kSide, kSide}, kF64) * 2.0, 0);
    auto y2 = torch::softmax(torch::randn({kClasses, kSide, kSide}, kF64) * 2.0, 0);
    const double alpha = 0.01 + 0.98 * unit(rng);
    worst_psl = std::max(worst_psl, rel_error(psl_loss(y1, y2, alpha).item<double>(),
                                              oracle::psl(to_maps(y1), to_maps(y2), alpha)));
  }
  const double worst = std::max({worst_pce, worst_dice, worst_esl, worst_psl});
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "200 instances, max rel err pce " << fmt("%.1e", worst_pce) << " dice " << fmt("%.1e", worst_dice) << " esl "
     << fmt("%.1e", worst_esl) << " psl " << fmt("%.1e", worst_psl) << " (<= 1e-9), " << fmt("%.2f", secs) << " s";
  return {worst <= 1e-9 && secs < 10.0, os.str()};
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

// Relative error ||a - n|| / max(||a||, ||n||) between analytic gradient
// entries and central differences of `f` at the given flat indices of `x`.
double fd_error(const std::function<double()>& f, torch::Tensor x, const torch::Tensor& grad,
                const std::vector<std::int64_t>& indices, double h) {
  torch::NoGradGuard ng;
  auto flat = x.view(-1);
  auto g = grad.contiguous().view(-1);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (auto i : indices) {
    auto* p = flat.data_ptr<double>() + i;
    const double v = *p;
    *p = v + h;
    const double up = f();
    *p = v - h;
    const double down = f();
    *p = v;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = g[i].item<double>();
    diff2 += (analytic - numeric) * (analytic - numeric);
    a2 += analytic * analytic;
    n2 += numeric * numeric;
  }
  const double scale = std::sqrt(std::max(a2, n2));
  return scale == 0.0 ? 0.0 : std::sqrt(diff2) / scale;
}

std::vector<std::int64_t> all_indices(std::int64_t n) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

double loss_gradcheck(const std::function<torch::Tensor(const std::vector<torch::Tensor>&)>& loss,
                      std::vector<torch::Tensor> inputs) {
  for (auto& t : inputs) t.requires_grad_(true);
  auto out = loss(inputs);
  auto grads = torch::autograd::grad({out}, inputs);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&] {
      torch::NoGradGuard ng;
      return loss(inputs).item<double>();
    };
    worst = std::max(worst, fd_error(f, inputs[k], grads[k], all_indices(inputs[k].numel()), 1e-6));
  }
  return worst;
}

Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(202);
  constexpr int K = 4, S = 8;
  auto labels = torch::randint(0, K + 1, {2, S, S}, torch::kInt64);
  const ScribbleMap scribble{labels, K};

  const double e_pce = loss_gradcheck(
      [&](const auto& in) { return ssl_loss(scribble, in[0], in[1]); },
      {torch::randn({2, K, S, S}, kF64), torch::randn({2, K, S, S}, kF64)});
  const double e_psl = loss_gradcheck(
      [](const auto& in) { return psl_loss(torch::softmax(in[0], 1), torch::softmax(in[1], 1), 0.37); },
      {torch::randn({2, K, S, S}, kF64), torch::randn({2, K, S, S}, kF64)});
  auto edge_gt = torch::rand({2, 1, S, S}, kF64);
  const double e_esl =
      loss_gradcheck([&](const auto& in) { return esl_loss(in[0], edge_gt); }, {torch::rand({2, 1, S, S}, kF64)});

  // Full tiny model on a 3-channel 32x32 input, every component enabled.
  torch::manual_seed(203);
  QMaxViTUnet model(testing_support::tiny_model(32, 3, K));
  model->to(torch::kFloat64);
  model->eval();
  auto image = torch::rand({1, 3, 32, 32}, kF64).requires_grad_(true);
  auto probe = model->forward(image);
  auto r1 = torch::randn_like(probe.y1), r2 = torch::randn_like(probe.y2), r3 = torch::randn_like(probe.edge_pred);
  auto scalar = [&](const ModelOutputs& o) { return (o.y1 * r1).sum() + (o.y2 * r2).sum() + (o.edge_pred * r3).sum(); };

  std::vector<torch::Tensor> leaves{image};
  std::vector<std::string> names{"image"};
  for (const auto& p : model->named_parameters()) {
    leaves.push_back(p.value());
    names.push_back(p.key());
  }
  auto grads = torch::autograd::grad({scalar(probe)}, leaves, {}, false, false, true);
  auto f = [&] {
    torch::NoGradGuard ng;
    return scalar(model->forward(image)).item<double>();
  };

  std::mt19937_64 rng(204);
  auto sample = [&](std::int64_t n, std::size_t k) {
    std::vector<std::int64_t> idx;
    for (std::size_t i = 0; i < k; ++i) idx.push_back(static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n)));
    return idx;
  };
  const double e_input = fd_error(f, image, grads[0], sample(image.numel(), 32), 1e-6);

  // One coordinate in each of 40 parameter tensors spread over the model.
  std::vector<std::size_t> chosen;
  for (std::size_t i = 1; i < leaves.size(); ++i)
    if (grads[i].defined()) chosen.push_back(i);
  std::vector<std::size_t> picked;
  const std::size_t stride = std::max<std::size_t>(1, chosen.size() / 40);
  for (std::size_t i = 0; i < chosen.size() && picked.size() < 40; i += stride) picked.push_back(chosen[i]);

  // Accumulate one global relative error over all sampled parameter entries.
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (auto li : picked) {
    torch::NoGradGuard ng;
    auto flat = leaves[li].view(-1);
    const auto i = sample(flat.numel(), 1)[0];
    auto* p = flat.data_ptr<double>() + i;
    const double v = *p;
    *p = v + 1e-6;
    const double up = f();
    *p = v - 1e-6;
    const double down = f();
    *p = v;
    const double numeric = (up - down) / 2e-6;
    const double analytic = grads[li].contiguous().view(-1)[i].item<double>();
    diff2 += (analytic - numeric) * (analytic - numeric);
    a2 += analytic * analytic;
    n2 += numeric * numeric;
  }
  const double e_params = std::sqrt(diff2) / std::sqrt(std::max(a2, n2));

  const double worst = std::max({e_pce, e_psl, e_esl, e_input, e_params});
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "rel err ssl " << fmt("%.1e", e_pce) << " psl " << fmt("%.1e", e_psl) << " esl " << fmt("%.1e", e_esl)
     << ", model input " << fmt("%.1e", e_input) << " params(" << picked.size() << ") " << fmt("%.1e", e_params)
     << " (<= 1e-4), " << fmt("%.1f", secs) << " s";
  return {worst <= 1e-4 && secs < 300.0, os.str()};
}

// ---------------------------------------------------------------------------
// 3. Pseudo-label invariants

Outcome pseudo_label_invariants() {
  torch::manual_seed(303);
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr int K = 4, S = 8;
  int shared_failures = 0;
  double worst_swap = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    auto y1 = torch::softmax(torch::randn({K, S, S}, kF64) * 2.0, 0);
    auto y2 = torch::softmax(torch::randn({K, S, S}, kF64) * 2.0, 0);
    double alpha = unit(rng);
    while (alpha == 0.0) alpha = unit(rng);

    worst_swap = std::max(worst_swap, std::abs(psl_loss(y1, y2, alpha).item<double>() -
                                               psl_loss(y2, y1, 1.0 - alpha).item<double>()));

    // Move y2's maximum onto y1's argmax so both heads agree everywhere.
    auto shared = y2.clone();
    auto a1 = y1.argmax(0), a2 = shared.argmax(0);
    auto acc = shared.accessor<double, 3>();
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const auto i = a1[y][x].item<std::int64_t>(), j = a2[y][x].item<std::int64_t>();
        std::swap(acc[i][y][x], acc[j][y][x]);
      }
    if (!torch::equal(mix_pseudo_label(y1, shared, alpha), a1)) ++shared_failures;
  }
  std::ostringstream os;
  os << "1000 draws, shared-argmax violations " << shared_failures << ", max swap asymmetry "
     << fmt("%.1e", worst_swap) << " (<= 1e-12)";
  return {shared_failures == 0 && worst_swap <= 1e-12, os.str()};
}

// ---------------------------------------------------------------------------
// 4. Attention structure

struct Leak {
  double outside = 0.0;  // largest change outside the source's group
  double inside = 0.0;   // largest change at other members of the group
};

Leak influence(PartitionAttention& layer, std::int64_t h, std::int64_t w, std::int64_t p) {
  torch::NoGradGuard ng;
  auto x = torch::randn({1, 16, h, w}, kF64);
  auto base = layer->attention_sublayer(x);
  std::mt19937_64 rng(404);
  Leak leak;
  for (int trial = 0; trial < 12; ++trial) {
    const auto sy = static_cast<std::int64_t>(rng() % h), sx = static_cast<std::int64_t>(rng() % w);
    auto xp = x.clone();
    xp.index_put_({0, torch::indexing::Slice(), sy, sx}, torch::randn({16}, kF64));
    auto change = (layer->attention_sublayer(xp) - base).abs().amax(1)[0];
    auto acc = change.accessor<double, 2>();
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) {
        if (y == sy && xx == sx) continue;
        const bool same = layer->kind() == Partition::block ? (y / p == sy / p && xx / p == sx / p)
                                                             : (y % (h / p) == sy % (h / p) && xx % (w / p) == sx % (w / p));
        auto& slot = same ? leak.inside : leak.outside;
        slot = std::max(slot, acc[y][xx]);
      }
  }
  return leak;
}

std::int64_t scores_for(const std::function<torch::Tensor(const torch::Tensor&)>& f, std::int64_t side) {
  torch::NoGradGuard ng;
  CountScope scope;
  f(torch::randn({1, 16, side, side}));
  return scope.counts().attention_scores;
}

Outcome attention_structure() {
  torch::manual_seed(404);
  constexpr std::int64_t p = 4, heads = 2;
  PartitionAttention block(Partition::block, 16, heads, p), grid(Partition::grid, 16, heads, p);
  block->to(torch::kFloat64);
  grid->to(torch::kFloat64);
  const auto lb = influence(block, 16, 24, p), lg = influence(grid, 16, 24, p);
  bool ok = lb.outside <= 1e-12 && lg.outside <= 1e-12 && lb.inside > 1e-8 && lg.inside > 1e-8;

  PartitionAttention block32(Partition::block, 16, heads, p), grid32(Partition::grid, 16, heads, p);
  double worst_ratio = 0.0;
  std::vector<double> per_token;
  for (auto* layer : {&block32, &grid32})
    for (std::int64_t side : {16, 32, 64}) {
      const auto n = side * side;
      const auto counted = scores_for([&](const torch::Tensor& x) { return (*layer)->attention_sublayer(x); }, side);
      const double analytic = static_cast<double>(heads * n * p * p);
      worst_ratio = std::max(worst_ratio, std::abs(counted / analytic - 1.0));
      per_token.push_back(static_cast<double>(counted) / static_cast<double>(n));
    }
  // Linear growth: the per-token score count is independent of the map size.
  const auto [lo, hi] = std::minmax_element(per_token.begin(), per_token.end());
  const bool linear = *hi / *lo - 1.0 <= 0.05;

  FullAttention full(16, heads);
  const auto f16 = scores_for([&](const torch::Tensor& x) { return full->forward(x); }, 16);
  const auto f32 = scores_for([&](const torch::Tensor& x) { return full->forward(x); }, 32);
  const double full_ratio = static_cast<double>(f32) / static_cast<double>(f16);
  const double full_err = std::max(std::abs(f16 / static_cast<double>(heads * 256 * 256) - 1.0),
                                   std::abs(f32 / static_cast<double>(heads * 1024 * 1024) - 1.0));
  ok = ok && worst_ratio <= 0.05 && linear && full_err <= 0.05 && std::abs(full_ratio / 16.0 - 1.0) <= 0.05;

  std::ostringstream os;
  os << "cross-group leak block " << fmt("%.1e", lb.outside) << " grid " << fmt("%.1e", lg.outside)
     << " (in-group " << fmt("%.1e", lb.inside) << "/" << fmt("%.1e", lg.inside) << "); partitioned scores vs "
     << "heads*N*p^2 max dev " << fmt("%.1f", 100.0 * worst_ratio) << "%, x4 tokens -> x"
     << fmt("%.2f", 4.0 * per_token[1] / per_token[0]) << "; full attention x4 tokens -> x"
     << fmt("%.2f", full_ratio);
  return {ok, os.str()};
}

// ---------------------------------------------------------------------------
// 5. Shape schedule

Outcome shape_schedule() {
  torch::manual_seed(505);
  torch::NoGradGuard ng;
  bool ok = true;
  std::ostringstream os;
  for (std::int64_t s : {64, 128, 256}) {
    BackboneConfig cfg;
    cfg.input_size = s;
    Backbone bb(cfg);
    bb->eval();
    auto pyr = bb->forward(torch::rand({1, 3, s, s}));
    const FeatureMap* levels[] = {&pyr.e1, &pyr.e2, &pyr.e3, &pyr.e4};
    for (int i = 0; i < 4; ++i) {
      const std::int64_t stride = 4 << i;
      const std::vector<std::int64_t> expected{1, 96 << i, s / stride, s / stride};
      if (levels[i]->data.sizes().vec() != expected || levels[i]->stride != stride) {
        ok = false;
        os << "input " << s << " e" << i + 1 << " got " << levels[i]->data.sizes() << "; ";
      }
    }
    ok = ok && pyr.d_e4() == 768;
  }

  QMaxViTUnet model(ModelConfig::standard(4, 64));
  model->eval();
  auto pyr = model->backbone->forward(torch::rand({1, 3, 64, 64}));
  auto edge = model->edge->forward(pyr.e1, pyr.e2);
  auto q = model->initial_queries(1, &edge);
  const bool q_ok = q.queries.sizes() == torch::IntArrayRef({1, 4, 768});
  os << "e1..e4 = (96*2^(i-1), S/2^(i+1)) for S in {64,128,256}; queries " << q.queries.sizes();
  return {ok && q_ok, os.str()};
}

// ---------------------------------------------------------------------------
// 6. Metric oracles

Outcome metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<std::int32_t>> masks(512, std::vector<std::int32_t>(9));
  std::vector<std::vector<int>> plain(512, std::vector<int>(9));
  for (int m = 0; m < 512; ++m)
    for (int i = 0; i < 9; ++i) masks[m][i] = plain[m][i] = (m >> i) & 1;

  long dsc_mismatch = 0, hd_mismatch = 0, scale_mismatch = 0;
  double worst_aniso = 0.0;
  for (int a = 0; a < 512; ++a)
    for (int b = 0; b < 512; ++b) {
      const auto va = testing_support::view_of(masks[a], 3, 3), vb = testing_support::view_of(masks[b], 3, 3);
      dsc_mismatch += dsc(va, vb, 1) != oracle::dsc(plain[a], plain[b], 1);
      const double h = hd95(va, vb, 1);
      hd_mismatch += h != oracle::hd95(plain[a], plain[b], 3, 3, 1);
      if ((a * 512 + b) % 7 == 0) {
        scale_mismatch += hd95(va, vb, 1, {2.0, 2.0}) != 2.0 * h;
        worst_aniso = std::max(worst_aniso, rel_error(hd95(va, vb, 1, {0.3, 0.3}), 0.3 * h));
        worst_aniso = std::max(worst_aniso, rel_error(hd95(va, vb, 1, {0.5, 1.7}),
                                                      oracle::hd95(plain[a], plain[b], 3, 3, 1, 0.5, 1.7)));
      }
    }
  std::ostringstream os;
  os << "262144 pairs: DSC mismatches " << dsc_mismatch << ", HD95 mismatches " << hd_mismatch
     << "; spacing x2 mismatches " << scale_mismatch << ", x0.3/anisotropic max rel err " << fmt("%.1e", worst_aniso)
     << ", " << fmt("%.1f", seconds_since(t0)) << " s";
  return {dsc_mismatch == 0 && hd_mismatch == 0 && scale_mismatch == 0 && worst_aniso <= 1e-12, os.str()};
}

// ---------------------------------------------------------------------------
// 7. Ignore semantics

Outcome ignore_semantics() {
  torch::manual_seed(707);
  constexpr int K = 4;
  int changed = 0, trials = 0;
  for (auto dtype : {torch::kFloat32, torch::kFloat64}) {
    auto logits = torch::randn({2, K, 16, 16}, torch::TensorOptions().dtype(dtype));
    auto labels = torch::randint(0, K, {2, 16, 16}, torch::kInt64);
    auto unknown = torch::rand({2, 16, 16}) < 0.7;
    labels.masked_fill_(unknown, K);
    const ScribbleMap s{labels, K};
    const auto reference = partial_ce(logits, s);
    auto mask = unknown.unsqueeze(1).expand_as(logits);
    for (double scale : {1e-3, 1.0, 1e3}) {
      auto perturbed = logits + torch::randn_like(logits) * scale * mask.to(logits.scalar_type());
      const auto loss = partial_ce(perturbed, s);
      changed += !torch::equal(loss, reference);
      ++trials;
    }
  }
  auto logits = torch::randn({2, K, 16, 16}, kF64).requires_grad_(true);
  auto none = torch::full({2, 16, 16}, K, torch::kInt64);
  auto zero = partial_ce(logits, {none, K});
  zero.backward();
  const bool zero_ok = zero.item<double>() == 0.0 && logits.grad().abs().max().item<double>() == 0.0;
  std::ostringstream os;
  os << trials << " perturbation trials, loss changed in " << changed << "; all-unlabeled loss "
     << zero.item<double>() + 0.0 << (zero_ok ? " with zero gradient" : " with nonzero gradient");
  return {changed == 0 && zero_ok, os.str()};
}

// ---------------------------------------------------------------------------
// 8. Desk-scale training smoke test

double train_and_score(const ComponentToggles& toggles, const std::vector<ImageSample>& train,
                       const std::vector<ImageSample>& test) {
  TrainConfig cfg;
  cfg.model.toggles = toggles;
  cfg.epochs = 30;
  cfg.seed = 0;
  auto result = fit(cfg, train, {});
  auto model = load_model(result.best);
  return evaluate(model, test, cfg.batch_size).summary.dsc_avg;
}

Outcome training_smoke() {
  const auto t0 = std::chrono::steady_clock::now();
  auto train = synth_shapes_dataset(200, 64, 4, 1);
  for (auto& s : train) s.dense_gt = cv::Mat();
  const auto test = synth_shapes_dataset(50, 64, 4, 2);
  const double full = train_and_score({true, true, true}, train, test);
  const double baseline = train_and_score({false, false, false}, train, test);
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "test DSC full " << fmt("%.3f", full) << " (>= 0.75) vs baseline " << fmt("%.3f", baseline) << ", "
     << fmt("%.0f", secs) << " s for both runs";
  return {full >= 0.75 && full > baseline && secs <= 1800.0, os.str()};
}

// ---------------------------------------------------------------------------
// 9. Determinism

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Outcome determinism(const fs::path& work) {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 9;
  const auto data = synth_shapes_dataset(30, 64, 4, 9);
  std::vector<ImageSample> train(data.begin(), data.begin() + 24), val(data.begin() + 24, data.end());
  const auto dir_a = work / "determinism_a", dir_b = work / "determinism_b";
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  fit(cfg, train, val, {dir_a, {}});
  fit(cfg, train, val, {dir_b, {}});

  const auto ha = TrainHistory::read_csv(dir_a / "history.csv"), hb = TrainHistory::read_csv(dir_b / "history.csv");
  double worst = 0.0;
  bool rows_ok = ha.epochs.size() == hb.epochs.size();
  for (std::size_t i = 0; rows_ok && i < ha.epochs.size(); ++i) {
    const auto &a = ha.epochs[i], &b = hb.epochs[i];
    for (auto [x, y] : {std::pair{a.loss_total, b.loss_total}, {a.loss_ssl, b.loss_ssl}, {a.loss_psl, b.loss_psl},
                        {a.loss_esl, b.loss_esl}})
      worst = std::max(worst, rel_error(x, y));
    rows_ok = a.epoch == b.epoch && a.lr == b.lr;
  }
  const bool csv_identical = slurp(dir_a / "history.csv") == slurp(dir_b / "history.csv");

  std::vector<std::string> ids;
  for (const auto& s : val) ids.push_back(s.id);
  std::vector<std::string> reports;
  for (int round = 0; round < 2; ++round) {
    auto model = load_model(dir_a / "best.qmx");
    auto ev = evaluate(model, val, 4);
    const auto stem = work / ("determinism_eval_" + std::to_string(round));
    write_report_json(stem.string() + ".json", ev.summary, ids, ev.per_sample);
    write_report_csv(stem.string() + ".csv", ev.summary, ids, ev.per_sample);
    reports.push_back(slurp(stem.string() + ".json") + slurp(stem.string() + ".csv"));
  }
  const bool reports_identical = reports[0] == reports[1] && !reports[0].empty();

  std::ostringstream os;
  os << "history loss max rel diff " << fmt("%.1e", worst) << " (<= 1e-6)"
     << (csv_identical ? ", CSVs byte-identical" : ", CSVs differ") << "; reports from one checkpoint "
     << (reports_identical ? "byte-identical" : "differ");
  return {rows_ok && worst <= 1e-6 && reports_identical, os.str()};
}

// ---------------------------------------------------------------------------
// 10. Ablation harness

bool all_zero(const torch::Tensor& g) { return !g.defined() || g.abs().max().item<double>() == 0.0; }

Outcome ablation_harness() {
  const auto grid = toggle_grid();
  std::set<std::string> labels;
  for (const auto& t : grid) labels.insert(t.label());
  bool ok = grid.size() == 8 && labels.size() == 8;
  std::ostringstream problems;

  const auto data = synth_shapes_dataset(2, 32, 4, 10);
  const auto batch = make_batch(data);
  for (const auto& toggles : grid) {
    torch::manual_seed(1010);
    auto cfg = TrainConfig{};
    cfg.model = testing_support::tiny_model();
    cfg.model.toggles = toggles;
    QMaxViTUnet model(cfg.model);
    auto out = model->forward(batch.image);
    if (out.y2.defined() != toggles.dual_decoder || out.edge_pred.defined() != toggles.edge) {
      ok = false;
      problems << toggles.label() << ": outputs do not follow toggles; ";
    }
    total_loss(compute_losses(out, batch, 0.4, cfg), cfg.loss_weights).backward();

    bool edge_live = false, query_live = false, dual_live = false;
    for (const auto& p : model->named_parameters()) {
      const auto& name = p.key();
      const bool zero = all_zero(p.value().grad());
      const bool queries_used = !toggles.edge && (toggles.query || toggles.dual_decoder);
      bool must_be_zero = false;
      if (is_edge_parameter(name)) {
        must_be_zero = !toggles.edge;
        edge_live |= !zero;
      } else if (is_query_parameter(name)) {
        must_be_zero = !toggles.query;
        query_live |= !zero;
      } else if (is_dual_parameter(name)) {
        must_be_zero = !toggles.dual_decoder;
        dual_live |= !zero;
      } else if (name == "zero_queries") {
        must_be_zero = !queries_used;
        dual_live |= toggles.dual_decoder && !zero;
      }
      if (must_be_zero && !zero) {
        ok = false;
        problems << toggles.label() << ": " << name << " has gradient; ";
      }
    }
    if (edge_live != toggles.edge || query_live != toggles.query || dual_live != toggles.dual_decoder) {
      ok = false;
      problems << toggles.label() << ": an enabled component received no gradient; ";
    }
  }
  std::ostringstream os;
  os << grid.size() << " configurations, " << labels.size() << " distinct; gradients confined to enabled components";
  if (!problems.str().empty()) os << " -- " << problems.str();
  return {ok, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qmx acceptance checks"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "qmx_acceptance").string();
  app.add_option("--only", only, "Criterion numbers to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--work-dir", work, "Scratch directory for training runs");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  torch::set_num_threads(1);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"loss oracles", loss_oracles},
      {"gradient checks", gradient_checks},
      {"pseudo-label invariants", pseudo_label_invariants},
      {"attention structure", attention_structure},
      {"shape schedule", shape_schedule},
      {"metric oracles", metric_oracles},
      {"ignore semantics", ignore_semantics},
      {"desk-scale training", training_smoke},
      {"determinism", [&] { return determinism(work); }},
      {"ablation harness", ablation_harness},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failures += !r.pass;
    std::printf("%s  %2d  %s: %s\n", r.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), r.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
