#include "qmx/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "qmx/errors.hpp"

namespace fs = std::filesystem;

namespace qmx {
namespace {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

torch::Tensor label_tensor(const cv::Mat& labels) {
  CV_Assert(labels.type() == CV_32SC1);
  cv::Mat c = labels.isContinuous() ? labels : labels.clone();
  return torch::from_blob(c.data, {c.rows, c.cols}, torch::kInt32).to(torch::kInt64);
}

cv::Mat labels_from_tensor(const torch::Tensor& t) {
  auto c = t.to(torch::kInt32).contiguous();
  cv::Mat out(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), CV_32SC1);
  std::memcpy(out.data, c.data_ptr<std::int32_t>(), sizeof(std::int32_t) * c.numel());
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (grad_clip < 0.0) throw ConfigError("grad clip must be >= 0");
  if (loss_weights.ssl < 0.0 || loss_weights.psl < 0.0 || loss_weights.esl < 0.0)
    throw ConfigError("loss weights must be >= 0");
  model.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"loss_weights", c.loss_weights},
       {"model", c.model},
       {"seed", c.seed},
       {"grad_clip", c.grad_clip},
       {"dice_include_background", c.dice_include_background},
       {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("lr").get_to(c.lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("loss_weights").get_to(c.loss_weights);
  j.at("model").get_to(c.model);
  j.at("seed").get_to(c.seed);
  c.grad_clip = j.value("grad_clip", 0.0);
  c.dice_include_background = j.value("dice_include_background", true);
  c.augment = j.value("augment", true);
}

double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (step < 0 || step > total_steps)
    throw ConfigError("step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  constexpr double eta_min = 0.0;
  return eta_min + 0.5 * (cfg.lr - eta_min) *
                       (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
}

torch::Tensor image_tensor(const cv::Mat& image) {
  CV_Assert(image.depth() == CV_32F);
  cv::Mat c = image.isContinuous() ? image : image.clone();
  auto t = torch::from_blob(c.data, {c.rows, c.cols, c.channels()}, torch::kFloat32);
  return t.permute({2, 0, 1}).clone();
}

Batch make_batch(const std::vector<ImageSample>& samples, torch::ScalarType dtype) {
  if (samples.empty()) throw DataError("empty batch");
  std::vector<torch::Tensor> images, scribbles, edges;
  Batch b;
  b.unknown_code = samples.front().unknown_code;
  for (const auto& s : samples) {
    if (s.unknown_code != b.unknown_code) throw DataError("samples in one batch disagree on the class count");
    images.push_back(image_tensor(s.image));
    scribbles.push_back(label_tensor(s.scribble));
    edges.push_back(image_tensor(s.edge_gt));
  }
  b.image = torch::stack(images).to(dtype);
  b.scribble = torch::stack(scribbles);
  b.edge_gt = torch::stack(edges).to(dtype);
  return b;
}

LossComponents compute_losses(const ModelOutputs& out, const Batch& batch, double alpha, const TrainConfig& cfg) {
  LossComponents parts;
  const ScribbleMap scribble{batch.scribble, batch.unknown_code};
  if (out.y2.defined()) {
    parts.ssl = ssl_loss(scribble, out.y1, out.y2);
    parts.psl = psl_loss(torch::softmax(out.y1, 1), torch::softmax(out.y2, 1), alpha, cfg.dice_include_background);
  } else {
    parts.ssl = partial_ce(out.y1, scribble);
  }
  if (out.edge_pred.defined()) {
    const auto factor = batch.edge_gt.size(-1) / out.edge_pred.size(-1);
    auto target = factor > 1 ? torch::avg_pool2d(batch.edge_gt, factor) : batch.edge_gt;
    parts.esl = esl_loss(out.edge_pred, target);
  }
  return parts;
}

TrainState::TrainState(const TrainConfig& c) : cfg(c), rng(c.seed) {
  cfg.validate();
  torch::manual_seed(cfg.seed);
  model = QMaxViTUnet(cfg.model);
  optimizer = std::make_unique<torch::optim::AdamW>(
      model->parameters(), torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
}

void TrainState::set_lr(double lr) {
  for (auto& group : optimizer->param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

double TrainState::draw_alpha() {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  double a = 0.0;
  while (a == 0.0) a = uni(rng);
  return a;
}

StepRecord train_step(TrainState& state, const Batch& batch, double alpha) {
  auto& model = state.model;
  model->train();
  auto out = model->forward(batch.image);
  auto parts = compute_losses(out, batch, alpha, state.cfg);
  auto total = total_loss(parts, state.cfg.loss_weights);

  StepRecord rec;
  rec.alpha = alpha;
  rec.total = total.item<double>();
  rec.ssl = parts.ssl.defined() ? parts.ssl.item<double>() : 0.0;
  rec.psl = parts.psl.defined() ? parts.psl.item<double>() : 0.0;
  rec.esl = parts.esl.defined() ? parts.esl.item<double>() : 0.0;
  if (!std::isfinite(rec.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << state.step << ": total=" << rec.total << " ssl=" << rec.ssl
       << " psl=" << rec.psl << " esl=" << rec.esl << " alpha=" << alpha
       << " logits_finite=" << torch::isfinite(out.y1).all().item<bool>();
    throw NumericError(os.str());
  }

  state.optimizer->zero_grad();
  total.backward();
  if (state.cfg.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(model->parameters(), state.cfg.grad_clip);
  state.optimizer->step();
  ++state.step;
  return rec;
}

void TrainHistory::write_csv(const fs::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << "epoch,loss_total,loss_ssl,loss_psl,loss_esl,val_dsc,val_hd95,lr\n";
  for (const auto& e : epochs)
    os << e.epoch << ',' << format_double(e.loss_total) << ',' << format_double(e.loss_ssl) << ','
       << format_double(e.loss_psl) << ',' << format_double(e.loss_esl) << ',' << format_double(e.val_dsc) << ','
       << format_double(e.val_hd95) << ',' << format_double(e.lr) << '\n';
}

TrainHistory TrainHistory::read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "epoch,loss_total,loss_ssl,loss_psl,loss_esl,val_dsc,val_hd95,lr")
    throw DataError("unexpected history header in " + path.string());
  TrainHistory h;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 8) throw DataError("malformed history row: " + line);
    EpochRecord e;
    e.epoch = std::stoll(cells[0]);
    e.loss_total = parse_double(cells[1]);
    e.loss_ssl = parse_double(cells[2]);
    e.loss_psl = parse_double(cells[3]);
    e.loss_esl = parse_double(cells[4]);
    e.val_dsc = parse_double(cells[5]);
    e.val_hd95 = parse_double(cells[6]);
    e.lr = parse_double(cells[7]);
    h.epochs.push_back(e);
  }
  return h;
}

FitResult fit(const TrainConfig& cfg, const std::vector<ImageSample>& train, const std::vector<ImageSample>& val,
              const FitOptions& opts) {
  if (train.empty()) throw DataError("training split is empty");
  for (const auto& s : train)
    if (s.unknown_code != cfg.model.num_classes())
      throw ConfigError("sample " + s.id + " was loaded for " + std::to_string(s.unknown_code) +
                        " classes but the model has " + std::to_string(cfg.model.num_classes()));
  if (!opts.out_dir.empty()) fs::create_directories(opts.out_dir);

  TrainState state(cfg);
  FitResult result;
  double best_dsc = -1.0;
  std::vector<std::size_t> order(train.size());

  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg.epochs, cfg);
    state.set_lr(lr);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), state.rng);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    std::int64_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<ImageSample> chunk;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        const auto& s = train[order[i]];
        if (cfg.augment) {
          std::mt19937_64 local(sample_seed(cfg.seed, epoch, s.id));
          chunk.push_back(augment(s, local));
        } else {
          chunk.push_back(s);
        }
      }
      const double alpha = state.draw_alpha();
      result.alphas.push_back(alpha);
      StepRecord step;
      try {
        step = train_step(state, make_batch(chunk), alpha);
      } catch (const NumericError& e) {
        if (!opts.out_dir.empty()) {
          std::ofstream dump(opts.out_dir / "failure.json");
          dump << nlohmann::json{{"epoch", epoch + 1}, {"step", state.step}, {"error", e.what()}}.dump(2) << '\n';
        }
        throw;
      }
      const auto n = static_cast<double>(chunk.size());
      rec.loss_total += step.total * n;
      rec.loss_ssl += step.ssl * n;
      rec.loss_psl += step.psl * n;
      rec.loss_esl += step.esl * n;
      seen += static_cast<std::int64_t>(chunk.size());
    }
    rec.loss_total /= seen;
    rec.loss_ssl /= seen;
    rec.loss_psl /= seen;
    rec.loss_esl /= seen;

    bool improved = val.empty();
    if (!val.empty()) {
      auto ev = evaluate(state.model, val, cfg.batch_size);
      rec.val_dsc = ev.summary.dsc_avg;
      rec.val_hd95 = ev.summary.hd95_avg;
      improved = rec.val_dsc > best_dsc;
    }
    if (improved) {
      best_dsc = val.empty() ? best_dsc : rec.val_dsc;
      result.best_epoch = rec.epoch;
      result.best = model_checkpoint(state.model, cfg,
                                     {{"epoch", rec.epoch}, {"step", state.step}, {"rng", rng_state(state.rng)},
                                      {"val_dsc", val.empty() ? nlohmann::json() : nlohmann::json(rec.val_dsc)}});
      if (!opts.out_dir.empty()) write_checkpoint(opts.out_dir / "best.qmx", result.best);
    }
    result.history.epochs.push_back(rec);
    if (!opts.out_dir.empty()) result.history.write_csv(opts.out_dir / "history.csv");
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  if (!opts.out_dir.empty())
    write_checkpoint(opts.out_dir / "last.qmx",
                     model_checkpoint(state.model, cfg,
                                      {{"epoch", cfg.epochs}, {"step", state.step}, {"rng", rng_state(state.rng)}}));
  return result;
}

std::vector<cv::Mat> predict(QMaxViTUnet& model, const std::vector<ImageSample>& samples, std::int64_t batch_size) {
  torch::NoGradGuard guard;
  model->eval();
  const auto dtype = model->parameters().front().scalar_type();
  std::vector<cv::Mat> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<torch::Tensor> images;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i)
      images.push_back(image_tensor(samples[i].image));
    auto logits = model->forward(torch::stack(images).to(dtype)).y1;
    auto labels = logits.argmax(1);
    for (std::int64_t b = 0; b < labels.size(0); ++b) out.push_back(labels_from_tensor(labels[b]));
  }
  return out;
}

Evaluation evaluate(QMaxViTUnet& model, const std::vector<ImageSample>& samples, std::int64_t batch_size) {
  if (samples.empty()) throw DataError("evaluation split is empty");
  const auto k = model->config().num_classes();
  for (const auto& s : samples) {
    if (s.unknown_code != k)
      throw ConfigError("sample " + s.id + " has " + std::to_string(s.unknown_code) + " classes, model has " +
                        std::to_string(k));
    if (s.dense_gt.empty()) throw DataError("sample " + s.id + " has no dense mask");
  }
  Evaluation ev;
  ev.predictions = predict(model, samples, batch_size);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& p = ev.predictions[i];
    const LabelView pv{{p.ptr<std::int32_t>(), p.total()}, p.rows, p.cols};
    ev.per_sample.push_back(evaluate_labels(pv, samples[i].dense_view(), static_cast<int>(k), samples[i].spacing));
  }
  ev.summary = aggregate(ev.per_sample);
  return ev;
}

std::vector<ComponentToggles> toggle_grid() {
  std::vector<ComponentToggles> grid;
  for (int dual = 0; dual < 2; ++dual)
    for (int query = 0; query < 2; ++query)
      for (int edge = 0; edge < 2; ++edge) grid.push_back({dual == 1, query == 1, edge == 1});
  return grid;
}

std::vector<WeightSet> weight_grid() {
  return {{"#1", {0.5, 0.5, 0.5}}, {"#2", {0.7, 0.2, 0.4}}, {"#3", {0.8, 0.4, 0.3}}, {"#4", {1.0, 0.5, 0.2}}};
}

Checkpoint model_checkpoint(const QMaxViTUnet& model, const TrainConfig& cfg, nlohmann::json extra) {
  nlohmann::json meta = extra.is_object() ? std::move(extra) : nlohmann::json::object();
  meta["config"] = cfg;
  meta["version"] = QMX_VERSION;
  return capture_state(*model, meta);
}

QMaxViTUnet load_model(const Checkpoint& ckpt, TrainConfig* cfg_out) {
  if (!ckpt.meta.contains("config")) throw DataError("checkpoint carries no config record");
  auto cfg = ckpt.meta.at("config").get<TrainConfig>();
  QMaxViTUnet model(cfg.model);
  restore_state(*model, ckpt);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

QMaxViTUnet load_model(const fs::path& path, TrainConfig* cfg_out) { return load_model(read_checkpoint(path), cfg_out); }

}  // namespace qmx
