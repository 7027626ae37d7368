// qmx: data synthesis, training, evaluation, prediction, ablation sweeps and
// complexity reports for the scribble-supervised segmentation model.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

#include "qmx/data.hpp"
#include "qmx/errors.hpp"
#include "qmx/instrument.hpp"
#include "qmx/report.hpp"
#include "qmx/training.hpp"

namespace fs = std::filesystem;
using namespace qmx;

namespace {

std::uint64_t effective_seed(std::uint64_t flag) {
  if (const char* env = std::getenv("QMX_SEED"); env && *env) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("QMX_SEED is not an unsigned integer: ") + env);
    }
  }
  return flag;
}

struct ModelOpts {
  std::string preset = "standard";
  int size = 256;
  int classes = 4;
  bool no_dual = false, no_query = false, no_edge = false;

  ModelConfig build() const {
    auto m = ModelConfig::preset(preset, classes, size);
    m.toggles = {!no_dual, !no_query, !no_edge};
    return m;
  }
};

void add_model_flags(CLI::App* cmd, ModelOpts& m, bool toggles = true) {
  cmd->add_option("--preset", m.preset, "Model width preset: standard (width 96, depths 2,2,5,2) or desk")
      ->check(CLI::IsMember({"standard", "desk"}))
      ->capture_default_str();
  cmd->add_option("--size", m.size, "Input side length; images are resized to size x size")->capture_default_str();
  cmd->add_option("--classes", m.classes, "Number of classes including background")->capture_default_str();
  if (toggles) {
    cmd->add_flag("--no-dual", m.no_dual, "Drop the dual decoder (PPM-FPN + query mask head, y2 and psl)");
    cmd->add_flag("--no-query", m.no_query, "Drop the two-way Transformer refinement of the bottleneck");
    cmd->add_flag("--no-edge", m.no_edge, "Drop the edge module (edge map, decoder injections, query conditioning)");
  }
}

struct TrainOpts {
  ModelOpts model;
  std::string data, out;
  std::int64_t epochs = 200;
  double lr = 1e-3, wd = 0.01;
  double lambda1 = 1.0, lambda2 = 0.5, lambda3 = 0.2;
  std::int64_t batch = 8;
  int fold = 0, folds = 5;
  bool all_folds = false;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;
  bool grad_clip = false;
  bool no_augment = false;
  bool dice_no_background = false;

  TrainConfig build() const {
    TrainConfig c;
    c.model = model.build();
    c.epochs = epochs;
    c.lr = lr;
    c.weight_decay = wd;
    c.loss_weights = {lambda1, lambda2, lambda3};
    c.batch_size = batch;
    c.seed = effective_seed(seed);
    c.grad_clip = grad_clip ? 1.0 : 0.0;
    c.augment = !no_augment;
    c.dice_include_background = !dice_no_background;
    return c;
  }
};

void add_train_flags(CLI::App* cmd, TrainOpts& t) {
  cmd->add_option("--data", t.data, "Dataset directory (meta.csv, images/, scribbles/, ...)")->required();
  cmd->add_option("--out", t.out, "Output directory")->required();
  cmd->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--lr", t.lr, "Initial AdamW learning rate (cosine-annealed to 0)")->capture_default_str();
  cmd->add_option("--wd", t.wd, "AdamW weight decay")->capture_default_str();
  cmd->add_option("--lambda1", t.lambda1, "Weight of the scribble loss")->capture_default_str();
  cmd->add_option("--lambda2", t.lambda2, "Weight of the pseudo-label loss")->capture_default_str();
  cmd->add_option("--lambda3", t.lambda3, "Weight of the edge loss")->capture_default_str();
  cmd->add_option("--batch", t.batch, "Mini-batch size")->capture_default_str();
  cmd->add_option("--fold", t.fold, "Validation fold index")->capture_default_str();
  cmd->add_option("--folds", t.folds, "Patient-level folds (1 = no validation split)")->capture_default_str();
  cmd->add_option("--test-fraction", t.test_fraction, "Share of patients held out as a test split")
      ->capture_default_str();
  cmd->add_option("--seed", t.seed, "Random seed (QMX_SEED overrides)")->capture_default_str();
  cmd->add_flag("--grad-clip", t.grad_clip, "Clip gradients at global norm 1.0");
  cmd->add_flag("--no-augment", t.no_augment, "Disable random rotation / flipping");
  cmd->add_flag("--dice-no-background", t.dice_no_background, "Leave class 0 out of the pseudo-label Dice");
  add_model_flags(cmd, t.model);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

std::vector<ImageSample> with_masks(const std::vector<ImageSample>& samples, const char* split) {
  std::vector<ImageSample> out;
  for (const auto& s : samples)
    if (!s.dense_gt.empty()) out.push_back(s);
  if (out.size() != samples.size())
    std::cerr << "warning: " << samples.size() - out.size() << " " << split
              << " samples have no dense mask and are left out of the metrics\n";
  return out;
}

void write_predictions(const fs::path& dir, const std::vector<ImageSample>& samples,
                       const std::vector<cv::Mat>& preds) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    cv::Mat u8;
    preds[i].convertTo(u8, CV_8U);
    if (!cv::imwrite((dir / (samples[i].id + ".png")).string(), u8)) throw DataError("cannot write prediction");
  }
}

void write_metric_files(const fs::path& dir, const std::string& stem, const std::vector<ImageSample>& samples,
                        const Evaluation& ev) {
  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.id);
  write_report_json(dir / (stem + ".json"), ev.summary, ids, ev.per_sample);
  write_report_csv(dir / (stem + ".csv"), ev.summary, ids, ev.per_sample);
}

void print_summary(const MetricReport& r) {
  for (const auto& [c, v] : r.dsc) std::cout << "  class " << c << "  dsc " << v << "  hd95 " << r.hd95.at(c) << '\n';
  std::cout << "  avg      dsc " << r.dsc_avg << "  hd95 " << r.hd95_avg << '\n';
}

// ---------------------------------------------------------------------------

int cmd_synth(int n, int size, int classes, std::uint64_t seed, const std::string& out) {
  RunManifest m;
  m.command = "synth";
  m.started_at = utc_timestamp();
  m.seed = effective_seed(seed);
  auto samples = synth_shapes_dataset(n, size, classes, m.seed);
  save_dataset(out, samples);
  m.config = {{"n", n}, {"size", size}, {"classes", classes}};
  m.version = QMX_VERSION;
  m.outputs = {{"meta", "meta.csv"}, {"images", "images/"}, {"scribbles", "scribbles/"},
               {"edges", "edges/"}, {"masks", "masks/"}};
  m.finished_at = utc_timestamp();
  write_manifest(out, m);
  std::cout << "wrote " << samples.size() << " samples to " << out << '\n';
  return 0;
}

struct FoldOutcome {
  FitResult fit;
  std::optional<Evaluation> val, test;
};

FoldOutcome train_fold(const TrainConfig& cfg, const std::vector<ImageSample>& samples, const SplitSpec& spec,
                       const fs::path& out, const std::string& command) {
  RunManifest m;
  m.command = command;
  m.started_at = utc_timestamp();
  m.seed = cfg.seed;
  m.version = QMX_VERSION;
  m.config = cfg;
  m.config["split"] = {{"fold", spec.fold_index}, {"folds", spec.fold_count}, {"test_fraction", spec.test_fraction}};

  auto splits = make_splits(samples, spec, cfg.seed);
  if (splits.train.empty()) throw DataError("training split is empty");
  auto val = with_masks(splits.val, "validation");
  std::cout << "fold " << spec.fold_index << ": " << splits.train.size() << " train / " << splits.val.size()
            << " val / " << splits.test.size() << " test samples, " << cfg.model.toggles.label() << '\n';

  fs::create_directories(out);
  write_json(out / "config.json", cfg);
  FitOptions opts;
  opts.out_dir = out;
  opts.on_epoch = [&](const EpochRecord& e) {
    std::cout << "epoch " << e.epoch << "/" << cfg.epochs << "  loss " << e.loss_total << " (ssl " << e.loss_ssl
              << ", psl " << e.loss_psl << ", esl " << e.loss_esl << ")  val dsc " << e.val_dsc << "  hd95 "
              << e.val_hd95 << "  lr " << e.lr << std::endl;
  };

  FoldOutcome outcome;
  outcome.fit = fit(cfg, splits.train, val, opts);
  cv::imwrite((out / "curves.png").string(), render_curves(outcome.fit.history));
  m.outputs = {{"best_checkpoint", "best.qmx"}, {"last_checkpoint", "last.qmx"}, {"history", "history.csv"},
               {"curves", "curves.png"},        {"config", "config.json"}};

  auto model = load_model(outcome.fit.best);
  if (!val.empty()) {
    outcome.val = evaluate(model, val, cfg.batch_size);
    write_metric_files(out, "val_report", val, *outcome.val);
    m.outputs["val_report"] = "val_report.json";
  }
  auto test = with_masks(splits.test, "test");
  if (!test.empty()) {
    outcome.test = evaluate(model, test, cfg.batch_size);
    write_metric_files(out, "test_report", test, *outcome.test);
    m.outputs["test_report"] = "test_report.json";
  }
  m.finished_at = utc_timestamp();
  write_manifest(out, m);
  return outcome;
}

int cmd_train(const TrainOpts& t) {
  auto cfg = t.build();
  cfg.validate();
  if (t.folds < 1) throw ConfigError("--folds must be >= 1");
  if (!t.all_folds && (t.fold < 0 || t.fold >= t.folds))
    throw ConfigError("--fold " + std::to_string(t.fold) + " must be in [0, --folds " + std::to_string(t.folds) + ")");
  torch::set_num_threads(std::max(1u, std::thread::hardware_concurrency()));

  DatasetOptions dopts;
  dopts.image_size = static_cast<int>(cfg.image_size());
  dopts.num_classes = static_cast<int>(cfg.model.num_classes());
  dopts.edge_supervision = cfg.model.toggles.edge;
  auto samples = load_dataset(t.data, dopts);

  const fs::path out = t.out;
  if (!t.all_folds) {
    auto r = train_fold(cfg, samples, {t.folds, t.fold, t.test_fraction}, out, "train");
    std::cout << "best epoch " << r.fit.best_epoch << '\n';
    if (r.val) print_summary(r.val->summary);
    return 0;
  }
  std::vector<MetricReport> fold_reports;
  for (int f = 0; f < t.folds; ++f) {
    auto r = train_fold(cfg, samples, {t.folds, f, t.test_fraction}, out / ("fold_" + std::to_string(f)), "train");
    if (r.val) fold_reports.push_back(r.val->summary);
  }
  if (!fold_reports.empty()) {
    auto mean = aggregate(fold_reports);
    write_json(out / "cv_summary.json", mean);
    std::cout << "cross-validation mean over " << fold_reports.size() << " folds\n";
    print_summary(mean);
  }
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& out_dir, int panel_rows,
             std::int64_t batch, std::string history_path) {
  TrainConfig cfg;
  auto model = load_model(fs::path(ckpt_path), &cfg);
  DatasetOptions dopts;
  dopts.image_size = static_cast<int>(cfg.image_size());
  dopts.num_classes = static_cast<int>(cfg.model.num_classes());
  dopts.edge_supervision = false;
  auto samples = load_dataset(data, dopts);
  if (samples.empty()) throw DataError("dataset is empty");

  const fs::path out = out_dir;
  fs::create_directories(out);
  RunManifest m;
  m.command = "eval";
  m.started_at = utc_timestamp();
  m.seed = cfg.seed;
  m.version = QMX_VERSION;
  m.config = {{"checkpoint", fs::absolute(ckpt_path).string()}, {"data", fs::absolute(data).string()},
              {"train_config", cfg}};

  auto preds = predict(model, samples, batch);
  write_predictions(out / "predictions", samples, preds);
  m.outputs["predictions"] = "predictions/";

  auto labelled = with_masks(samples, "evaluation");
  if (labelled.empty()) {
    std::cerr << "warning: no dense masks found; metrics skipped\n";
  } else {
    auto ev = evaluate(model, labelled, batch);
    write_metric_files(out, "report", labelled, ev);
    m.outputs["report_json"] = "report.json";
    m.outputs["report_csv"] = "report.csv";
    print_summary(ev.summary);
  }
  if (panel_rows > 0) {
    cv::imwrite((out / "panel.png").string(), render_panel(samples, preds, static_cast<std::size_t>(panel_rows)));
    m.outputs["panel"] = "panel.png";
  }
  if (history_path.empty()) {
    const auto guess = fs::path(ckpt_path).parent_path() / "history.csv";
    if (fs::exists(guess)) history_path = guess.string();
  }
  if (!history_path.empty()) {
    cv::imwrite((out / "curves.png").string(), render_curves(TrainHistory::read_csv(history_path)));
    m.outputs["curves"] = "curves.png";
  }
  m.finished_at = utc_timestamp();
  write_manifest(out, m);
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& data, const std::string& out_dir, std::int64_t batch) {
  TrainConfig cfg;
  auto model = load_model(fs::path(ckpt_path), &cfg);
  DatasetOptions dopts;
  dopts.image_size = static_cast<int>(cfg.image_size());
  dopts.num_classes = static_cast<int>(cfg.model.num_classes());
  dopts.edge_supervision = false;
  auto samples = load_dataset(data, dopts);
  write_predictions(out_dir, samples, predict(model, samples, batch));
  std::cout << "wrote " << samples.size() << " predictions to " << out_dir << '\n';
  return 0;
}

int cmd_report(const ModelOpts& mo, const std::string& ckpt, int trials, std::int64_t batch, std::uint64_t seed,
               const std::string& out_dir) {
  torch::manual_seed(effective_seed(seed));
  QMaxViTUnet model{nullptr};
  if (!ckpt.empty()) {
    model = load_model(fs::path(ckpt));
  } else {
    model = QMaxViTUnet(mo.build());
  }
  const auto& cfg = model->config();
  model->eval();
  torch::NoGradGuard guard;
  auto x = torch::rand({batch, cfg.in_channels, cfg.input_size(), cfg.input_size()});

  OpCounts counts;
  {
    CountScope scope;
    model->forward(x);
    counts = scope.counts();
  }
  std::vector<double> times;
  for (int i = 0; i < trials; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model->forward(x);
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  double mean = 0.0, var = 0.0;
  for (double t : times) mean += t;
  mean /= std::max<std::size_t>(1, times.size());
  for (double t : times) var += (t - mean) * (t - mean);
  const double sd = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) : 0.0;

  const auto params = count_parameters(*model);
  nlohmann::json j = {{"toggles", cfg.toggles},
                      {"input_size", cfg.input_size()},
                      {"batch", batch},
                      {"parameters", params},
                      {"macs", counts.total_macs()},
                      {"macs_conv", counts.conv_macs},
                      {"macs_linear", counts.linear_macs},
                      {"macs_attention", counts.attention_macs},
                      {"trials", trials},
                      {"latency_ms_mean", mean},
                      {"latency_ms_std", sd}};
  std::cout << "parameters     " << params << " (" << params / 1e6 << " M)\n"
            << "MACs/forward   " << counts.total_macs() << " (" << counts.total_macs() / 1e9 << " G) at batch " << batch
            << ", " << cfg.input_size() << "x" << cfg.input_size() << '\n'
            << "latency        " << mean << " ms +- " << sd << " over " << trials << " trials\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_json(fs::path(out_dir) / "complexity.json", j);
  }
  return 0;
}

int cmd_ablate(const TrainOpts& base, const std::string& grid, bool dry_run) {
  struct Row {
    std::string name;
    TrainConfig cfg;
  };
  std::vector<Row> rows;
  const auto cfg0 = base.build();
  if (grid == "components") {
    for (const auto& t : toggle_grid()) {
      auto c = cfg0;
      c.model.toggles = t;
      rows.push_back({t.label(), c});
    }
  } else {
    for (const auto& w : weight_grid()) {
      auto c = cfg0;
      c.loss_weights = w.weights;
      rows.push_back({w.name, c});
    }
  }
  const fs::path out = base.out;
  fs::create_directories(out);
  std::ofstream csv(out / "ablation.csv", std::ios::trunc);
  csv << "row,dual,query,edge,lambda1,lambda2,lambda3,parameters,dsc_avg,hd95_avg\n";
  csv.precision(10);

  std::vector<ImageSample> samples;
  if (!dry_run) {
    DatasetOptions dopts;
    dopts.image_size = static_cast<int>(cfg0.image_size());
    dopts.num_classes = static_cast<int>(cfg0.model.num_classes());
    samples = load_dataset(base.data, dopts);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto& t = r.cfg.model.toggles;
    const auto& w = r.cfg.loss_weights;
    double dsc = std::nan(""), hd = std::nan("");
    std::int64_t params = 0;
    if (dry_run) {
      torch::manual_seed(r.cfg.seed);
      params = count_parameters(*QMaxViTUnet(r.cfg.model));
    } else {
      auto outcome = train_fold(r.cfg, samples, {base.folds, base.fold, base.test_fraction},
                                out / ("row_" + std::to_string(i + 1)), "ablate");
      params = outcome.fit.best.parameter_count();
      const auto& ev = outcome.test ? outcome.test : outcome.val;
      if (ev) {
        dsc = ev->summary.dsc_avg;
        hd = ev->summary.hd95_avg;
      }
    }
    csv << r.name << ',' << t.dual_decoder << ',' << t.query << ',' << t.edge << ',' << w.ssl << ',' << w.psl << ','
        << w.esl << ',' << params << ',' << dsc << ',' << hd << '\n';
    std::cout << "row " << i + 1 << "  " << r.name << "  lambda=(" << w.ssl << "," << w.psl << "," << w.esl
              << ")  dsc " << dsc << "  hd95 " << hd << std::endl;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scribble-supervised MaxViT U-Net with edge and query guidance"};
  app.set_version_flag("--version", QMX_VERSION);
  app.require_subcommand(1);

  int synth_n = 200, synth_size = 64, synth_classes = 4;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic nested-shape dataset");
  synth->add_option("--n", synth_n, "Number of samples (two per patient)")->capture_default_str();
  synth->add_option("--size", synth_size, "Image side length")->capture_default_str();
  synth->add_option("--classes", synth_classes, "Classes including background (>= 2)")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Random seed (QMX_SEED overrides)")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  TrainOpts train_opts;
  auto* train = app.add_subcommand("train", "Train on a dataset directory");
  add_train_flags(train, train_opts);
  train->add_flag("--all-folds", train_opts.all_folds, "Train every fold in turn (ignores --fold)");

  std::string eval_ckpt, eval_data, eval_out, eval_history;
  int eval_panel = 4;
  std::int64_t eval_batch = 8;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint: reports, predictions, plots");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--out", eval_out, "Output directory")->required();
  eval->add_option("--panel", eval_panel, "Rows in the qualitative panel (0 = none)")->capture_default_str();
  eval->add_option("--batch", eval_batch, "Inference batch size")->capture_default_str();
  eval->add_option("--history", eval_history, "history.csv to plot (default: next to the checkpoint)");

  std::string pred_ckpt, pred_data, pred_out;
  std::int64_t pred_batch = 8;
  auto* pred = app.add_subcommand("predict", "Write label PNGs for every image of a dataset");
  pred->add_option("--checkpoint", pred_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  pred->add_option("--data", pred_data, "Dataset directory")->required();
  pred->add_option("--out", pred_out, "Output directory")->required();
  pred->add_option("--batch", pred_batch, "Inference batch size")->capture_default_str();

  ModelOpts report_model;
  std::string report_ckpt, report_out;
  int report_trials = 100;
  std::int64_t report_batch = 1;
  std::uint64_t report_seed = 0;
  auto* report = app.add_subcommand("report", "Parameter count, MACs and inference latency");
  add_model_flags(report, report_model);
  report->add_option("--checkpoint", report_ckpt, "Report on a trained checkpoint instead of a fresh model")
      ->check(CLI::ExistingFile);
  report->add_option("--trials", report_trials, "Timed forward passes")->capture_default_str();
  report->add_option("--batch", report_batch, "Batch size of the timed forward pass")->capture_default_str();
  report->add_option("--seed", report_seed, "Seed for weights and input (QMX_SEED overrides)")->capture_default_str();
  report->add_option("--out", report_out, "Write complexity.json here");

  TrainOpts ablate_opts;
  std::string ablate_grid = "components";
  bool ablate_dry = false;
  auto* ablate = app.add_subcommand("ablate", "Train every row of an ablation grid");
  add_train_flags(ablate, ablate_opts);
  ablate->add_option("--grid", ablate_grid, "components (8 dual/query/edge rows) or weights (sets #1-#4)")
      ->check(CLI::IsMember({"components", "weights"}))
      ->capture_default_str();
  ablate->add_flag("--dry-run", ablate_dry, "List the grid with parameter counts without training");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(synth_n, synth_size, synth_classes, synth_seed, synth_out);
    if (*train) return cmd_train(train_opts);
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_out, eval_panel, eval_batch, eval_history);
    if (*pred) return cmd_predict(pred_ckpt, pred_data, pred_out, pred_batch);
    if (*report) return cmd_report(report_model, report_ckpt, report_trials, report_batch, report_seed, report_out);
    if (*ablate) return cmd_ablate(ablate_opts, ablate_grid, ablate_dry);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
