#include "qmx/report.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>

#include <opencv2/imgproc.hpp>

#include "qmx/errors.hpp"

namespace fs = std::filesystem;

namespace qmx {
namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

void csv_row(std::ostream& os, const std::string& id, const MetricReport& r) {
  os << id;
  for (const auto& [c, v] : r.dsc) os << ',' << v;
  for (const auto& [c, v] : r.hd95) os << ',' << v;
  os << ',' << r.dsc_avg << ',' << r.hd95_avg << '\n';
}

struct Series {
  std::vector<double> values;
  cv::Scalar colour;
  std::string name;
};

void draw_plot(cv::Mat& canvas, cv::Rect area, const std::vector<Series>& series, const std::string& title) {
  const cv::Scalar axis(60, 60, 60);
  const int left = area.x + 52, right = area.x + area.width - 12;
  const int top = area.y + 30, bottom = area.y + area.height - 32;
  cv::putText(canvas, title, {area.x + 52, area.y + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1, cv::LINE_AA);

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series)
    for (double v : s.values)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        n = std::max(n, s.values.size());
      }
  cv::rectangle(canvas, {left, top}, {right, bottom}, axis, 1);
  if (n == 0) {
    cv::putText(canvas, "no data", {left + 10, (top + bottom) / 2}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1,
                cv::LINE_AA);
    return;
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  auto px = [&](std::size_t i) {
    return left + static_cast<int>(std::lround(n > 1 ? double(i) / double(n - 1) * (right - left) : 0.5 * (right - left)));
  };
  auto py = [&](double v) { return bottom - static_cast<int>(std::lround((v - lo) / (hi - lo) * (bottom - top))); };

  char buf[32];
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    cv::putText(canvas, buf, {area.x + 4, py(v) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.35, axis, 1, cv::LINE_AA);
    cv::line(canvas, {left, py(v)}, {right, py(v)}, cv::Scalar(225, 225, 225), 1);
  }
  std::snprintf(buf, sizeof(buf), "epoch 1..%zu", n);
  cv::putText(canvas, buf, {left, bottom + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.4, axis, 1, cv::LINE_AA);

  int legend_y = top + 14;
  for (const auto& s : series) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < s.values.size(); ++i)
      if (std::isfinite(s.values[i])) pts.emplace_back(px(i), py(s.values[i]));
    if (pts.empty()) continue;
    if (pts.size() == 1) cv::circle(canvas, pts[0], 2, s.colour, cv::FILLED);
    cv::polylines(canvas, pts, false, s.colour, 2, cv::LINE_AA);
    cv::putText(canvas, s.name, {right - 90, legend_y}, cv::FONT_HERSHEY_SIMPLEX, 0.4, s.colour, 1, cv::LINE_AA);
    legend_y += 16;
  }
}

cv::Mat grey_cell(const cv::Mat& image, int cell) {
  cv::Mat u8, bgr, out;
  image.convertTo(u8, CV_8U, 255.0);
  if (u8.channels() == 1)
    cv::cvtColor(u8, bgr, cv::COLOR_GRAY2BGR);
  else
    bgr = u8;
  cv::resize(bgr, out, {cell, cell}, 0, 0, cv::INTER_NEAREST);
  return out;
}

cv::Mat label_cell(const cv::Mat& labels, int unknown_code, int cell) {
  cv::Mat bgr(labels.size(), CV_8UC3, cv::Scalar(20, 20, 20));
  for (int y = 0; y < labels.rows; ++y)
    for (int x = 0; x < labels.cols; ++x) {
      const int v = labels.at<std::int32_t>(y, x);
      if (v != unknown_code) bgr.at<cv::Vec3b>(y, x) = class_colour(v);
    }
  cv::Mat out;
  cv::resize(bgr, out, {cell, cell}, 0, 0, cv::INTER_NEAREST);
  return out;
}

}  // namespace

cv::Vec3b class_colour(int cls) {
  static const cv::Vec3b palette[] = {{0, 0, 0},       {60, 60, 230},  {60, 200, 60},  {230, 150, 40},
                                      {200, 60, 200},  {40, 220, 230}, {230, 230, 60}, {128, 128, 255}};
  if (cls < 0) return {128, 128, 128};
  return palette[cls % 8];
}

void write_report_json(const fs::path& path, const MetricReport& summary, const std::vector<std::string>& ids,
                       const std::vector<MetricReport>& per_sample) {
  if (ids.size() != per_sample.size()) throw ConfigError("ids and per-sample reports differ in length");
  nlohmann::json samples = nlohmann::json::object();
  for (std::size_t i = 0; i < ids.size(); ++i) samples[ids[i]] = per_sample[i];
  auto os = open_out(path);
  os << nlohmann::json{{"summary", summary}, {"samples", samples}}.dump(2) << '\n';
}

void write_report_csv(const fs::path& path, const MetricReport& summary, const std::vector<std::string>& ids,
                      const std::vector<MetricReport>& per_sample) {
  if (ids.size() != per_sample.size()) throw ConfigError("ids and per-sample reports differ in length");
  auto os = open_out(path);
  os.precision(10);
  os << "id";
  for (const auto& [c, v] : summary.dsc) os << ",dsc.class_" << c;
  for (const auto& [c, v] : summary.hd95) os << ",hd95.class_" << c;
  os << ",dsc.avg,hd95.avg\n";
  for (std::size_t i = 0; i < ids.size(); ++i) csv_row(os, ids[i], per_sample[i]);
  csv_row(os, "mean", summary);
}

cv::Mat render_curves(const TrainHistory& history) {
  cv::Mat canvas(360, 960, CV_8UC3, cv::Scalar(255, 255, 255));
  Series total{{}, {30, 30, 30}, "total"}, ssl{{}, {200, 90, 30}, "ssl"}, psl{{}, {40, 160, 40}, "psl"},
      esl{{}, {40, 40, 200}, "esl"}, dsc{{}, {160, 60, 160}, "val dsc"};
  for (const auto& e : history.epochs) {
    total.values.push_back(e.loss_total);
    ssl.values.push_back(e.loss_ssl);
    psl.values.push_back(e.loss_psl);
    esl.values.push_back(e.loss_esl);
    dsc.values.push_back(e.val_dsc);
  }
  draw_plot(canvas, {0, 0, 480, 360}, {total, ssl, psl, esl}, "training loss");
  draw_plot(canvas, {480, 0, 480, 360}, {dsc}, "validation DSC");
  return canvas;
}

cv::Mat render_panel(const std::vector<ImageSample>& samples, const std::vector<cv::Mat>& predictions,
                     std::size_t rows, int cell) {
  if (predictions.size() != samples.size()) throw ConfigError("one prediction per sample required");
  rows = std::min(rows, samples.size());
  if (rows == 0) throw ConfigError("panel needs at least one row");
  const int header = 24;
  cv::Mat canvas(header + static_cast<int>(rows) * cell, 4 * cell, CV_8UC3, cv::Scalar(255, 255, 255));
  const char* titles[] = {"image", "scribble", "prediction", "ground truth"};
  for (int c = 0; c < 4; ++c)
    cv::putText(canvas, titles[c], {c * cell + 6, 17}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(40, 40, 40), 1,
                cv::LINE_AA);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto& s = samples[r];
    const int y = header + static_cast<int>(r) * cell;
    grey_cell(s.image, cell).copyTo(canvas(cv::Rect(0, y, cell, cell)));
    label_cell(s.scribble, s.unknown_code, cell).copyTo(canvas(cv::Rect(cell, y, cell, cell)));
    label_cell(predictions[r], -1, cell).copyTo(canvas(cv::Rect(2 * cell, y, cell, cell)));
    if (s.dense_gt.empty())
      canvas(cv::Rect(3 * cell, y, cell, cell)).setTo(cv::Scalar(128, 128, 128));
    else
      label_cell(s.dense_gt, -1, cell).copyTo(canvas(cv::Rect(3 * cell, y, cell, cell)));
  }
  return canvas;
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  j = {{"command", m.command},   {"config", m.config},           {"version", m.version},
       {"seed", m.seed},         {"started_at", m.started_at},   {"finished_at", m.finished_at},
       {"outputs", m.outputs}};
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
  fs::create_directories(dir);
  auto os = open_out(dir / "manifest.json");
  os << nlohmann::json(m).dump(2) << '\n';
}

}  // namespace qmx
