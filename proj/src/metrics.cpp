#include "qmx/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "qmx/errors.hpp"

namespace qmx {
namespace {

void require_same_grid(const LabelView& a, const LabelView& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("label maps must share one grid");
  if (static_cast<std::int64_t>(a.labels.size()) != a.height * a.width ||
      static_cast<std::int64_t>(b.labels.size()) != b.height * b.width)
    throw ShapeError("label map size does not match its dimensions");
}

using Points = std::vector<std::pair<std::int64_t, std::int64_t>>;

// For every point of `from`, the distance to the nearest point of `to`.
std::vector<double> nearest_distances(const Points& from, const Points& to, Spacing s) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& [fy, fx] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [ty, tx] : to) {
      const double dy = static_cast<double>(fy - ty) * s.y;
      const double dx = static_cast<double>(fx - tx) * s.x;
      best = std::min(best, dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const MetricReport& r) {
  j = nlohmann::json::object();
  for (const auto& [c, v] : r.dsc) j["dsc.class_" + std::to_string(c)] = v;
  for (const auto& [c, v] : r.hd95) j["hd95.class_" + std::to_string(c)] = v;
  j["dsc.avg"] = r.dsc_avg;
  j["hd95.avg"] = r.hd95_avg;
}

double dsc(const LabelView& pred, const LabelView& gt, int cls) {
  require_same_grid(pred, gt);
  std::int64_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool in_a = pred.labels[i] == cls, in_b = gt.labels[i] == cls;
    a += in_a;
    b += in_b;
    both += in_a && in_b;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

Points boundary_pixels(const LabelView& m, int cls) {
  Points pts;
  auto inside = [&](std::int64_t y, std::int64_t x) {
    return y >= 0 && x >= 0 && y < m.height && x < m.width && m.at(y, x) == cls;
  };
  for (std::int64_t y = 0; y < m.height; ++y)
    for (std::int64_t x = 0; x < m.width; ++x)
      if (inside(y, x) && (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1)))
        pts.emplace_back(y, x);
  return pts;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

double hd95(const LabelView& pred, const LabelView& gt, int cls, Spacing spacing) {
  require_same_grid(pred, gt);
  if (!(spacing.y > 0.0) || !(spacing.x > 0.0)) throw ConfigError("pixel spacing must be positive");
  const auto a = boundary_pixels(pred, cls);
  const auto b = boundary_pixels(gt, cls);
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty())
    return std::hypot(static_cast<double>(pred.height) * spacing.y, static_cast<double>(pred.width) * spacing.x);
  return std::max(percentile(nearest_distances(a, b, spacing), 95.0),
                  percentile(nearest_distances(b, a, spacing), 95.0));
}

MetricReport evaluate_labels(const LabelView& pred, const LabelView& gt, int num_classes, Spacing spacing) {
  if (num_classes < 2) throw ConfigError("need at least two classes");
  MetricReport r;
  for (int c = 1; c < num_classes; ++c) {
    r.dsc[c] = dsc(pred, gt, c);
    r.hd95[c] = hd95(pred, gt, c, spacing);
    r.dsc_avg += r.dsc[c];
    r.hd95_avg += r.hd95[c];
  }
  r.dsc_avg /= num_classes - 1;
  r.hd95_avg /= num_classes - 1;
  return r;
}

MetricReport aggregate(std::span<const MetricReport> reports) {
  if (reports.empty()) throw ConfigError("cannot aggregate an empty list of reports");
  MetricReport out;
  const double n = static_cast<double>(reports.size());
  for (const auto& r : reports) {
    if (r.dsc.size() != reports.front().dsc.size()) throw ConfigError("reports cover different classes");
    for (const auto& [c, v] : r.dsc) out.dsc[c] += v;
    for (const auto& [c, v] : r.hd95) out.hd95[c] += v;
    out.dsc_avg += r.dsc_avg;
    out.hd95_avg += r.hd95_avg;
  }
  for (auto& [c, v] : out.dsc) v /= n;
  for (auto& [c, v] : out.hd95) v /= n;
  out.dsc_avg /= n;
  out.hd95_avg /= n;
  return out;
}

}  // namespace qmx
