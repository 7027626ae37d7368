#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

namespace qmx {

/// Read-only view of a row-major H x W label map.
struct LabelView {
  std::span<const std::int32_t> labels;
  std::int64_t height = 0;
  std::int64_t width = 0;

  std::int32_t at(std::int64_t y, std::int64_t x) const { return labels[y * width + x]; }
};

/// Physical pixel size in mm, (row, column).
struct Spacing {
  double y = 1.0;
  double x = 1.0;
};

struct MetricReport {
  std::map<int, double> dsc;   // foreground class -> Dice in [0, 1]
  std::map<int, double> hd95;  // foreground class -> HD95 in mm
  double dsc_avg = 0.0;
  double hd95_avg = 0.0;
};

void to_json(nlohmann::json& j, const MetricReport& r);

/// 2|A n B| / (|A| + |B|) for A = (pred == cls), B = (gt == cls); 1 if both
/// are empty.
double dsc(const LabelView& pred, const LabelView& gt, int cls);

/// Boundary pixels of (labels == cls): mask pixels with at least one
/// 4-neighbour outside the mask (image border counts as outside). Returned as
/// (row, col) pairs in raster order.
std::vector<std::pair<std::int64_t, std::int64_t>> boundary_pixels(const LabelView& labels, int cls);

/// Linear-interpolated percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

/// Max of the two directed 95th percentiles of boundary-to-boundary nearest
/// distances in mm. Both masks empty -> 0; one empty -> image diagonal in mm.
double hd95(const LabelView& pred, const LabelView& gt, int cls, Spacing spacing = {});

/// Per-class DSC and HD95 for classes 1..num_classes-1 plus their averages.
MetricReport evaluate_labels(const LabelView& pred, const LabelView& gt, int num_classes, Spacing spacing = {});

/// Arithmetic mean of per-class values and of the averages.
MetricReport aggregate(std::span<const MetricReport> reports);

}  // namespace qmx
