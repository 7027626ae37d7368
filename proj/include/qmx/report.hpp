#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "qmx/data.hpp"
#include "qmx/metrics.hpp"
#include "qmx/training.hpp"

namespace qmx {

/// {"summary": {...}, "samples": {"<id>": {...}}}
void write_report_json(const std::filesystem::path& path, const MetricReport& summary,
                       const std::vector<std::string>& ids, const std::vector<MetricReport>& per_sample);

/// One row per sample plus a final "mean" row holding the summary.
void write_report_csv(const std::filesystem::path& path, const MetricReport& summary,
                      const std::vector<std::string>& ids, const std::vector<MetricReport>& per_sample);

/// Two-panel PNG: loss terms per epoch (left) and validation DSC (right).
cv::Mat render_curves(const TrainHistory& history);

/// One row per sample: image | scribble | prediction | dense GT (grey when
/// absent). Labels use a fixed colour palette; unlabeled scribble pixels stay dark.
cv::Mat render_panel(const std::vector<ImageSample>& samples, const std::vector<cv::Mat>& predictions,
                     std::size_t rows, int cell = 128);

cv::Vec3b class_colour(int cls);

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::string version;
  std::uint64_t seed = 0;
  std::string started_at, finished_at;  // UTC, ISO 8601
  std::map<std::string, std::string> outputs;  // artifact -> path relative to the run directory
};

void to_json(nlohmann::json& j, const RunManifest& m);
std::string utc_timestamp();

/// Writes `dir/manifest.json`, replacing any earlier manifest.
void write_manifest(const std::filesystem::path& dir, const RunManifest& m);

}  // namespace qmx
