#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "qmx/metrics.hpp"

namespace qmx {

/// Unlabeled code used in 8-bit scribble files on disk. In memory the
/// unknown code is `num_classes`.
constexpr int kUnlabeledOnDisk = 255;

/// One training / evaluation record. Images are float32 in [0, 1]
/// (CV_32FC1 or CV_32FC3); label maps are CV_32SC1.
struct ImageSample {
  std::string id;
  std::string patient;
  cv::Mat image;
  cv::Mat scribble;  // class ids, or `unknown_code` for unlabeled pixels
  cv::Mat edge_gt;   // CV_32FC1 in [0, 1]
  cv::Mat dense_gt;  // optional (empty when absent), evaluation only
  Spacing spacing;
  int unknown_code = 4;

  int size() const { return image.rows; }
  LabelView dense_view() const;
};

struct DatasetOptions {
  int image_size = 64;   // samples are resized to image_size x image_size
  int num_classes = 4;
  bool edge_supervision = true;  // synthesize missing edge maps when set
};

/// Loads `root/{images,scribbles,edges,masks}/<id>.png` driven by
/// `root/meta.csv` (id,patient,spacing_y,spacing_x). Throws DataError for a
/// missing scribble, image/scribble size mismatch or out-of-range class id.
std::vector<ImageSample> load_dataset(const std::filesystem::path& root, const DatasetOptions& opts);

/// Writes the same layout (masks only for samples that carry dense_gt).
void save_dataset(const std::filesystem::path& root, const std::vector<ImageSample>& samples);

/// Sparse scribbles from a dense label map: for every class (background
/// included) the skeletons of its (up to) two largest 8-connected components,
/// with spurs shorter than 5 px pruned. Everything else is `num_classes`.
cv::Mat synth_scribble(const cv::Mat& dense, int num_classes);

/// Thin a binary mask to a one-pixel skeleton and prune short side branches.
cv::Mat skeletonize(const cv::Mat& mask, int min_spur_length = 5);

/// Sobel gradient magnitude of the channel mean, divided by its maximum.
cv::Mat synth_edge(const cv::Mat& image);

struct AugmentParams {
  int quarter_turns = 0;  // counter-clockwise
  bool flip_horizontal = false;
  bool flip_vertical = false;
};

AugmentParams draw_augment(std::mt19937_64& rng);
ImageSample apply_augment(const ImageSample& sample, const AugmentParams& p);
ImageSample augment(const ImageSample& sample, std::mt19937_64& rng);

/// Seed for per-sample augmentation so results do not depend on iteration
/// order or worker scheduling.
std::uint64_t sample_seed(std::uint64_t run_seed, std::int64_t epoch, const std::string& sample_id);

/// Synthetic nested-shape dataset: per sample an outer ring / disk structure
/// (one region per foreground class) plus a side lobe, with noise, blur,
/// dense labels, derived scribbles and edge maps. Two slices per patient.
std::vector<ImageSample> synth_shapes_dataset(int n, int size, int num_classes, std::uint64_t seed);

struct SplitSpec {
  int fold_count = 5;
  int fold_index = 0;
  double test_fraction = 0.0;  // patients held out before the folds are cut
};

struct Splits {
  std::vector<ImageSample> train, val, test;
};

/// Patient-level k-fold split. Patients are shuffled once with `seed`;
/// the first round(test_fraction * P) go to test, the rest are cut into
/// `fold_count` contiguous folds and fold `fold_index` becomes validation.
/// fold_count = 1 leaves the validation split empty.
Splits make_splits(const std::vector<ImageSample>& samples, const SplitSpec& spec, std::uint64_t seed);

// Conversion helpers shared by the trainer and the CLI.
cv::Mat labels_to_u8(const cv::Mat& labels, int unknown_code);
cv::Mat resize_labels(const cv::Mat& labels, int size);

}  // namespace qmx
