#include "qmx/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/ximgproc.hpp>

#include "qmx/errors.hpp"

namespace fs = std::filesystem;

namespace qmx {
namespace {

constexpr int kDx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
constexpr int kDy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};

int skeleton_neighbours(const cv::Mat& sk, int y, int x) {
  int n = 0;
  for (int k = 0; k < 8; ++k) {
    const int yy = y + kDy[k], xx = x + kDx[k];
    if (yy >= 0 && xx >= 0 && yy < sk.rows && xx < sk.cols && sk.at<std::uint8_t>(yy, xx)) ++n;
  }
  return n;
}

// Number of separate runs of set pixels around (y, x), walking the ring.
int neighbour_runs(const cv::Mat& sk, int y, int x) {
  static constexpr int ring_dx[8] = {0, 1, 1, 1, 0, -1, -1, -1};
  static constexpr int ring_dy[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
  auto set = [&](int k) {
    const int yy = y + ring_dy[k], xx = x + ring_dx[k];
    return yy >= 0 && xx >= 0 && yy < sk.rows && xx < sk.cols && sk.at<std::uint8_t>(yy, xx) != 0;
  };
  int runs = 0;
  for (int k = 0; k < 8; ++k) runs += !set(k) && set((k + 1) % 8);
  return runs;
}

// Removes side branches shorter than `min_len` that end in a free endpoint.
// Returns true when something was removed.
bool prune_spurs_once(cv::Mat& sk, int min_len) {
  bool changed = false;
  for (int y = 0; y < sk.rows; ++y)
    for (int x = 0; x < sk.cols; ++x) {
      if (!sk.at<std::uint8_t>(y, x) || skeleton_neighbours(sk, y, x) != 1) continue;
      std::vector<cv::Point> path{{x, y}};
      cv::Point prev{-1, -1}, cur{x, y};
      bool hit_branch = false;
      cv::Point junction{-1, -1};
      while (static_cast<int>(path.size()) <= min_len) {
        cv::Point next{-1, -1};
        for (int k = 0; k < 8; ++k) {
          const cv::Point p{cur.x + kDx[k], cur.y + kDy[k]};
          if (p.x < 0 || p.y < 0 || p.x >= sk.cols || p.y >= sk.rows || p == prev) continue;
          if (!sk.at<std::uint8_t>(p) || std::find(path.begin(), path.end(), p) != path.end()) continue;
          next = p;
          break;
        }
        if (next.x < 0) break;
        if (skeleton_neighbours(sk, next.y, next.x) >= 3) {
          hit_branch = true;
          junction = next;
          break;
        }
        prev = cur;
        cur = next;
        path.push_back(cur);
      }
      if (hit_branch && static_cast<int>(path.size()) < min_len) {
        for (const auto& p : path) sk.at<std::uint8_t>(p) = 0;
        // A pixel touching the main line diagonally is left dangling.
        if (skeleton_neighbours(sk, junction.y, junction.x) >= 2 && neighbour_runs(sk, junction.y, junction.x) == 1)
          sk.at<std::uint8_t>(junction) = 0;
        changed = true;
      }
    }
  return changed;
}

cv::Mat to_float_image(const cv::Mat& raw, int channels) {
  cv::Mat img = raw;
  if (img.channels() == 4) cv::cvtColor(img, img, cv::COLOR_BGRA2BGR);
  if (channels == 1 && img.channels() == 3) cv::cvtColor(img, img, cv::COLOR_BGR2GRAY);
  if (channels == 3 && img.channels() == 1) cv::cvtColor(img, img, cv::COLOR_GRAY2BGR);
  cv::Mat f;
  const double scale = img.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  img.convertTo(f, CV_32F, scale);
  return f;
}

cv::Mat read_png(const fs::path& p, int flags) {
  cv::Mat m = cv::imread(p.string(), flags);
  if (m.empty()) throw DataError("cannot read image " + p.string());
  return m;
}

void write_png(const fs::path& p, const cv::Mat& m) {
  if (!cv::imwrite(p.string(), m)) throw DataError("cannot write " + p.string());
}

cv::Mat float_to_u8(const cv::Mat& f) {
  cv::Mat out;
  f.convertTo(out, CV_8U, 255.0);
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    cells.push_back(cell);
  }
  return cells;
}

}  // namespace

LabelView ImageSample::dense_view() const {
  CV_Assert(dense_gt.type() == CV_32SC1 && dense_gt.isContinuous());
  return {{dense_gt.ptr<std::int32_t>(), dense_gt.total()}, dense_gt.rows, dense_gt.cols};
}

cv::Mat labels_to_u8(const cv::Mat& labels, int unknown_code) {
  cv::Mat out(labels.size(), CV_8U);
  for (int y = 0; y < labels.rows; ++y)
    for (int x = 0; x < labels.cols; ++x) {
      const int v = labels.at<std::int32_t>(y, x);
      out.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(v == unknown_code ? kUnlabeledOnDisk : v);
    }
  return out;
}

cv::Mat resize_labels(const cv::Mat& labels, int size) {
  if (labels.rows == size && labels.cols == size) return labels.clone();
  cv::Mat out;
  cv::resize(labels, out, cv::Size(size, size), 0, 0, cv::INTER_NEAREST);
  return out;
}

// ---------------------------------------------------------------------------

cv::Mat skeletonize(const cv::Mat& mask, int min_spur_length) {
  cv::Mat padded;
  cv::copyMakeBorder(mask, padded, 1, 1, 1, 1, cv::BORDER_CONSTANT, 0);
  padded.setTo(255, padded > 0);
  cv::Mat thin;
  cv::ximgproc::thinning(padded, thin, cv::ximgproc::THINNING_ZHANGSUEN);
  cv::Mat sk = thin(cv::Rect(1, 1, mask.cols, mask.rows)).clone();
  sk.setTo(1, sk > 0);
  for (int pass = 0; pass < 3 && prune_spurs_once(sk, min_spur_length); ++pass) {
  }
  return sk;
}

cv::Mat synth_scribble(const cv::Mat& dense, int num_classes) {
  CV_Assert(dense.type() == CV_32SC1);
  cv::Mat scribble(dense.size(), CV_32SC1, cv::Scalar(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    cv::Mat mask = dense == c;
    if (cv::countNonZero(mask) == 0) continue;
    cv::Mat comp, stats, centroids;
    const int n = cv::connectedComponentsWithStats(mask, comp, stats, centroids, 8, CV_32S);
    std::vector<int> order(n - 1);
    std::iota(order.begin(), order.end(), 1);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return stats.at<int>(a, cv::CC_STAT_AREA) > stats.at<int>(b, cv::CC_STAT_AREA);
    });
    for (std::size_t i = 0; i < std::min<std::size_t>(2, order.size()); ++i) {
      cv::Mat part = comp == order[i];
      cv::Mat sk = skeletonize(part);
      if (cv::countNonZero(sk) == 0) {
        // Degenerate component: keep its most interior pixel.
        cv::Mat dist;
        cv::distanceTransform(part, dist, cv::DIST_L2, 3);
        cv::Point best;
        cv::minMaxLoc(dist, nullptr, nullptr, nullptr, &best);
        sk.at<std::uint8_t>(best) = 1;
      }
      scribble.setTo(c, sk > 0);
    }
  }
  return scribble;
}

cv::Mat synth_edge(const cv::Mat& image) {
  cv::Mat gray;
  if (image.channels() == 1) {
    gray = image;
  } else {
    cv::Mat avg;
    cv::transform(image, avg, cv::Matx<float, 1, 3>(1.f / 3, 1.f / 3, 1.f / 3));
    gray = avg;
  }
  cv::Mat gx, gy, mag;
  cv::Sobel(gray, gx, CV_32F, 1, 0, 3, 1.0, 0.0, cv::BORDER_REPLICATE);
  cv::Sobel(gray, gy, CV_32F, 0, 1, 3, 1.0, 0.0, cv::BORDER_REPLICATE);
  cv::magnitude(gx, gy, mag);
  double max_v = 0.0;
  cv::minMaxLoc(mag, nullptr, &max_v);
  if (max_v <= 0.0) return cv::Mat::zeros(image.size(), CV_32FC1);
  return mag / max_v;
}

// ---------------------------------------------------------------------------

AugmentParams draw_augment(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> turns(0, 3), coin(0, 1);
  AugmentParams p;
  p.quarter_turns = turns(rng);
  p.flip_horizontal = coin(rng) == 1;
  p.flip_vertical = coin(rng) == 1;
  return p;
}

ImageSample apply_augment(const ImageSample& s, const AugmentParams& p) {
  if (s.image.rows != s.image.cols) throw ShapeError("augmentation expects square samples");
  auto tf = [&](const cv::Mat& m) {
    if (m.empty()) return cv::Mat();
    cv::Mat out = m.clone();
    for (int k = 0; k < (p.quarter_turns % 4 + 4) % 4; ++k) cv::rotate(out, out, cv::ROTATE_90_COUNTERCLOCKWISE);
    if (p.flip_horizontal) cv::flip(out, out, 1);
    if (p.flip_vertical) cv::flip(out, out, 0);
    return out;
  };
  ImageSample out = s;
  out.image = tf(s.image);
  out.scribble = tf(s.scribble);
  out.edge_gt = tf(s.edge_gt);
  out.dense_gt = tf(s.dense_gt);
  if (p.quarter_turns % 2 != 0) std::swap(out.spacing.y, out.spacing.x);
  return out;
}

ImageSample augment(const ImageSample& sample, std::mt19937_64& rng) { return apply_augment(sample, draw_augment(rng)); }

std::uint64_t sample_seed(std::uint64_t run_seed, std::int64_t epoch, const std::string& sample_id) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : sample_id) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(run_seed), static_cast<std::uint32_t>(run_seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  std::uint64_t out[1];
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  out[0] = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out[0];
}

// ---------------------------------------------------------------------------

std::vector<ImageSample> synth_shapes_dataset(int n, int size, int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("synthetic data needs at least two classes");
  if (size < 32) throw ConfigError("synthetic image size must be >= 32");
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const double s = size;
  const double min_area = 0.02 * s * s;

  std::vector<ImageSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    cv::Mat labels;
    std::vector<double> intensity(num_classes);
    for (int attempt = 0;; ++attempt) {
      labels = cv::Mat::zeros(size, size, CV_8U);
      const cv::Point2d c{s / 2 + uni(-0.06, 0.06) * s, s / 2 + uni(-0.06, 0.06) * s};
      const double radius = uni(0.18, 0.22) * s;
      const double aspect = uni(0.85, 1.15);
      const double angle = uni(0.0, 180.0);
      const int nested = num_classes >= 3 ? num_classes - 2 : 1;
      const int first_nested = num_classes >= 3 ? 2 : 1;

      if (num_classes >= 3) {
        // Side lobe beside the nested structure, separated by a thin
        // background gap; its long axis runs tangentially.
        const double dir = uni(0.0, 2.0 * M_PI);
        const double half_long = uni(0.14, 0.19) * s, half_short = uni(0.07, 0.1) * s;
        const double off = radius * std::max(aspect, 1.0 / aspect) + uni(0.04, 0.07) * s + half_short;
        const cv::Point2d lc{c.x + off * std::cos(dir), c.y + off * std::sin(dir)};
        cv::ellipse(labels, cv::Point(cvRound(lc.x), cvRound(lc.y)), cv::Size(cvRound(half_long), cvRound(half_short)),
                    dir * 180.0 / M_PI + 90.0, 0, 360, cv::Scalar(1), cv::FILLED, cv::LINE_8);
      }
      for (int j = 0; j < nested; ++j) {
        const double r = radius * (1.0 - 0.75 * j / nested) * (j == 0 ? 1.0 : uni(0.9, 1.0));
        const cv::Size axes(cvRound(r * aspect), cvRound(r / aspect));
        cv::ellipse(labels, cv::Point(cvRound(c.x), cvRound(c.y)), axes, angle, 0, 360, cv::Scalar(first_nested + j),
                    cv::FILLED, cv::LINE_8);
      }

      bool ok = true;
      for (int k = 0; k < num_classes; ++k) ok = ok && cv::countNonZero(labels == k) >= min_area;
      if (ok || attempt >= 200) break;
    }

    intensity[0] = uni(0.05, 0.15);
    for (int k = 1; k < num_classes; ++k) {
      const bool innermost = k == num_classes - 1;
      const bool lobe = num_classes >= 3 && k == 1;
      intensity[k] = lobe ? uni(0.6, 0.72) : innermost ? uni(0.8, 0.92) : uni(0.3, 0.42);
    }

    cv::Mat img(size, size, CV_32FC1);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) img.at<float>(y, x) = static_cast<float>(intensity[labels.at<std::uint8_t>(y, x)]);
    // Background body silhouette: texture that is not a class.
    cv::Mat body = cv::Mat::zeros(size, size, CV_32FC1);
    cv::ellipse(body, cv::Point(size / 2, size / 2), cv::Size(cvRound(0.45 * s), cvRound(0.4 * s)), uni(0, 180), 0, 360,
                cv::Scalar(uni(0.08, 0.15)), cv::FILLED);
    cv::Mat bg;
    cv::Mat(labels == 0).convertTo(bg, CV_32F, 1.0 / 255.0);
    img += body.mul(bg);
    cv::Mat noise(size, size, CV_32FC1);
    std::normal_distribution<float> gauss(0.f, 0.04f);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) noise.at<float>(y, x) = gauss(rng);
    img += noise;
    cv::GaussianBlur(img, img, cv::Size(3, 3), 0.8);
    cv::min(cv::max(img, 0.0), 1.0, img);

    ImageSample smp;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "case_%05d", i);
    smp.id = buf;
    std::snprintf(buf, sizeof(buf), "P%04d", i / 2);
    smp.patient = buf;
    smp.image = img;
    labels.convertTo(smp.dense_gt, CV_32S);
    smp.scribble = synth_scribble(smp.dense_gt, num_classes);
    smp.edge_gt = synth_edge(img);
    smp.unknown_code = num_classes;
    out.push_back(std::move(smp));
  }
  return out;
}

Splits make_splits(const std::vector<ImageSample>& samples, const SplitSpec& spec, std::uint64_t seed) {
  if (spec.fold_count < 1) throw ConfigError("fold_count must be >= 1");
  if (spec.fold_index < 0 || spec.fold_index >= spec.fold_count)
    throw ConfigError("fold index " + std::to_string(spec.fold_index) + " outside [0, " +
                      std::to_string(spec.fold_count) + ")");
  if (spec.test_fraction < 0.0 || spec.test_fraction >= 1.0) throw ConfigError("test_fraction must be in [0, 1)");

  std::set<std::string> unique;
  for (const auto& s : samples) unique.insert(s.patient);
  std::vector<std::string> patients(unique.begin(), unique.end());
  std::mt19937_64 rng(seed);
  std::shuffle(patients.begin(), patients.end(), rng);

  const auto n_test = static_cast<std::size_t>(std::lround(spec.test_fraction * static_cast<double>(patients.size())));
  const auto remaining = patients.size() - n_test;
  if (static_cast<std::size_t>(spec.fold_count) > remaining)
    throw ConfigError("fold_count " + std::to_string(spec.fold_count) + " exceeds the " + std::to_string(remaining) +
                      " available patients");

  std::map<std::string, int> role;  // 0 train, 1 val, 2 test
  for (std::size_t i = 0; i < n_test; ++i) role[patients[i]] = 2;
  // A single fold means no validation split.
  const auto lo = spec.fold_count == 1 ? patients.size() : n_test + remaining * spec.fold_index / spec.fold_count;
  const auto hi = spec.fold_count == 1 ? patients.size() : n_test + remaining * (spec.fold_index + 1) / spec.fold_count;
  for (std::size_t i = n_test; i < patients.size(); ++i) role[patients[i]] = (i >= lo && i < hi) ? 1 : 0;

  Splits out;
  for (const auto& s : samples) {
    switch (role[s.patient]) {
      case 0: out.train.push_back(s); break;
      case 1: out.val.push_back(s); break;
      default: out.test.push_back(s); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<ImageSample> load_dataset(const fs::path& root, const DatasetOptions& opts) {
  const auto meta_path = root / "meta.csv";
  std::ifstream meta(meta_path);
  if (!meta) throw DataError("missing " + meta_path.string());
  std::string line;
  std::getline(meta, line);
  const auto header = split_csv_line(line);
  if (header != std::vector<std::string>{"id", "patient", "spacing_y", "spacing_x"})
    throw DataError("meta.csv header must be id,patient,spacing_y,spacing_x");

  std::vector<ImageSample> out;
  while (std::getline(meta, line)) {
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 4) throw DataError("malformed meta.csv row: " + line);
    ImageSample s;
    s.id = cells[0];
    s.patient = cells[1];
    s.spacing = {std::stod(cells[2]), std::stod(cells[3])};
    s.unknown_code = opts.num_classes;

    const auto file = s.id + ".png";
    cv::Mat raw = read_png(root / "images" / file, cv::IMREAD_UNCHANGED);
    const auto scribble_path = root / "scribbles" / file;
    if (!fs::exists(scribble_path)) throw DataError("missing scribble for " + s.id);
    cv::Mat scribble = read_png(scribble_path, cv::IMREAD_GRAYSCALE);
    if (scribble.size() != raw.size()) throw DataError("image/scribble size mismatch for " + s.id);

    const double sy = static_cast<double>(raw.rows) / opts.image_size;
    const double sx = static_cast<double>(raw.cols) / opts.image_size;
    cv::Mat img = to_float_image(raw, 1);
    if (img.rows != opts.image_size || img.cols != opts.image_size)
      cv::resize(img, img, cv::Size(opts.image_size, opts.image_size), 0, 0,
                 img.rows > opts.image_size ? cv::INTER_AREA : cv::INTER_LINEAR);
    s.image = img;
    s.spacing = {s.spacing.y * sy, s.spacing.x * sx};

    cv::Mat sc;
    scribble.convertTo(sc, CV_32S);
    for (int y = 0; y < sc.rows; ++y)
      for (int x = 0; x < sc.cols; ++x) {
        int& v = sc.at<std::int32_t>(y, x);
        if (v == kUnlabeledOnDisk) {
          v = opts.num_classes;
        } else if (v >= opts.num_classes) {
          throw DataError("scribble for " + s.id + " contains class id " + std::to_string(v) + " but num_classes is " +
                          std::to_string(opts.num_classes));
        }
      }
    s.scribble = resize_labels(sc, opts.image_size);

    const auto edge_path = root / "edges" / file;
    if (fs::exists(edge_path)) {
      s.edge_gt = to_float_image(read_png(edge_path, cv::IMREAD_GRAYSCALE), 1);
      if (s.edge_gt.rows != opts.image_size || s.edge_gt.cols != opts.image_size)
        cv::resize(s.edge_gt, s.edge_gt, cv::Size(opts.image_size, opts.image_size), 0, 0, cv::INTER_LINEAR);
    } else if (opts.edge_supervision) {
      std::cerr << "warning: no edge map for " << s.id << ", using Sobel edges\n";
      s.edge_gt = synth_edge(s.image);
    } else {
      s.edge_gt = cv::Mat::zeros(opts.image_size, opts.image_size, CV_32FC1);
    }

    const auto mask_path = root / "masks" / file;
    if (fs::exists(mask_path)) {
      cv::Mat m;
      read_png(mask_path, cv::IMREAD_GRAYSCALE).convertTo(m, CV_32S);
      double max_v = 0.0;
      cv::minMaxLoc(m, nullptr, &max_v);
      if (max_v >= opts.num_classes) throw DataError("mask for " + s.id + " has class ids >= num_classes");
      s.dense_gt = resize_labels(m, opts.image_size);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const fs::path& root, const std::vector<ImageSample>& samples) {
  for (const char* sub : {"images", "scribbles", "edges", "masks"}) fs::create_directories(root / sub);
  std::ofstream meta(root / "meta.csv", std::ios::trunc);
  if (!meta) throw DataError("cannot write " + (root / "meta.csv").string());
  meta << "id,patient,spacing_y,spacing_x\n";
  for (const auto& s : samples) {
    const auto file = s.id + ".png";
    write_png(root / "images" / file, float_to_u8(s.image));
    write_png(root / "scribbles" / file, labels_to_u8(s.scribble, s.unknown_code));
    write_png(root / "edges" / file, float_to_u8(s.edge_gt));
    if (!s.dense_gt.empty()) {
      cv::Mat m;
      s.dense_gt.convertTo(m, CV_8U);
      write_png(root / "masks" / file, m);
    }
    meta << s.id << ',' << s.patient << ',' << s.spacing.y << ',' << s.spacing.x << '\n';
  }
}

}  // namespace qmx
