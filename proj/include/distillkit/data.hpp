#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "distillkit/acf.hpp"
#include "distillkit/ppm.hpp"
#include "distillkit/rng.hpp"
#include "distillkit/tensor.hpp"

namespace dk {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct LabeledPatch {
  int image_id = 0;
  int patch_id = 0;
  int label = 0;  // 1 = pedestrian silhouette, 0 = background
  RgbPatch rgb;
  std::optional<AcfPatch> acf;  // cached channels; dropped on any pixel change
};

struct Dataset {
  Split split = Split::train;
  std::vector<LabeledPatch> patches;
  int num_images = 0;

  void finalize() {
    int max_img = -1;
    for (const auto& p : patches) max_img = std::max(max_img, p.image_id);
    num_images = max_img + 1;
  }
};

/// Input encoding for raw RGB: (byte/255 - 0.5) / 0.5, shape [3, rows, cols].
inline Tensor<float> encode_rgb_input(const RgbPatch& p) {
  Tensor<float> t({3, p.rows, p.cols});
  long hw = long(p.rows) * p.cols;
  for (int i = 0; i < p.rows; ++i)
    for (int j = 0; j < p.cols; ++j)
      for (int c = 0; c < 3; ++c)
        t[c * hw + long(i) * p.cols + j] = (p.at(i, j, c) / 255.0f - 0.5f) / 0.5f;
  return t;
}

// Channel-input normalizers: color block sums lie in [0,16]; gradient block
// sums are bounded by 16 * max |grad| with |grad| <= 100 * sqrt(2) on L*.
inline constexpr float kAcfColorScale = 16.0f;
inline constexpr float kAcfGradScale = 16.0f * 100.0f * 1.41421356f;

/// Input encoding for channel features, shape [10, rows/4, cols/4].
inline Tensor<float> encode_acf_input(const AcfPatch& a) {
  Tensor<float> t({kAcfPlanes, a.rows, a.cols});
  long hw = long(a.rows) * a.cols;
  for (int k = 0; k < kAcfPlanes; ++k) {
    float scale = k < 3 ? kAcfColorScale : kAcfGradScale;
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j)
        t[k * hw + long(i) * a.cols + j] = a.planes[std::size_t(k)](i, j) / scale;
  }
  return t;
}

enum class InputKind { rgb, acf };

inline const char* input_kind_name(InputKind k) { return k == InputKind::rgb ? "rgb" : "acf"; }

inline InputKind input_kind_from_string(const std::string& s) {
  if (s == "rgb") return InputKind::rgb;
  if (s == "acf") return InputKind::acf;
  throw ConfigError("unknown input kind '" + s + "'");
}

inline std::vector<int> input_shape_for(InputKind kind, int patch) {
  if (kind == InputKind::rgb) return {3, patch, patch};
  return {kAcfPlanes, patch / kAcfShrink, patch / kAcfShrink};
}

/// Network input for one patch; channel features are computed on demand and
/// cached inside the patch.
inline Tensor<float> encode_input(LabeledPatch& p, InputKind kind) {
  if (kind == InputKind::rgb) return encode_rgb_input(p.rgb);
  if (!p.acf) p.acf = extract_acf(p.rgb);
  return encode_acf_input(*p.acf);
}

namespace toygen {

// Grayscale scene values; all drawing happens on a double canvas in [0,1]
// before noise and 8-bit quantization.

inline double dist_to_segment(double px, double py, double x0, double y0, double x1, double y1) {
  double dx = x1 - x0, dy = y1 - y0;
  double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double cx = x0 + t * dx, cy = y0 + t * dy;
  return std::hypot(px - cx, py - cy);
}

/// Upright capsule: the pedestrian stand-in. Guaranteed contrast >= 0.33
/// against the background so quantization keeps at least 0.3.
inline void draw_positive(std::vector<double>& canvas, int S, RandomStream& rng) {
  double bg = rng.uniform(0.05, 0.45);
  double contrast = rng.uniform(0.33, 0.47);
  double fg = bg + contrast;
  double height = rng.uniform(0.60, 0.90) * S;
  double width = rng.uniform(0.35, 0.50) * height;
  double radius = width / 2;
  double cx = S / 2.0 + rng.uniform(-0.15, 0.15) * S;
  double cy = S / 2.0 + rng.uniform(-0.15, 0.15) * S;
  double half = std::max(0.0, height / 2 - radius);
  for (int i = 0; i < S; ++i)
    for (int j = 0; j < S; ++j) {
      double d = dist_to_segment(j + 0.5, i + 0.5, cx, cy - half, cx, cy + half);
      canvas[std::size_t(i) * S + j] = d <= radius ? fg : bg;
    }
}

/// Backgrounds: texture noise, smooth ramps, or a horizontal bar distractor.
inline void draw_negative(std::vector<double>& canvas, int S, RandomStream& rng) {
  double pick = rng.uniform();
  if (pick < 0.4) {
    double base = rng.uniform(0.10, 0.80);
    double amp = rng.uniform(0.05, 0.20);
    for (auto& v : canvas) v = std::clamp(base + rng.uniform(-amp, amp), 0.0, 1.0);
  } else if (pick < 0.7) {
    double v0 = rng.uniform(0.05, 0.90), v1 = rng.uniform(0.05, 0.90);
    int dir = int(rng.below(4));
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        double t = dir == 0   ? double(j) / (S - 1)
                   : dir == 1 ? double(i) / (S - 1)
                   : dir == 2 ? double(i + j) / (2.0 * (S - 1))
                              : double(i + (S - 1 - j)) / (2.0 * (S - 1));
        canvas[std::size_t(i) * S + j] = v0 + (v1 - v0) * t;
      }
  } else {
    double bg = rng.uniform(0.05, 0.45);
    double fg = bg + rng.uniform(0.33, 0.47);
    double length = rng.uniform(0.60, 0.90) * S;
    double radius = rng.uniform(0.35, 0.50) * length / 2;
    double cx = S / 2.0 + rng.uniform(-0.15, 0.15) * S;
    double cy = S / 2.0 + rng.uniform(-0.15, 0.15) * S;
    double half = std::max(0.0, length / 2 - radius);
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        double d = dist_to_segment(j + 0.5, i + 0.5, cx - half, cy, cx + half, cy);
        canvas[std::size_t(i) * S + j] = d <= radius ? fg : bg;
      }
  }
}

}  // namespace toygen

/// Deterministic synthetic pedestrian-patch corpus: capsule silhouettes
/// against structured backgrounds, per-channel Gaussian pixel noise, ten
/// patches per synthetic "image" for the detection-rate denominator.
inline Dataset generate_toy(int positives, int negatives, int patch_size, double noise_level,
                            std::uint64_t seed, Split split = Split::train) {
  if (positives < 1 || negatives < 1) throw ConfigError("need at least one patch per class");
  if (patch_size < 8 || patch_size % 4 != 0)
    throw ConfigError("patch size must be >= 8 and divisible by 4, got " +
                      std::to_string(patch_size));
  if (noise_level < 0) throw ConfigError("noise level must be non-negative");

  Mt64Stream rng(seed);
  const int S = patch_size;
  Dataset ds;
  ds.split = split;
  ds.patches.reserve(std::size_t(positives + negatives));
  std::vector<double> canvas(std::size_t(S) * S);

  for (int n = 0; n < positives + negatives; ++n) {
    bool positive = n < positives;
    if (positive)
      toygen::draw_positive(canvas, S, rng);
    else
      toygen::draw_negative(canvas, S, rng);
    LabeledPatch p;
    p.label = positive ? 1 : 0;
    p.rgb = RgbPatch(S, S);
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j)
        for (int c = 0; c < 3; ++c) {
          double v = canvas[std::size_t(i) * S + j];
          if (noise_level > 0) v += noise_level * rng.normal();
          v = std::clamp(v, 0.0, 1.0);
          p.rgb.at(i, j, c) = std::uint8_t(std::lround(v * 255.0));
        }
    ds.patches.push_back(std::move(p));
  }

  // Shuffle so batches mix classes, then assign stable ids: ten patches per image.
  for (std::size_t i = ds.patches.size(); i > 1; --i) {
    std::size_t j = std::size_t(rng.below(i));
    std::swap(ds.patches[i - 1], ds.patches[j]);
  }
  for (std::size_t i = 0; i < ds.patches.size(); ++i) {
    ds.patches[i].patch_id = int(i);
    ds.patches[i].image_id = int(i / 10);
  }
  ds.finalize();
  return ds;
}

/// Draws batches with a fixed positive:negative ratio, each class consumed
/// without replacement; stops when either class runs out of a full quota.
class BatchSampler {
 public:
  BatchSampler(const Dataset& ds, int batch_size, int ratio_pos, int ratio_neg,
               RandomStream& rng)
      : ds_(ds), batch_(batch_size) {
    if (batch_size < 1 || ratio_pos < 1 || ratio_neg < 1)
      throw ConfigError("batch size and ratio parts must be positive");
    if (batch_size % (ratio_pos + ratio_neg) != 0)
      throw ConfigError("batch size " + std::to_string(batch_size) +
                        " is not divisible by ratio " + std::to_string(ratio_pos) + ":" +
                        std::to_string(ratio_neg));
    pos_per_batch_ = batch_size / (ratio_pos + ratio_neg) * ratio_pos;
    neg_per_batch_ = batch_size - pos_per_batch_;
    for (std::size_t i = 0; i < ds.patches.size(); ++i)
      (ds.patches[i].label == 1 ? pos_ : neg_).push_back(int(i));
    shuffle(pos_, rng);
    shuffle(neg_, rng);
  }

  int positives_per_batch() const { return pos_per_batch_; }
  int negatives_per_batch() const { return neg_per_batch_; }

  /// Indices into the dataset for the next batch, or empty when exhausted.
  std::vector<int> next() {
    if (pos_cursor_ + pos_per_batch_ > pos_.size() || neg_cursor_ + neg_per_batch_ > neg_.size())
      return {};
    std::vector<int> batch;
    batch.reserve(std::size_t(batch_));
    for (int k = 0; k < pos_per_batch_; ++k) batch.push_back(pos_[pos_cursor_++]);
    for (int k = 0; k < neg_per_batch_; ++k) batch.push_back(neg_[neg_cursor_++]);
    return batch;
  }

 private:
  static void shuffle(std::vector<int>& v, RandomStream& rng) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[std::size_t(rng.below(i))]);
  }

  const Dataset& ds_;
  int batch_;
  int pos_per_batch_ = 0, neg_per_batch_ = 0;
  std::vector<int> pos_, neg_;
  std::size_t pos_cursor_ = 0, neg_cursor_ = 0;
};

/// Horizontal mirror with probability `flip_prob`; label and ids survive,
/// cached channels are invalidated by the pixel change.
inline LabeledPatch augment_flip(const LabeledPatch& p, RandomStream& rng,
                                 double flip_prob = 0.5) {
  if (flip_prob < 0 || flip_prob > 1) throw ConfigError("flip probability must be in [0,1]");
  if (rng.uniform() >= flip_prob) return p;
  LabeledPatch out;
  out.image_id = p.image_id;
  out.patch_id = p.patch_id;
  out.label = p.label;
  out.rgb = flip_horizontal(p.rgb);
  return out;
}

/// Nearest-neighbor resample to target extents (index mapping i*src/dst).
inline RgbPatch warp_nearest(const RgbPatch& p, int rows, int cols) {
  if (rows < 1 || cols < 1) throw ShapeError("warp extents must be positive");
  RgbPatch out(rows, cols);
  for (int i = 0; i < rows; ++i) {
    int si = int(std::int64_t(i) * p.rows / rows);
    for (int j = 0; j < cols; ++j) {
      int sj = int(std::int64_t(j) * p.cols / cols);
      for (int c = 0; c < 3; ++c) out.at(i, j, c) = p.at(si, sj, c);
    }
  }
  return out;
}

// Manifest lines: "<split> <image_id> <label 0|1> <relative ppm path>".

inline void save_dataset(const std::vector<const Dataset*>& splits, const std::string& dir,
                         const std::string& config_hash) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "ppm");
  std::ofstream manifest(fs::path(dir) / "manifest.txt", std::ios::trunc);
  if (!manifest) throw FormatError("cannot open manifest for writing in '" + dir + "'");
  manifest << "# config_hash=" << config_hash << "\n";
  for (const Dataset* ds : splits)
    for (const auto& p : ds->patches) {
      std::ostringstream name;
      name << split_name(ds->split) << "_" << p.patch_id << ".ppm";
      write_ppm((fs::path(dir) / "ppm" / name.str()).string(), p.rgb);
      manifest << split_name(ds->split) << " " << p.image_id << " " << p.label << " ppm/"
               << name.str() << "\n";
    }
  manifest.flush();
  if (!manifest) throw FormatError("manifest write failed");
}

struct LoadedData {
  std::map<Split, Dataset> splits;
  std::vector<std::string> warnings;
};

/// Reads a manifest; images whose extents differ from `patch_size` are
/// nearest-neighbor warped. Malformed lines fail with their line number.
inline LoadedData load_manifest(const std::string& manifest_path, int patch_size) {
  namespace fs = std::filesystem;
  std::ifstream is(manifest_path);
  if (!is) throw FormatError("cannot open manifest '" + manifest_path + "'");
  fs::path base = fs::path(manifest_path).parent_path();

  LoadedData out;
  out.splits[Split::train].split = Split::train;
  out.splits[Split::val].split = Split::val;
  out.splits[Split::test].split = Split::test;
  std::map<Split, int> next_patch_id;

  std::string line;
  int line_no = 0;
  int records = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string split_tok, path_tok;
    int image_id = -1, label = -1;
    if (!(ls >> split_tok >> image_id >> label >> path_tok))
      throw FormatError("manifest line " + std::to_string(line_no) + " is malformed: '" + line +
                        "'");
    std::string rest;
    if (ls >> rest)
      throw FormatError("manifest line " + std::to_string(line_no) + " has trailing fields");
    if (label != 0 && label != 1)
      throw FormatError("manifest line " + std::to_string(line_no) + " has label " +
                        std::to_string(label) + ", want 0 or 1");
    if (image_id < 0)
      throw FormatError("manifest line " + std::to_string(line_no) + " has a negative image id");
    Split split;
    try {
      split = split_from_string(split_tok);
    } catch (const ConfigError&) {
      throw FormatError("manifest line " + std::to_string(line_no) + " has unknown split '" +
                        split_tok + "'");
    }
    fs::path img_path = fs::path(path_tok);
    if (img_path.is_relative()) img_path = base / img_path;
    LabeledPatch p;
    p.label = label;
    p.image_id = image_id;
    p.patch_id = next_patch_id[split]++;
    try {
      p.rgb = read_ppm(img_path.string());
    } catch (const FormatError& e) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (p.rgb.rows != patch_size || p.rgb.cols != patch_size)
      p.rgb = warp_nearest(p.rgb, patch_size, patch_size);
    out.splits[split].patches.push_back(std::move(p));
    ++records;
  }
  if (records == 0) out.warnings.push_back("manifest '" + manifest_path + "' lists no patches");
  for (auto& kv : out.splits) kv.second.finalize();
  return out;
}

}  // namespace dk
