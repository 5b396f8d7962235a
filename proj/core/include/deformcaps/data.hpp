#pragma once

#include <string>
#include <vector>

#include "deformcaps/geometry.hpp"
#include "deformcaps/rng.hpp"
#include "deformcaps/tensor.hpp"

namespace dcaps {

struct Sample {
  Tensor image;               // [3, H, W], values in [0, 1]
  std::vector<Box> boxes;
  std::vector<Tensor> masks;  // one binary [n, n] mask per box, box-cropped and scale-normalized
};

enum class DatasetKind { synthetic, coco_json };

DatasetKind dataset_kind_from_string(const std::string& s);
std::string to_string(DatasetKind k);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  uint64_t seed = 1;
  int size = 2000;
  int image_h = 64, image_w = 64;
  int K = 3;
  double flip_prob = 0.5;
  double scale_lo = 0.6, scale_hi = 1.3;
  double color_jitter = 0.1;
  int mask_side = 28;
  std::string coco_path;
  std::string image_dir;
};

/// Deterministic synthetic dataset: disks, axis-aligned squares and
/// triangles on a textured background. Every sample is a pure function of
/// (spec.seed, index).
class SyntheticShapes {
 public:
  explicit SyntheticShapes(const DatasetSpec& spec);
  Sample sample(int64_t index) const;
  int64_t size() const { return spec_.size; }
  static const char* class_name(int id);

 private:
  DatasetSpec spec_;
};

/// Horizontal flip, scale jitter about the image center, and per-channel
/// color jitter. Boxes and masks transform consistently; objects whose
/// boxes degenerate below 2 px per side are dropped.
Sample augment(const Sample& s, const DatasetSpec& spec, Pcg32& rng);

// ---- COCO-format annotations -------------------------------------------------

struct CocoEntry {
  std::string file_name;
  int width = 0, height = 0;
  std::vector<Box> boxes;
  std::vector<Tensor> masks;
};

struct CocoDataset {
  std::vector<CocoEntry> entries;
  std::vector<std::string> class_names;  // contiguous ids [0, K)
  int skipped_annotations = 0;
  int skipped_rle = 0;

  int K() const { return static_cast<int>(class_names.size()); }
  /// Loads the entry's raster (PPM) from image_dir and assembles a Sample.
  Sample sample(int64_t index, const std::string& image_dir) const;
};

/// Reads a COCO-style annotation file: images, categories, and annotations
/// with [x, y, w, h] boxes and polygon segmentations. Category ids are
/// remapped to contiguous [0, K). Polygon masks are rasterized per object
/// and normalized to 28x28 by nearest neighbor. RLE segmentations and
/// malformed entries are skipped and counted.
CocoDataset load_coco_annotations(const std::string& path);

// ---- minimal raster IO (binary PPM, P6) ----------------------------------------

Tensor read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor& image);

}  // namespace dcaps
