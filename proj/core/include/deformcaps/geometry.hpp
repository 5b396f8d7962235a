#pragma once

#include <optional>
#include <vector>

#include "deformcaps/tensor.hpp"

namespace dcaps {

/// Axis-aligned box in input-image pixel coordinates.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int class_id = 0;

  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return w() * h(); }
};

double iou(const Box& a, const Box& b);

/// Throws std::invalid_argument naming the offending box if any box is
/// degenerate, out of [0,K) class range, or outside the image.
void validate_boxes(const std::vector<Box>& boxes, int K, int H, int W);

/// Per-class center heatmap on the downsampled grid, values in [0,1].
struct Heatmap {
  Tensor values;  // [K, H/d, W/d]
  int d = 4;
};

struct RegressionTargets {
  Tensor offsets;  // [2, H/d, W/d], (dx, dy) in fractional cells, targets in [0,1)^2
  Tensor sizes;    // [2, H/d, W/d], (w, h) in pixels
  Tensor mask;     // [H/d, W/d], 1 at center cells
  int64_t P = 0;   // number of center cells set
  int collisions = 0;
};

/// Largest corner displacement (same units as w, h) that keeps IoU with the
/// original box at least min_iou, taking the minimum over the three
/// displacement regimes (both corners in, both out, diagonal shift).
/// Clamped to >= 1e-6.
double gaussian_radius(double w, double h, double min_iou);

/// Splats one Gaussian per box on its class channel, centered on the
/// quantized cell floor(p/d) with sigma = gaussian_radius(w/d, h/d, min_iou)/3;
/// overlaps combine by elementwise max.
Heatmap encode_heatmap(const std::vector<Box>& boxes, int K, int H, int W, int d, double min_iou = 0.7);

/// Offset targets p/d - floor(p/d) and size targets (w, h) at each center
/// cell. Exact cell collisions resolve last-writer-wins (counted).
RegressionTargets encode_regression(const std::vector<Box>& boxes, int H, int W, int d);

struct Detection {
  int class_id = 0;
  double score = 0;
  double cx = 0, cy = 0;  // pixels
  Box box;
  std::optional<Tensor> mask;  // [n, n] reconstruction, when requested
};

/// A cell survives iff score >= threshold and equals its 3x3 neighborhood
/// max on its own channel (zero-padded borders; plateau ties all kept).
/// Output sorted by score descending, ties by (row, col, class).
std::vector<Detection> decode_detections(const Heatmap& heatmap, const Tensor& offsets, const Tensor& sizes,
                                         double threshold, int top_n);

}  // namespace dcaps
