#include "deformcaps/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace dcaps {

double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1);
  const double ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

void validate_boxes(const std::vector<Box>& boxes, int K, int H, int W) {
  for (size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    const std::string tag = "box " + std::to_string(i);
    if (!(b.x2 > b.x1) || !(b.y2 > b.y1)) throw std::invalid_argument(tag + " is degenerate");
    if (b.class_id < 0 || b.class_id >= K) throw std::invalid_argument(tag + " class out of range");
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > W || b.y2 > H) throw std::invalid_argument(tag + " outside image");
  }
}

double gaussian_radius(double w, double h, double min_iou) {
  // Both corners shifted diagonally: overlap (w-r)(h-r) against union
  // 2wh - (w-r)(h-r).
  const double a1 = 1.0;
  const double b1 = h + w;
  const double c1 = w * h * (1.0 - min_iou) / (1.0 + min_iou);
  const double r1 = (b1 - std::sqrt(b1 * b1 - 4.0 * a1 * c1)) / (2.0 * a1);

  // Both corners shifted inward: (w-2r)(h-2r) / (wh) >= iou.
  const double a2 = 4.0;
  const double b2 = 2.0 * (h + w);
  const double c2 = (1.0 - min_iou) * w * h;
  const double r2 = (b2 - std::sqrt(b2 * b2 - 4.0 * a2 * c2)) / (2.0 * a2);

  // Both corners shifted outward: wh / ((w+2r)(h+2r)) >= iou.
  const double a3 = 4.0 * min_iou;
  const double b3 = -2.0 * min_iou * (h + w);
  const double c3 = (min_iou - 1.0) * w * h;
  const double r3 = (-b3 + std::sqrt(b3 * b3 - 4.0 * a3 * c3)) / (2.0 * a3);

  return std::max(1e-6, std::min({r1, r2, r3}));
}

Heatmap encode_heatmap(const std::vector<Box>& boxes, int K, int H, int W, int d, double min_iou) {
  if (H % d != 0 || W % d != 0) throw std::invalid_argument("image dims must be divisible by d");
  validate_boxes(boxes, K, H, W);
  const int64_t gh = H / d, gw = W / d;
  Heatmap hm{Tensor({K, gh, gw}), d};
  for (size_t bi = 0; bi < boxes.size(); ++bi) {
    const Box& b = boxes[bi];
    const int64_t cxq = static_cast<int64_t>(std::floor(b.cx() / d));
    const int64_t cyq = static_cast<int64_t>(std::floor(b.cy() / d));
    if (cxq < 0 || cxq >= gw || cyq < 0 || cyq >= gh) {
      throw std::invalid_argument("box " + std::to_string(bi) + " center maps outside grid");
    }
    const double radius = gaussian_radius(b.w() / d, b.h() / d, min_iou);
    const double sigma = radius / 3.0;
    const double denom = 2.0 * sigma * sigma;
    double* chan = hm.values.data.data() + static_cast<int64_t>(b.class_id) * gh * gw;
    for (int64_t y = 0; y < gh; ++y) {
      for (int64_t x = 0; x < gw; ++x) {
        const double dx = static_cast<double>(x - cxq);
        const double dy = static_cast<double>(y - cyq);
        const double g = std::exp(-(dx * dx + dy * dy) / denom);
        double& cell = chan[y * gw + x];
        cell = std::max(cell, g);
      }
    }
  }
  return hm;
}

RegressionTargets encode_regression(const std::vector<Box>& boxes, int H, int W, int d) {
  if (H % d != 0 || W % d != 0) throw std::invalid_argument("image dims must be divisible by d");
  const int64_t gh = H / d, gw = W / d;
  RegressionTargets t;
  t.offsets = Tensor({2, gh, gw});
  t.sizes = Tensor({2, gh, gw});
  t.mask = Tensor({gh, gw});
  for (size_t bi = 0; bi < boxes.size(); ++bi) {
    const Box& b = boxes[bi];
    const double px = b.cx() / d;
    const double py = b.cy() / d;
    const int64_t qx = static_cast<int64_t>(std::floor(px));
    const int64_t qy = static_cast<int64_t>(std::floor(py));
    if (qx < 0 || qx >= gw || qy < 0 || qy >= gh) {
      throw std::invalid_argument("box " + std::to_string(bi) + " center maps outside grid");
    }
    const int64_t cell = qy * gw + qx;
    if (t.mask.data[static_cast<size_t>(cell)] != 0.0) {
      ++t.collisions;
      std::fprintf(stderr, "warning: center cell collision at (%lld, %lld), keeping box %zu\n",
                   static_cast<long long>(qy), static_cast<long long>(qx), bi);
    }
    t.offsets.data[static_cast<size_t>(cell)] = px - static_cast<double>(qx);
    t.offsets.data[static_cast<size_t>(gh * gw + cell)] = py - static_cast<double>(qy);
    t.sizes.data[static_cast<size_t>(cell)] = b.w();
    t.sizes.data[static_cast<size_t>(gh * gw + cell)] = b.h();
    t.mask.data[static_cast<size_t>(cell)] = 1.0;
  }
  int64_t p = 0;
  for (double v : t.mask.data) p += v != 0.0 ? 1 : 0;
  t.P = p;
  return t;
}

std::vector<Detection> decode_detections(const Heatmap& heatmap, const Tensor& offsets, const Tensor& sizes,
                                         double threshold, int top_n) {
  const Tensor& hm = heatmap.values;
  if (hm.rank() != 3) throw std::invalid_argument("heatmap must be [K, H/d, W/d]");
  const int64_t K = hm.shape[0], gh = hm.shape[1], gw = hm.shape[2];
  const int d = heatmap.d;

  struct Peak {
    Detection det;
    int64_t row, col;
  };
  std::vector<Peak> peaks;
  for (int64_t k = 0; k < K; ++k) {
    const double* chan = hm.data.data() + k * gh * gw;
    for (int64_t y = 0; y < gh; ++y) {
      for (int64_t x = 0; x < gw; ++x) {
        const double s = chan[y * gw + x];
        if (s < threshold) continue;
        bool is_peak = true;
        for (int64_t dy = -1; dy <= 1 && is_peak; ++dy) {
          for (int64_t dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int64_t ny = y + dy, nx = x + dx;
            const double nb = (ny >= 0 && ny < gh && nx >= 0 && nx < gw) ? chan[ny * gw + nx] : 0.0;
            if (nb > s) {
              is_peak = false;
              break;
            }
          }
        }
        if (!is_peak) continue;
        Detection det;
        det.class_id = static_cast<int>(k);
        det.score = s;
        const double ox = offsets.data[static_cast<size_t>(y * gw + x)];
        const double oy = offsets.data[static_cast<size_t>(gh * gw + y * gw + x)];
        const double bw = sizes.data[static_cast<size_t>(y * gw + x)];
        const double bh = sizes.data[static_cast<size_t>(gh * gw + y * gw + x)];
        det.cx = (static_cast<double>(x) + ox) * d;
        det.cy = (static_cast<double>(y) + oy) * d;
        det.box = Box{det.cx - bw / 2.0, det.cy - bh / 2.0, det.cx + bw / 2.0, det.cy + bh / 2.0,
                      det.class_id};
        peaks.push_back(Peak{std::move(det), y, x});
      }
    }
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.det.score != b.det.score) return a.det.score > b.det.score;
    return std::array<int64_t, 3>{a.row, a.col, a.det.class_id} <
           std::array<int64_t, 3>{b.row, b.col, b.det.class_id};
  });
  std::vector<Detection> out;
  out.reserve(peaks.size());
  for (Peak& p : peaks) {
    if (static_cast<int>(out.size()) >= top_n) break;
    out.push_back(std::move(p.det));
  }
  return out;
}

}  // namespace dcaps
