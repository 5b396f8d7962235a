#include "deformcaps/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace dcaps {

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "synthetic") return DatasetKind::synthetic;
  if (s == "coco_json") return DatasetKind::coco_json;
  throw std::invalid_argument("unknown dataset kind: " + s);
}

std::string to_string(DatasetKind k) {
  return k == DatasetKind::synthetic ? "synthetic" : "coco_json";
}

namespace {

enum ShapeClass { kDisk = 0, kSquare = 1, kTriangle = 2 };

struct ShapeInstance {
  int cls;
  double x1, y1, x2, y2;  // tight box

  bool contains(double px, double py) const {
    switch (cls) {
      case kDisk: {
        const double r = 0.5 * (x2 - x1);
        const double cx = 0.5 * (x1 + x2), cy = 0.5 * (y1 + y2);
        return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
      }
      case kSquare:
        return px >= x1 && px < x2 && py >= y1 && py < y2;
      case kTriangle: {
        // apex top-center, base along the bottom edge
        const double ax = 0.5 * (x1 + x2), ay = y1;
        const double bx = x1, by = y2;
        const double cx = x2, cy = y2;
        const double s1 = (px - bx) * (ay - by) - (py - by) * (ax - bx);
        const double s2 = (px - cx) * (by - cy) - (py - cy) * (bx - cx);
        const double s3 = (px - ax) * (cy - ay) - (py - ay) * (cx - ax);
        const bool neg = s1 < 0 || s2 < 0 || s3 < 0;
        const bool pos = s1 > 0 || s2 > 0 || s3 > 0;
        return !(neg && pos);
      }
      default:
        return false;
    }
  }
};

// Rasterizes the shape over its box at pixel resolution, then resamples to
// side x side by nearest neighbor.
Tensor shape_mask(const ShapeInstance& sh, int side) {
  const int64_t rx0 = static_cast<int64_t>(std::floor(sh.x1));
  const int64_t ry0 = static_cast<int64_t>(std::floor(sh.y1));
  const int64_t rw = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(sh.x2)) - rx0);
  const int64_t rh = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(sh.y2)) - ry0);
  std::vector<double> raster(static_cast<size_t>(rw * rh), 0.0);
  for (int64_t y = 0; y < rh; ++y) {
    for (int64_t x = 0; x < rw; ++x) {
      const double px = static_cast<double>(rx0 + x) + 0.5;
      const double py = static_cast<double>(ry0 + y) + 0.5;
      raster[static_cast<size_t>(y * rw + x)] = sh.contains(px, py) ? 1.0 : 0.0;
    }
  }
  Tensor mask({side, side});
  for (int64_t my = 0; my < side; ++my) {
    const int64_t sy = std::min<int64_t>(rh - 1, static_cast<int64_t>((my + 0.5) * rh / side));
    for (int64_t mx = 0; mx < side; ++mx) {
      const int64_t sx = std::min<int64_t>(rw - 1, static_cast<int64_t>((mx + 0.5) * rw / side));
      mask.data[static_cast<size_t>(my * side + mx)] = raster[static_cast<size_t>(sy * rw + sx)];
    }
  }
  return mask;
}

double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace

SyntheticShapes::SyntheticShapes(const DatasetSpec& spec) : spec_(spec) {
  if (spec_.K < 1 || spec_.K > 3) {
    throw std::invalid_argument("synthetic shapes support 1..3 classes, got " + std::to_string(spec_.K));
  }
}

const char* SyntheticShapes::class_name(int id) {
  switch (id) {
    case kDisk: return "disk";
    case kSquare: return "square";
    case kTriangle: return "triangle";
    default: return "unknown";
  }
}

Sample SyntheticShapes::sample(int64_t index) const {
  const int H = spec_.image_h, W = spec_.image_w;
  Pcg32 rng(mix64(spec_.seed) ^ mix64(static_cast<uint64_t>(index) + 0x517cc1b727220a95ull),
            static_cast<uint64_t>(index));
  Sample s;
  s.image = Tensor({3, H, W});

  // textured background: per-channel base + linear gradient + fine noise
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.15, 0.85);
    gx[c] = rng.uniform(-0.25, 0.25);
    gy[c] = rng.uniform(-0.25, 0.25);
  }
  for (int c = 0; c < 3; ++c) {
    double* plane = s.image.data.data() + static_cast<int64_t>(c) * H * W;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double v = base[c] + gx[c] * (static_cast<double>(x) / W - 0.5) +
                         gy[c] * (static_cast<double>(y) / H - 0.5) + rng.uniform(-0.06, 0.06);
        plane[y * W + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }

  const int64_t want = 1 + rng.uniform_int(0, 4);  // 1..4 shapes
  std::vector<ShapeInstance> shapes;
  const int grid_d = 4;
  for (int64_t si = 0; si < want; ++si) {
    for (int attempt = 0; attempt < 30; ++attempt) {
      ShapeInstance sh;
      sh.cls = static_cast<int>(rng.uniform_int(0, spec_.K));
      double w, h;
      if (sh.cls == kDisk) {
        const double r = rng.uniform(5.0, 13.0);
        w = h = 2.0 * r;
      } else {
        w = rng.uniform(10.0, 26.0);
        h = rng.uniform(10.0, 26.0);
      }
      if (w + 2 >= W || h + 2 >= H) continue;
      const double cx = rng.uniform(w / 2 + 1.0, W - w / 2 - 1.0);
      const double cy = rng.uniform(h / 2 + 1.0, H - h / 2 - 1.0);
      sh.x1 = cx - w / 2;
      sh.y1 = cy - h / 2;
      sh.x2 = cx + w / 2;
      sh.y2 = cy + h / 2;
      bool ok = true;
      for (const ShapeInstance& other : shapes) {
        const Box a{sh.x1, sh.y1, sh.x2, sh.y2, 0};
        const Box b{other.x1, other.y1, other.x2, other.y2, 0};
        const bool same_cell =
            static_cast<int>(cx / grid_d) == static_cast<int>(0.5 * (other.x1 + other.x2) / grid_d) &&
            static_cast<int>(cy / grid_d) == static_cast<int>(0.5 * (other.y1 + other.y2) / grid_d);
        if (iou(a, b) > 0.25 || same_cell) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      shapes.push_back(sh);
      break;
    }
  }

  for (const ShapeInstance& sh : shapes) {
    // pick a fill color with some contrast against the local background
    const int icx = std::clamp(static_cast<int>(sh.x1 + sh.x2) / 2, 0, W - 1);
    const int icy = std::clamp(static_cast<int>(sh.y1 + sh.y2) / 2, 0, H - 1);
    const double bg_lum = luminance(s.image.at({0, icy, icx}), s.image.at({1, icy, icx}),
                                    s.image.at({2, icy, icx}));
    double col[3];
    for (int tries = 0; tries < 10; ++tries) {
      for (double& c : col) c = rng.uniform(0.0, 1.0);
      if (std::fabs(luminance(col[0], col[1], col[2]) - bg_lum) > 0.2) break;
    }
    const int px1 = std::max(0, static_cast<int>(std::floor(sh.x1)));
    const int py1 = std::max(0, static_cast<int>(std::floor(sh.y1)));
    const int px2 = std::min(W, static_cast<int>(std::ceil(sh.x2)));
    const int py2 = std::min(H, static_cast<int>(std::ceil(sh.y2)));
    for (int y = py1; y < py2; ++y) {
      for (int x = px1; x < px2; ++x) {
        if (!sh.contains(x + 0.5, y + 0.5)) continue;
        for (int c = 0; c < 3; ++c) {
          s.image.at({c, y, x}) = col[c];
        }
      }
    }
    s.boxes.push_back(Box{sh.x1, sh.y1, sh.x2, sh.y2, sh.cls});
    s.masks.push_back(shape_mask(sh, spec_.mask_side));
  }
  return s;
}

// ---- augmentation -----------------------------------------------------------------

namespace {

void flip_image(Tensor& img) {
  const int64_t C = img.shape[0], H = img.shape[1], W = img.shape[2];
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t y = 0; y < H; ++y) {
      double* row = img.data.data() + (c * H + y) * W;
      std::reverse(row, row + W);
    }
  }
}

void flip_mask(Tensor& m) {
  const int64_t n = m.shape[0];
  for (int64_t y = 0; y < n; ++y) {
    double* row = m.data.data() + y * n;
    std::reverse(row, row + n);
  }
}

double sample_clamped(const Tensor& img, int64_t c, double y, double x) {
  const int64_t H = img.shape[1], W = img.shape[2];
  const int64_t x0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(x)), 0, W - 1);
  const int64_t y0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(y)), 0, H - 1);
  const int64_t x1 = std::min<int64_t>(x0 + 1, W - 1);
  const int64_t y1 = std::min<int64_t>(y0 + 1, H - 1);
  const double fx = std::clamp(x - static_cast<double>(x0), 0.0, 1.0);
  const double fy = std::clamp(y - static_cast<double>(y0), 0.0, 1.0);
  const double* plane = img.data.data() + c * H * W;
  const double v00 = plane[y0 * W + x0], v01 = plane[y0 * W + x1];
  const double v10 = plane[y1 * W + x0], v11 = plane[y1 * W + x1];
  return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

// Crops the [0,1]-normalized sub-rectangle (u1..u2, v1..v2) of a mask and
// resamples it back to the full side, nearest neighbor.
Tensor recrop_mask(const Tensor& m, double u1, double u2, double v1, double v2) {
  const int64_t n = m.shape[0];
  Tensor out({n, n});
  for (int64_t y = 0; y < n; ++y) {
    const double fy = v1 + (v2 - v1) * ((y + 0.5) / static_cast<double>(n));
    const int64_t sy = std::clamp<int64_t>(static_cast<int64_t>(fy * n), 0, n - 1);
    for (int64_t x = 0; x < n; ++x) {
      const double fx = u1 + (u2 - u1) * ((x + 0.5) / static_cast<double>(n));
      const int64_t sx = std::clamp<int64_t>(static_cast<int64_t>(fx * n), 0, n - 1);
      out.data[static_cast<size_t>(y * n + x)] = m.data[static_cast<size_t>(sy * n + sx)];
    }
  }
  return out;
}

}  // namespace

Sample augment(const Sample& s, const DatasetSpec& spec, Pcg32& rng) {
  Sample out = s;
  const int64_t W = out.image.shape[2];
  const int64_t H = out.image.shape[1];

  if (spec.flip_prob > 0.0 && rng.uniform() < spec.flip_prob) {
    flip_image(out.image);
    for (Box& b : out.boxes) {
      const double nx1 = static_cast<double>(W) - b.x2;
      const double nx2 = static_cast<double>(W) - b.x1;
      b.x1 = nx1;
      b.x2 = nx2;
    }
    for (Tensor& m : out.masks) flip_mask(m);
  }

  if (!(spec.scale_lo == 1.0 && spec.scale_hi == 1.0)) {
    const double sc = rng.uniform(spec.scale_lo, spec.scale_hi);
    Tensor scaled({3, H, W});
    const double cx = static_cast<double>(W) / 2.0, cy = static_cast<double>(H) / 2.0;
    for (int64_t c = 0; c < 3; ++c) {
      for (int64_t y = 0; y < H; ++y) {
        const double sy = (static_cast<double>(y) + 0.5 - cy) / sc + cy - 0.5;
        for (int64_t x = 0; x < W; ++x) {
          const double sx = (static_cast<double>(x) + 0.5 - cx) / sc + cx - 0.5;
          scaled.at({c, y, x}) = sample_clamped(out.image, c, sy, sx);
        }
      }
    }
    out.image = std::move(scaled);
    std::vector<Box> boxes;
    std::vector<Tensor> masks;
    for (size_t i = 0; i < out.boxes.size(); ++i) {
      const Box& b = out.boxes[i];
      const double x1 = (b.x1 - cx) * sc + cx;
      const double x2 = (b.x2 - cx) * sc + cx;
      const double y1 = (b.y1 - cy) * sc + cy;
      const double y2 = (b.y2 - cy) * sc + cy;
      const double vx1 = std::max(0.0, x1), vx2 = std::min(static_cast<double>(W), x2);
      const double vy1 = std::max(0.0, y1), vy2 = std::min(static_cast<double>(H), y2);
      if (vx2 - vx1 < 2.0 || vy2 - vy1 < 2.0) continue;  // degenerate: drop object
      const double u1 = (vx1 - x1) / (x2 - x1), u2 = (vx2 - x1) / (x2 - x1);
      const double v1 = (vy1 - y1) / (y2 - y1), v2 = (vy2 - y1) / (y2 - y1);
      boxes.push_back(Box{vx1, vy1, vx2, vy2, b.class_id});
      if (u1 == 0.0 && u2 == 1.0 && v1 == 0.0 && v2 == 1.0) {
        masks.push_back(out.masks[i]);
      } else {
        masks.push_back(recrop_mask(out.masks[i], u1, u2, v1, v2));
      }
    }
    out.boxes = std::move(boxes);
    out.masks = std::move(masks);
  }

  if (spec.color_jitter > 0.0) {
    const double j = spec.color_jitter;
    for (int64_t c = 0; c < 3; ++c) {
      const double gain = 1.0 + rng.uniform(-j, j);
      const double shift = rng.uniform(-j / 2, j / 2);
      double* plane = out.image.data.data() + c * H * W;
      for (int64_t i = 0; i < H * W; ++i) {
        plane[i] = std::clamp(plane[i] * gain + shift, 0.0, 1.0);
      }
    }
  }
  return out;
}

// ---- PPM IO -------------------------------------------------------------------------

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error("unsupported raster format (want binary PPM P6): " + path);
  auto next_int = [&in, &path]() {
    int v;
    // skip whitespace and comment lines
    while (true) {
      const int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    if (!(in >> v)) throw std::runtime_error("truncated PPM header: " + path);
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw std::runtime_error("unsupported PPM maxval (want 255): " + path);
  in.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error("truncated PPM payload: " + path);
  Tensor img({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at({c, y, x}) = raw[static_cast<size_t>((y * w + x) * 3 + c)] / 255.0;
      }
    }
  }
  return img;
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.shape[0] != 3) throw std::invalid_argument("image must be [3, H, W]");
  const int64_t h = image.shape[1], w = image.shape[2];
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<size_t>(w * h * 3));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at({c, y, x}), 0.0, 1.0);
        raw[static_cast<size_t>((y * w + x) * 3 + c)] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

}  // namespace dcaps
