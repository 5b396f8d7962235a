#include "deformcaps/capsules.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace dcaps {

void LayerConfig::validate() const {
  if (c_i <= 0 || a_i <= 0 || c_j <= 0 || a_j <= 0 || k <= 0 || H <= 0 || W <= 0 || stride <= 0) {
    throw std::invalid_argument("LayerConfig fields must be positive");
  }
  if (k % 2 == 0) throw std::invalid_argument("kernel size must be odd, got " + std::to_string(k));
}

namespace {

void check_children(const Tensor& ch, const LayerConfig& cfg) {
  const std::vector<int64_t> want{cfg.c_i, cfg.a_i, cfg.H, cfg.W};
  if (ch.shape != want) {
    throw std::invalid_argument("children shape " + shape_str(ch.shape) + " does not match config " +
                                shape_str(want));
  }
}

void check_kernel(const Tensor& kr, const LayerConfig& cfg) {
  const std::vector<int64_t> want{cfg.c_j, cfg.a_j, cfg.c_i, cfg.a_i, cfg.k, cfg.k};
  if (kr.shape != want) {
    throw std::invalid_argument("kernel shape " + shape_str(kr.shape) + " does not match config " +
                                shape_str(want));
  }
}

struct BilinearTaps {
  int64_t x0, y0;
  double fx, fy;
  bool in00, in01, in10, in11;  // (y0,x0) (y0,x0+1) (y0+1,x0) (y0+1,x0+1)
};

inline BilinearTaps taps_at(double x, double y, int64_t W, int64_t H) {
  BilinearTaps t;
  t.x0 = static_cast<int64_t>(std::floor(x));
  t.y0 = static_cast<int64_t>(std::floor(y));
  t.fx = x - static_cast<double>(t.x0);
  t.fy = y - static_cast<double>(t.y0);
  const bool x0_ok = t.x0 >= 0 && t.x0 < W;
  const bool x1_ok = t.x0 + 1 >= 0 && t.x0 + 1 < W;
  const bool y0_ok = t.y0 >= 0 && t.y0 < H;
  const bool y1_ok = t.y0 + 1 >= 0 && t.y0 + 1 < H;
  t.in00 = y0_ok && x0_ok;
  t.in01 = y0_ok && x1_ok;
  t.in10 = y1_ok && x0_ok;
  t.in11 = y1_ok && x1_ok;
  return t;
}

inline double taps_value(const double* plane, int64_t W, const BilinearTaps& t) {
  const double v00 = t.in00 ? plane[t.y0 * W + t.x0] : 0.0;
  const double v01 = t.in01 ? plane[t.y0 * W + t.x0 + 1] : 0.0;
  const double v10 = t.in10 ? plane[(t.y0 + 1) * W + t.x0] : 0.0;
  const double v11 = t.in11 ? plane[(t.y0 + 1) * W + t.x0 + 1] : 0.0;
  return (1.0 - t.fy) * ((1.0 - t.fx) * v00 + t.fx * v01) + t.fy * ((1.0 - t.fx) * v10 + t.fx * v11);
}

}  // namespace

double bilinear_at(const Tensor& grid, double x, double y, int type, int atom) {
  if (grid.rank() != 4) throw std::invalid_argument("bilinear_at expects [c, a, H, W]");
  const int64_t H = grid.shape[2], W = grid.shape[3];
  const double* plane = grid.data.data() + (static_cast<int64_t>(type) * grid.shape[1] + atom) * H * W;
  return taps_value(plane, W, taps_at(x, y, W, H));
}

Var bilinear_sample(Tape& t, Var grid, Var xy, int type, int atom) {
  const Tensor& g = t.val(grid);
  const Tensor& p = t.val(xy);
  if (g.rank() != 4) throw std::invalid_argument("bilinear_sample expects grid [c, a, H, W]");
  if (p.numel() != 2) throw std::invalid_argument("bilinear_sample expects xy of 2 elements");
  const int64_t H = g.shape[2], W = g.shape[3];
  const int64_t plane_off = (static_cast<int64_t>(type) * g.shape[1] + atom) * H * W;
  const double x = p.data[0], y = p.data[1];
  const BilinearTaps tap = taps_at(x, y, W, H);
  const double value = taps_value(g.data.data() + plane_off, W, tap);
  return t.emit(Tensor::scalar(value), {grid, xy}, [grid, xy, plane_off, W, H, tap](Tape& tp, Var self) {
    const double go = tp.grad(self)[0];
    const double* plane = tp.val(grid).data.data() + plane_off;
    const double v00 = tap.in00 ? plane[tap.y0 * W + tap.x0] : 0.0;
    const double v01 = tap.in01 ? plane[tap.y0 * W + tap.x0 + 1] : 0.0;
    const double v10 = tap.in10 ? plane[(tap.y0 + 1) * W + tap.x0] : 0.0;
    const double v11 = tap.in11 ? plane[(tap.y0 + 1) * W + tap.x0 + 1] : 0.0;
    if (tp.tracked(grid)) {
      std::vector<double>& gg = tp.grad_buf(grid);
      if (tap.in00) gg[static_cast<size_t>(plane_off + tap.y0 * W + tap.x0)] += go * (1.0 - tap.fy) * (1.0 - tap.fx);
      if (tap.in01) gg[static_cast<size_t>(plane_off + tap.y0 * W + tap.x0 + 1)] += go * (1.0 - tap.fy) * tap.fx;
      if (tap.in10) gg[static_cast<size_t>(plane_off + (tap.y0 + 1) * W + tap.x0)] += go * tap.fy * (1.0 - tap.fx);
      if (tap.in11) gg[static_cast<size_t>(plane_off + (tap.y0 + 1) * W + tap.x0 + 1)] += go * tap.fy * tap.fx;
    }
    if (tp.tracked(xy)) {
      const double dvx = (1.0 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10);
      const double dvy = (1.0 - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01);
      std::vector<double>& gp = tp.grad_buf(xy);
      gp[0] += go * dvx;
      gp[1] += go * dvy;
    }
  });
}

// ---- shared projection machinery ---------------------------------------------

namespace {

// Packs kernel[j, :, i, :, :, :] into a contiguous [a_j, a_i*k*k] matrix.
void pack_weights(const Tensor& kernel, const LayerConfig& cfg, int64_t j, int64_t i, double* dst) {
  const int64_t block = static_cast<int64_t>(cfg.a_i) * cfg.k * cfg.k;
  for (int64_t aj = 0; aj < cfg.a_j; ++aj) {
    const double* src =
        kernel.data.data() + (((j * cfg.a_j + aj) * cfg.c_i + i) * block);
    std::copy_n(src, block, dst + aj * block);
  }
}

// Scatters a packed [a_j, a_i*k*k] gradient block back into the kernel grad.
void unpack_weight_grad(const double* src, const LayerConfig& cfg, int64_t j, int64_t i,
                        std::vector<double>& kernel_grad) {
  const int64_t block = static_cast<int64_t>(cfg.a_i) * cfg.k * cfg.k;
  for (int64_t aj = 0; aj < cfg.a_j; ++aj) {
    double* dst = kernel_grad.data() + (((j * cfg.a_j + aj) * cfg.c_i + i) * block);
    const double* row = src + aj * block;
    for (int64_t e = 0; e < block; ++e) dst[e] += row[e];
  }
}

// Integer-tap im2col over one child type: cols [a_i*k*k, L].
void caps_im2col(const double* child, const LayerConfig& cfg, double* cols) {
  const int64_t ho = cfg.out_h(), wo = cfg.out_w(), L = ho * wo;
  const int64_t pad = cfg.pad();
  for (int64_t m = 0; m < cfg.a_i; ++m) {
    const double* plane = child + m * cfg.H * cfg.W;
    for (int64_t u = 0; u < cfg.k; ++u) {
      for (int64_t v = 0; v < cfg.k; ++v) {
        double* row = cols + ((m * cfg.k + u) * cfg.k + v) * L;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * cfg.stride + u - pad;
          const bool y_ok = iy >= 0 && iy < cfg.H;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * cfg.stride + v - pad;
            row[oy * wo + ox] = (y_ok && ix >= 0 && ix < cfg.W) ? plane[iy * cfg.W + ix] : 0.0;
          }
        }
      }
    }
  }
}

void caps_col2im_acc(const double* dcols, const LayerConfig& cfg, double* dchild) {
  const int64_t ho = cfg.out_h(), wo = cfg.out_w(), L = ho * wo;
  const int64_t pad = cfg.pad();
  for (int64_t m = 0; m < cfg.a_i; ++m) {
    double* plane = dchild + m * cfg.H * cfg.W;
    for (int64_t u = 0; u < cfg.k; ++u) {
      for (int64_t v = 0; v < cfg.k; ++v) {
        const double* row = dcols + ((m * cfg.k + u) * cfg.k + v) * L;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * cfg.stride + u - pad;
          if (iy < 0 || iy >= cfg.H) continue;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * cfg.stride + v - pad;
            if (ix < 0 || ix >= cfg.W) continue;
            plane[iy * cfg.W + ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

// Bilinear im2col over one child type for one parent type's offsets:
// cols [a_i*k*k, L] sampled at tap + (dx, dy).
void caps_im2col_deform(const double* child, const LayerConfig& cfg, const double* off_j, double* cols) {
  const int64_t ho = cfg.out_h(), wo = cfg.out_w(), L = ho * wo;
  const int64_t pad = cfg.pad();
  for (int64_t u = 0; u < cfg.k; ++u) {
    for (int64_t v = 0; v < cfg.k; ++v) {
      const double dx = off_j[(u * cfg.k + v) * 2 + 0];
      const double dy = off_j[(u * cfg.k + v) * 2 + 1];
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
          const double sx = static_cast<double>(ox * cfg.stride + v - pad) + dx;
          const double sy = static_cast<double>(oy * cfg.stride + u - pad) + dy;
          const BilinearTaps tap = taps_at(sx, sy, cfg.W, cfg.H);
          for (int64_t m = 0; m < cfg.a_i; ++m) {
            cols[((m * cfg.k + u) * cfg.k + v) * L + oy * wo + ox] =
                taps_value(child + m * cfg.H * cfg.W, cfg.W, tap);
          }
        }
      }
    }
  }
}

}  // namespace

Var conv_capsule_project(Tape& t, Var children, Var kernel, const LayerConfig& cfg) {
  cfg.validate();
  const Tensor& ch = t.val(children);
  const Tensor& kr = t.val(kernel);
  check_children(ch, cfg);
  check_kernel(kr, cfg);
  const int64_t ho = cfg.out_h(), wo = cfg.out_w(), L = ho * wo;
  const int64_t ck = static_cast<int64_t>(cfg.a_i) * cfg.k * cfg.k;

  auto cols_all = std::make_shared<std::vector<double>>(static_cast<size_t>(cfg.c_i * ck * L));
  Tensor out({cfg.c_i, cfg.c_j, cfg.a_j, ho, wo});
  std::vector<double> wpack(static_cast<size_t>(cfg.a_j * ck));
  for (int64_t i = 0; i < cfg.c_i; ++i) {
    double* cols = cols_all->data() + i * ck * L;
    caps_im2col(ch.data.data() + i * cfg.a_i * cfg.H * cfg.W, cfg, cols);
    for (int64_t j = 0; j < cfg.c_j; ++j) {
      std::fill(wpack.begin(), wpack.end(), 0.0);
      pack_weights(kr, cfg, j, i, wpack.data());
      matmul_acc(wpack.data(), cols, out.data.data() + ((i * cfg.c_j + j) * cfg.a_j) * L, cfg.a_j, ck, L);
    }
  }
  LayerConfig c = cfg;
  return t.emit(std::move(out), {children, kernel}, [children, kernel, c, cols_all, ck, L](Tape& tp, Var self) {
    const std::vector<double>& g = tp.grad(self);
    const bool need_ch = tp.tracked(children);
    const bool need_k = tp.tracked(kernel);
    std::vector<double> wpack(static_cast<size_t>(c.a_j * ck));
    std::vector<double> wgrad(static_cast<size_t>(c.a_j * ck));
    std::vector<double> dcols(static_cast<size_t>(ck * L));
    for (int64_t i = 0; i < c.c_i; ++i) {
      const double* cols = cols_all->data() + i * ck * L;
      if (need_ch) std::fill(dcols.begin(), dcols.end(), 0.0);
      for (int64_t j = 0; j < c.c_j; ++j) {
        const double* gblock = g.data() + ((i * c.c_j + j) * c.a_j) * L;
        if (need_k) {
          std::fill(wgrad.begin(), wgrad.end(), 0.0);
          matmul_abt_acc(gblock, cols, wgrad.data(), c.a_j, L, ck);
          unpack_weight_grad(wgrad.data(), c, j, i, tp.grad_buf(kernel));
        }
        if (need_ch) {
          std::fill(wpack.begin(), wpack.end(), 0.0);
          pack_weights(tp.val(kernel), c, j, i, wpack.data());
          matmul_atb_acc(wpack.data(), gblock, dcols.data(), c.a_j, ck, L);
        }
      }
      if (need_ch) {
        caps_col2im_acc(dcols.data(), c,
                        tp.grad_buf(children).data() + i * c.a_i * c.H * c.W);
      }
    }
  });
}

Var deform_capsule_project(Tape& t, Var children, Var kernel, Var offsets, const LayerConfig& cfg) {
  cfg.validate();
  const Tensor& ch = t.val(children);
  const Tensor& kr = t.val(kernel);
  const Tensor& off = t.val(offsets);
  check_children(ch, cfg);
  check_kernel(kr, cfg);
  const std::vector<int64_t> off_want{cfg.c_j, cfg.k, cfg.k, 2};
  if (off.shape != off_want) {
    throw std::invalid_argument("offsets shape " + shape_str(off.shape) + " does not match config " +
                                shape_str(off_want));
  }
  const int64_t ho = cfg.out_h(), wo = cfg.out_w(), L = ho * wo;
  const int64_t ck = static_cast<int64_t>(cfg.a_i) * cfg.k * cfg.k;

  // Sampled columns depend on the parent type through its offsets.
  auto cols_all = std::make_shared<std::vector<double>>(static_cast<size_t>(cfg.c_i * cfg.c_j * ck * L));
  Tensor out({cfg.c_i, cfg.c_j, cfg.a_j, ho, wo});
  std::vector<double> wpack(static_cast<size_t>(cfg.a_j * ck));
  for (int64_t i = 0; i < cfg.c_i; ++i) {
    const double* child = ch.data.data() + i * cfg.a_i * cfg.H * cfg.W;
    for (int64_t j = 0; j < cfg.c_j; ++j) {
      double* cols = cols_all->data() + (i * cfg.c_j + j) * ck * L;
      caps_im2col_deform(child, cfg, off.data.data() + j * cfg.k * cfg.k * 2, cols);
      std::fill(wpack.begin(), wpack.end(), 0.0);
      pack_weights(kr, cfg, j, i, wpack.data());
      matmul_acc(wpack.data(), cols, out.data.data() + ((i * cfg.c_j + j) * cfg.a_j) * L, cfg.a_j, ck, L);
    }
  }
  LayerConfig c = cfg;
  return t.emit(
      std::move(out), {children, kernel, offsets},
      [children, kernel, offsets, c, cols_all, ck, L](Tape& tp, Var self) {
        const std::vector<double>& g = tp.grad(self);
        const Tensor& ch2 = tp.val(children);
        const Tensor& off2 = tp.val(offsets);
        const bool need_ch = tp.tracked(children);
        const bool need_k = tp.tracked(kernel);
        const bool need_off = tp.tracked(offsets);
        const int64_t ho = c.out_h(), wo = c.out_w();
        const int64_t pad = c.pad();
        std::vector<double> wpack(static_cast<size_t>(c.a_j * ck));
        std::vector<double> wgrad(static_cast<size_t>(c.a_j * ck));
        std::vector<double> dcols(static_cast<size_t>(ck * L));
        for (int64_t i = 0; i < c.c_i; ++i) {
          const double* child = ch2.data.data() + i * c.a_i * c.H * c.W;
          for (int64_t j = 0; j < c.c_j; ++j) {
            const double* cols = cols_all->data() + (i * c.c_j + j) * ck * L;
            const double* gblock = g.data() + ((i * c.c_j + j) * c.a_j) * L;
            if (need_k) {
              std::fill(wgrad.begin(), wgrad.end(), 0.0);
              matmul_abt_acc(gblock, cols, wgrad.data(), c.a_j, L, ck);
              unpack_weight_grad(wgrad.data(), c, j, i, tp.grad_buf(kernel));
            }
            if (!need_ch && !need_off) continue;
            std::fill(dcols.begin(), dcols.end(), 0.0);
            std::fill(wpack.begin(), wpack.end(), 0.0);
            pack_weights(tp.val(kernel), c, j, i, wpack.data());
            matmul_atb_acc(wpack.data(), gblock, dcols.data(), c.a_j, ck, L);
            // Distribute column grads to the 4 corners and to the offsets.
            const double* off_j = off2.data.data() + j * c.k * c.k * 2;
            double* goff = need_off ? tp.grad_buf(offsets).data() + j * c.k * c.k * 2 : nullptr;
            double* gchild = need_ch ? tp.grad_buf(children).data() + i * c.a_i * c.H * c.W : nullptr;
            for (int64_t u = 0; u < c.k; ++u) {
              for (int64_t v = 0; v < c.k; ++v) {
                const double dx = off_j[(u * c.k + v) * 2 + 0];
                const double dy = off_j[(u * c.k + v) * 2 + 1];
                double acc_dx = 0.0, acc_dy = 0.0;
                for (int64_t oy = 0; oy < ho; ++oy) {
                  for (int64_t ox = 0; ox < wo; ++ox) {
                    const double sx = static_cast<double>(ox * c.stride + v - pad) + dx;
                    const double sy = static_cast<double>(oy * c.stride + u - pad) + dy;
                    const BilinearTaps tap = taps_at(sx, sy, c.W, c.H);
                    for (int64_t m = 0; m < c.a_i; ++m) {
                      const double gc = dcols[static_cast<size_t>(((m * c.k + u) * c.k + v) * L + oy * wo + ox)];
                      if (gc == 0.0) continue;
                      const double* plane = child + m * c.H * c.W;
                      const double v00 = tap.in00 ? plane[tap.y0 * c.W + tap.x0] : 0.0;
                      const double v01 = tap.in01 ? plane[tap.y0 * c.W + tap.x0 + 1] : 0.0;
                      const double v10 = tap.in10 ? plane[(tap.y0 + 1) * c.W + tap.x0] : 0.0;
                      const double v11 = tap.in11 ? plane[(tap.y0 + 1) * c.W + tap.x0 + 1] : 0.0;
                      if (gchild) {
                        double* gp = gchild + m * c.H * c.W;
                        if (tap.in00) gp[tap.y0 * c.W + tap.x0] += gc * (1.0 - tap.fy) * (1.0 - tap.fx);
                        if (tap.in01) gp[tap.y0 * c.W + tap.x0 + 1] += gc * (1.0 - tap.fy) * tap.fx;
                        if (tap.in10) gp[(tap.y0 + 1) * c.W + tap.x0] += gc * tap.fy * (1.0 - tap.fx);
                        if (tap.in11) gp[(tap.y0 + 1) * c.W + tap.x0 + 1] += gc * tap.fy * tap.fx;
                      }
                      if (goff) {
                        acc_dx += gc * ((1.0 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
                        acc_dy += gc * ((1.0 - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
                      }
                    }
                  }
                }
                if (goff) {
                  goff[(u * c.k + v) * 2 + 0] += acc_dx;
                  goff[(u * c.k + v) * 2 + 1] += acc_dy;
                }
              }
            }
          }
        }
      });
}

// ---- parameter arithmetic -----------------------------------------------------

CountMode count_mode_from_string(const std::string& s) {
  if (s == "fully_connected") return CountMode::fully_connected;
  if (s == "conv_caps") return CountMode::conv_caps;
  if (s == "deform_caps") return CountMode::deform_caps;
  if (s == "splitcaps_detect") return CountMode::splitcaps_detect;
  if (s == "splitcaps_imagenet") return CountMode::splitcaps_imagenet;
  throw std::invalid_argument("unknown count mode: " + s);
}

std::string to_string(CountMode m) {
  switch (m) {
    case CountMode::fully_connected: return "fully_connected";
    case CountMode::conv_caps: return "conv_caps";
    case CountMode::deform_caps: return "deform_caps";
    case CountMode::splitcaps_detect: return "splitcaps_detect";
    case CountMode::splitcaps_imagenet: return "splitcaps_imagenet";
  }
  return "?";
}

namespace {

void require(int64_t v, const char* name) {
  if (v <= 0) throw std::invalid_argument(std::string("param_count: missing config field ") + name);
}

}  // namespace

ParamCountResult param_count(CountMode mode, const CountConfig& cfg, int64_t K) {
  ParamCountResult r;
  const bool splitcaps = mode == CountMode::splitcaps_detect || mode == CountMode::splitcaps_imagenet;
  const bool detection = mode == CountMode::splitcaps_detect;
  int64_t c_j = cfg.c_j;
  if (splitcaps) {
    require(K, "classes");
    c_j = K;
  } else {
    require(cfg.c_j, "c_j");
  }
  require(cfg.a_i, "a_i");
  require(cfg.a_j, "a_j");

  switch (mode) {
    case CountMode::fully_connected:
      require(cfg.H, "H");
      require(cfg.W, "W");
      require(cfg.c_i, "c_i");
      r.parameters = cfg.H * cfg.W * cfg.c_i * cfg.a_i * c_j * cfg.a_j;
      break;
    case CountMode::conv_caps:
      require(cfg.k, "k");
      r.parameters = cfg.k * cfg.k * cfg.a_i * c_j * cfg.a_j;
      break;
    case CountMode::deform_caps:
    case CountMode::splitcaps_detect:
    case CountMode::splitcaps_imagenet:
      require(cfg.k, "k");
      r.parameters = 2 * cfg.k * cfg.k * cfg.a_i * c_j * cfg.a_j;
      break;
  }

  require(cfg.batch, "batch");
  require(cfg.c_i, "c_i");
  int64_t bytes = cfg.batch * cfg.c_i * c_j * cfg.a_j * 4;
  if (detection) {
    require(cfg.grid_h, "grid_h");
    require(cfg.grid_w, "grid_w");
    bytes *= cfg.grid_h * cfg.grid_w;
  }
  r.intermediate_bytes = bytes;
  return r;
}

std::vector<PaperTableRow> paper_param_table() {
  std::vector<PaperTableRow> rows;
  {
    CountConfig c;
    c.H = 128; c.W = 128; c.c_i = 32; c.a_i = 8; c.c_j = 10; c.a_j = 16; c.batch = 32;
    rows.push_back({"fully-connected 128x128 grid, 10 classes", CountMode::fully_connected,
                    param_count(CountMode::fully_connected, c, 0)});
  }
  {
    CountConfig c;
    c.k = 5; c.c_i = 32; c.a_i = 8; c.c_j = 10; c.a_j = 16; c.batch = 32;
    rows.push_back({"deformable capsules, 10 classes", CountMode::deform_caps,
                    param_count(CountMode::deform_caps, c, 0)});
    rows.push_back({"convolutional capsules, 10 classes", CountMode::conv_caps,
                    param_count(CountMode::conv_caps, c, 0)});
  }
  {
    CountConfig c;
    c.k = 5; c.c_i = 32; c.a_i = 8; c.a_j = 16; c.batch = 32; c.grid_h = 128; c.grid_w = 128;
    rows.push_back({"SplitCaps detection, 80 classes, 128x128 grid", CountMode::splitcaps_detect,
                    param_count(CountMode::splitcaps_detect, c, 80)});
  }
  {
    CountConfig c;
    c.k = 5; c.c_i = 32; c.a_i = 8; c.a_j = 16; c.batch = 32;
    rows.push_back({"SplitCaps classification, 1000 classes", CountMode::splitcaps_imagenet,
                    param_count(CountMode::splitcaps_imagenet, c, 1000)});
  }
  return rows;
}

}  // namespace dcaps
