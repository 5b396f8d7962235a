#pragma once

#include <string>
#include <vector>

#include "deformcaps/autograd.hpp"
#include "deformcaps/tensor.hpp"

namespace dcaps {

/// Child-to-parent capsule layer geometry.
struct LayerConfig {
  int c_i = 0;  // child capsule types
  int a_i = 0;  // atoms per child
  int c_j = 0;  // parent capsule types
  int a_j = 0;  // atoms per parent
  int k = 0;    // kernel size (odd)
  int H = 0, W = 0;
  int stride = 1;

  void validate() const;
  int pad() const { return (k - 1) / 2; }
  int out_h() const { return (H + 2 * pad() - k) / stride + 1; }
  int out_w() const { return (W + 2 * pad() - k) / stride + 1; }
};

/// Projection weights, one [a_j, a_i, k, k] block per (parent type, child type).
struct ProjectionKernel {
  Tensor weights;  // [c_j, a_j, c_i, a_i, k, k]
};

/// Learned spatial sampling offsets, one (dx, dy) per parent type per tap.
struct OffsetKernel {
  Tensor offsets;  // [c_j, k, k, 2], zero-initialized
};

/// Per-child-type projections toward each parent: [c_i, c_j, a_j, H', W'].
/// Child projections are kept separate; routing combines them.
Var conv_capsule_project(Tape& t, Var children, Var kernel, const LayerConfig& cfg);

/// Same contraction, but child values at tap (u, v) for parent j are read by
/// bilinear interpolation at the tap position displaced by offsets[j,u,v].
/// Gradients flow to weights, offsets, and children.
Var deform_capsule_project(Tape& t, Var children, Var kernel, Var offsets, const LayerConfig& cfg);

/// Four-neighbor bilinear interpolation with zero padding outside the grid.
/// grid is [c, a, H, W]; xy is a [2] tensor (x = column, y = row). The result
/// is differentiable in both the grid values and the sample position.
Var bilinear_sample(Tape& t, Var grid, Var xy, int type, int atom);

/// Plain forward evaluation of the same interpolation.
double bilinear_at(const Tensor& grid, double x, double y, int type, int atom);

// ---- parameter and memory arithmetic ----------------------------------------

enum class CountMode { fully_connected, conv_caps, deform_caps, splitcaps_detect, splitcaps_imagenet };

CountMode count_mode_from_string(const std::string& s);
std::string to_string(CountMode m);

struct CountConfig {
  int64_t H = 0, W = 0;              // child grid (fully-connected layer)
  int64_t c_i = 0, a_i = 0, c_j = 0, a_j = 0, k = 0;
  int64_t batch = 32;
  int64_t grid_h = 0, grid_w = 0;    // detection output grid
};

struct ParamCountResult {
  int64_t parameters = 0;
  int64_t intermediate_bytes = 0;
};

/// Closed-form layer parameter counts and intermediate-representation bytes:
///   fully-connected: H*W*c_i*a_i*c_j*a_j
///   conv capsules:   k^2*a_i*c_j*a_j
///   deformable:      2*k^2*a_i*c_j*a_j
/// Intermediates are batch*(grid_h*grid_w when detection)*c_i*c_j*a_j*4 bytes.
/// SplitCaps modes substitute c_j = K. Missing fields throw, naming the field.
ParamCountResult param_count(CountMode mode, const CountConfig& cfg, int64_t K);

struct PaperTableRow {
  std::string label;
  CountMode mode;
  ParamCountResult result;
};

/// The five reference scenarios used in the parameter-arithmetic discussion.
std::vector<PaperTableRow> paper_param_table();

}  // namespace dcaps
