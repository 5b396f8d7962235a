#pragma once

#include "deformcaps/autograd.hpp"
#include "deformcaps/geometry.hpp"

namespace dcaps {

/// Objective weights. lambda_r follows a two-phase schedule: initial value
/// for the first half of training, late value from the half-way step on.
struct LossWeights {
  double lambda_r_initial = 0.1;
  double lambda_r_late = 2.0;
  double lambda_s = 0.1;
  double lambda_o = 1.0;
  double alpha = 2.0;
  double beta = 4.0;

  double lambda_r(double progress) const { return progress < 0.5 ? lambda_r_initial : lambda_r_late; }
};

/// Penalty-reduced pixelwise focal loss over the class heatmap, normalized
/// by max(P, 1). Predictions at exactly 0 or 1 are clamped to [eps, 1-eps]
/// with eps = 1e-7 (counted and reported on stderr).
Var focal_heatmap_loss(Tape& t, Var H_pred, const Tensor& H_gt, double alpha, double beta, int64_t P);

/// 2*sum(r*m) / (sum(r^2) + sum(m^2)); defined as 1 when both are all-zero.
Var dice_coefficient(Tape& t, Var mask_pred, const Tensor& mask_gt);

/// 1 - dice_coefficient, so all objective terms minimize consistently.
Var dice_loss(Tape& t, Var mask_pred, const Tensor& mask_gt);

/// Mean L1 between predictions and targets over the P masked center cells
/// (both coordinates summed per center). Zero when P == 0.
Var offset_loss(Tape& t, Var O_pred, const RegressionTargets& targets);
Var size_loss(Tape& t, Var S_pred, const RegressionTargets& targets);

/// L_h + lambda_r(progress) * L_r + lambda_s * L_s + lambda_o * L_o.
double total_loss(double lh, double lr, double ls, double lo, const LossWeights& w, double progress);
Var total_loss(Tape& t, Var lh, Var lr, Var ls, Var lo, const LossWeights& w, double progress);

}  // namespace dcaps
