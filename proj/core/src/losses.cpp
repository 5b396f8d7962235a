#include "deformcaps/losses.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace dcaps {

namespace {
constexpr double kEps = 1e-7;
}

Var focal_heatmap_loss(Tape& t, Var H_pred, const Tensor& H_gt, double alpha, double beta, int64_t P) {
  const Tensor& hp = t.val(H_pred);
  if (hp.shape != H_gt.shape) {
    throw std::invalid_argument("focal loss shape mismatch: " + shape_str(hp.shape) + " vs " +
                                shape_str(H_gt.shape));
  }
  int64_t boundary = 0;
  for (double v : hp.data) {
    if (v <= 0.0 || v >= 1.0) ++boundary;
  }
  if (boundary > 0) {
    std::fprintf(stderr, "warning: focal loss clamped %lld prediction(s) to [%g, %g]\n",
                 static_cast<long long>(boundary), kEps, 1.0 - kEps);
  }
  Tensor pos_mask(H_gt.shape);
  Tensor neg_weight(H_gt.shape);
  for (int64_t i = 0; i < H_gt.numel(); ++i) {
    const double h = H_gt.data[static_cast<size_t>(i)];
    if (h == 1.0) {
      pos_mask.data[static_cast<size_t>(i)] = 1.0;
    } else {
      neg_weight.data[static_cast<size_t>(i)] = std::pow(1.0 - h, beta);
    }
  }
  Var hc = clamp(t, H_pred, kEps, 1.0 - kEps);
  Var pos_term = mul(t, t.constant(std::move(pos_mask)),
                     mul(t, pow_const(t, rsub_const(t, hc, 1.0), alpha), log(t, hc)));
  Var neg_term = mul(t, t.constant(std::move(neg_weight)),
                     mul(t, pow_const(t, hc, alpha), log(t, rsub_const(t, hc, 1.0))));
  Var total = add(t, sum_all(t, pos_term), sum_all(t, neg_term));
  return mul_const(t, total, -1.0 / static_cast<double>(std::max<int64_t>(P, 1)));
}

Var dice_coefficient(Tape& t, Var mask_pred, const Tensor& mask_gt) {
  const Tensor& r = t.val(mask_pred);
  if (r.shape != mask_gt.shape) {
    throw std::invalid_argument("dice shape mismatch: " + shape_str(r.shape) + " vs " +
                                shape_str(mask_gt.shape));
  }
  double m2 = 0.0;
  for (double v : mask_gt.data) m2 += v * v;
  double r2 = 0.0;
  for (double v : r.data) r2 += v * v;
  if (m2 + r2 == 0.0) return t.constant(Tensor::scalar(1.0));  // empty vs empty
  Var num = mul_const(t, sum_all(t, mul(t, mask_pred, t.constant(mask_gt))), 2.0);
  Var den = add_const(t, sum_all(t, pow_const(t, mask_pred, 2.0)), m2);
  return div(t, num, den);
}

Var dice_loss(Tape& t, Var mask_pred, const Tensor& mask_gt) {
  return rsub_const(t, dice_coefficient(t, mask_pred, mask_gt), 1.0);
}

namespace {

Var masked_l1(Tape& t, Var pred, const Tensor& target, const Tensor& mask, int64_t P) {
  const Tensor& p = t.val(pred);
  if (p.shape != target.shape) {
    throw std::invalid_argument("loss shape mismatch: " + shape_str(p.shape) + " vs " +
                                shape_str(target.shape));
  }
  if (P == 0) return t.constant(Tensor::scalar(0.0));
  Var diff = abs(t, sub(t, pred, t.constant(target)));
  Var masked = mul(t, diff, t.constant(mask));  // [H,W] broadcasts over the leading 2
  return mul_const(t, sum_all(t, masked), 1.0 / static_cast<double>(P));
}

}  // namespace

Var offset_loss(Tape& t, Var O_pred, const RegressionTargets& targets) {
  return masked_l1(t, O_pred, targets.offsets, targets.mask, targets.P);
}

Var size_loss(Tape& t, Var S_pred, const RegressionTargets& targets) {
  return masked_l1(t, S_pred, targets.sizes, targets.mask, targets.P);
}

double total_loss(double lh, double lr, double ls, double lo, const LossWeights& w, double progress) {
  if (progress < 0.0 || progress > 1.0) throw std::invalid_argument("progress must be in [0,1]");
  return lh + w.lambda_r(progress) * lr + w.lambda_s * ls + w.lambda_o * lo;
}

Var total_loss(Tape& t, Var lh, Var lr, Var ls, Var lo, const LossWeights& w, double progress) {
  if (progress < 0.0 || progress > 1.0) throw std::invalid_argument("progress must be in [0,1]");
  Var acc = add(t, lh, mul_const(t, lr, w.lambda_r(progress)));
  acc = add(t, acc, mul_const(t, ls, w.lambda_s));
  return add(t, acc, mul_const(t, lo, w.lambda_o));
}

}  // namespace dcaps
