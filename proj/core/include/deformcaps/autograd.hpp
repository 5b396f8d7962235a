#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "deformcaps/tensor.hpp"

namespace dcaps {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  int32_t i = -1;
  bool valid() const { return i >= 0; }
};

/// Reverse-mode tape. Ops append nodes in execution order, so the reverse
/// of that order is a valid topological order for backprop. Construction is
/// single-threaded per tape; finished tapes may be read from any thread.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var)>;

  /// Tracked leaf (parameter or input that needs a gradient).
  Var leaf(const Tensor& t);
  Var leaf(Tensor&& t);
  /// Untracked constant; backward never flows into it.
  Var constant(const Tensor& t);
  Var constant(Tensor&& t);

  /// Appends an op result. `tracked` is derived from the parents; `back`
  /// is invoked during backward() with this tape and the node's own Var.
  Var emit(Tensor value, std::initializer_list<Var> parents, BackwardFn back);
  Var emit(Tensor value, const std::vector<Var>& parents, BackwardFn back);

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.i)].value; }
  bool tracked(Var v) const { return nodes_[static_cast<size_t>(v.i)].tracked; }

  /// Gradient buffer of a node (valid after backward; zeros before).
  const std::vector<double>& grad(Var v) const;
  Tensor grad_tensor(Var v) const;

  /// Adds g (length numel) into v's gradient if v is tracked.
  void accumulate(Var v, const double* g, int64_t n);
  void accumulate_at(Var v, int64_t index, double g);
  std::vector<double>& grad_buf(Var v);

  /// Seeds d(root)/d(root) = 1 and runs all backward closures in reverse
  /// creation order. Root must be scalar (numel 1).
  void backward(Var root);

  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn back;
    bool tracked = false;
  };
  Var push(Tensor value, bool tracked, BackwardFn back);
  std::vector<Node> nodes_;
};

// ---- elementwise and reduction ops ----------------------------------------
// Binary ops broadcast per broadcast_shape (right-aligned, dims match or 1).

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var div(Tape& t, Var a, Var b);

Var add_const(Tape& t, Var a, double c);
Var mul_const(Tape& t, Var a, double c);
/// c - a
Var rsub_const(Tape& t, Var a, double c);

Var exp(Tape& t, Var a);
Var log(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var relu(Tape& t, Var a);
Var abs(Tape& t, Var a);
/// x^p with d/dx = p x^(p-1). Fractional p requires x > 0.
Var pow_const(Tape& t, Var a, double p);
/// Clamps to [lo, hi]; gradient passes through strictly inside the range.
Var clamp(Tape& t, Var a, double lo, double hi);

/// Numerically stable softmax along `axis`; outputs are strictly positive
/// and sum to 1 along the axis.
Var softmax(Tape& t, Var a, int axis);

Var sum(Tape& t, Var a, int axis, bool keepdim = false);
Var mean(Tape& t, Var a, int axis, bool keepdim = false);
/// Max along axis; gradient routes to the first maximal element.
Var max(Tape& t, Var a, int axis, bool keepdim = false);
Var sum_all(Tape& t, Var a);

// ---- structural ops --------------------------------------------------------

Var reshape(Tape& t, Var a, std::vector<int64_t> shape);
Var permute(Tape& t, Var a, const std::vector<int>& dims);
Var concat(Tape& t, const std::vector<Var>& parts, int axis);
/// Gathers rows (axis 0); backward scatter-adds.
Var select_rows(Tape& t, Var a, std::vector<int64_t> rows);

// ---- linear algebra ---------------------------------------------------------

/// [m,n] x [n,p] -> [m,p]
Var matmul(Tape& t, Var a, Var b);

/// 2-D convolution: x [Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout].
/// Pass an invalid Var for no bias.
Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad);

// ---- raw kernels (shared by ops and by training code) -----------------------

/// C[m,p] += A[m,n] * B[n,p]
void matmul_acc(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t p);
/// C[m,p] += A[m,n] * B[p,n]^T
void matmul_abt_acc(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t p);
/// C[n,p] += A[m,n]^T * B[m,p]
void matmul_atb_acc(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t p);

// ---- gradient checking -------------------------------------------------------

/// A differentiable scalar function: returns (value, gradient w.r.t. x).
using ScalarFn = std::function<std::pair<double, Tensor>(const Tensor&)>;

/// Central-difference gradient check. Returns
///   max_i |analytic_i - central_i| / max(1e-8, |analytic_i| + |central_i|).
/// Throws std::runtime_error naming the coordinate if f evaluates non-finite.
double grad_check(const ScalarFn& f, const Tensor& x, double h);

}  // namespace dcaps
