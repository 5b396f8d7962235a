#include "deformcaps/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>

namespace dcaps {

namespace {

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Per-out-dim strides of an operand under broadcasting (0 where the operand
// dim is 1 and the output dim is larger).
std::vector<int64_t> bcast_strides(const std::vector<int64_t>& in_shape, const std::vector<int64_t>& out_shape) {
  const size_t r = out_shape.size();
  const size_t pad = r - in_shape.size();
  const std::vector<int64_t> st = strides_of(in_shape);
  std::vector<int64_t> out(r, 0);
  for (size_t i = pad; i < r; ++i) {
    const int64_t d = in_shape[i - pad];
    out[i] = (d == 1 && out_shape[i] != 1) ? 0 : st[i - pad];
  }
  return out;
}

// Walks the output index space of a broadcast binary op, yielding
// (out_offset, a_offset, b_offset).
template <class F>
void for_each_bcast(const std::vector<int64_t>& out_shape, const std::vector<int64_t>& a_st,
                    const std::vector<int64_t>& b_st, F&& f) {
  const int r = static_cast<int>(out_shape.size());
  const int64_t total = Tensor::numel_of(out_shape);
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t ao = 0, bo = 0;
  for (int64_t lin = 0;;) {
    f(lin, ao, bo);
    if (++lin == total) break;
    for (int d = r - 1; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      ao += a_st[static_cast<size_t>(d)];
      bo += b_st[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      ao -= a_st[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      bo -= b_st[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

// Decomposes a shape around `axis` into (outer, n, inner).
void axis_split(const std::vector<int64_t>& shape, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
  if (axis < 0) axis += static_cast<int>(shape.size());
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  outer = 1;
  inner = 1;
  n = shape[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

std::vector<int64_t> drop_axis(const std::vector<int64_t>& shape, int axis, bool keepdim) {
  int ax = axis < 0 ? axis + static_cast<int>(shape.size()) : axis;
  std::vector<int64_t> out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i == ax) {
      if (keepdim) out.push_back(1);
    } else {
      out.push_back(shape[static_cast<size_t>(i)]);
    }
  }
  if (out.empty()) out.push_back(1);
  return out;
}

void transpose2d(const double* src, double* dst, int64_t rows, int64_t cols) {
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

}  // namespace

// ---- Tape -------------------------------------------------------------------

Var Tape::push(Tensor value, bool tracked, BackwardFn back) {
  Node n;
  n.value = std::move(value);
  n.tracked = tracked;
  if (tracked) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(const Tensor& t) { return push(t, true, nullptr); }
Var Tape::leaf(Tensor&& t) { return push(std::move(t), true, nullptr); }
Var Tape::constant(const Tensor& t) { return push(t, false, nullptr); }
Var Tape::constant(Tensor&& t) { return push(std::move(t), false, nullptr); }

Var Tape::emit(Tensor value, std::initializer_list<Var> parents, BackwardFn back) {
  bool tracked = false;
  for (Var p : parents) {
    if (p.valid() && nodes_[static_cast<size_t>(p.i)].tracked) tracked = true;
  }
  return push(std::move(value), tracked, std::move(back));
}

Var Tape::emit(Tensor value, const std::vector<Var>& parents, BackwardFn back) {
  bool tracked = false;
  for (Var p : parents) {
    if (p.valid() && nodes_[static_cast<size_t>(p.i)].tracked) tracked = true;
  }
  return push(std::move(value), tracked, std::move(back));
}

const std::vector<double>& Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<size_t>(v.i)];
  if (n.grad.size() != n.value.data.size()) {
    throw std::logic_error("grad() requested before backward(), or for an untracked node");
  }
  return n.grad;
}

Tensor Tape::grad_tensor(Var v) const {
  const Node& n = nodes_[static_cast<size_t>(v.i)];
  return Tensor(n.value.shape, grad(v));
}

std::vector<double>& Tape::grad_buf(Var v) {
  Node& n = nodes_[static_cast<size_t>(v.i)];
  if (n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), 0.0);
  return n.grad;
}

void Tape::accumulate(Var v, const double* g, int64_t n) {
  if (!tracked(v)) return;
  std::vector<double>& buf = grad_buf(v);
  for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] += g[i];
}

void Tape::accumulate_at(Var v, int64_t index, double g) {
  if (!tracked(v)) return;
  grad_buf(v)[static_cast<size_t>(index)] += g;
}

void Tape::backward(Var root) {
  Node& r = nodes_[static_cast<size_t>(root.i)];
  if (r.value.numel() != 1) {
    throw std::invalid_argument("backward() root must be scalar, got shape " + shape_str(r.value.shape));
  }
  if (!r.tracked) throw std::invalid_argument("backward() root is not tracked");
  for (int32_t i = 0; i <= root.i; ++i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.tracked && n.grad.size() != n.value.data.size()) n.grad.assign(n.value.data.size(), 0.0);
  }
  r.grad[0] = 1.0;
  for (int32_t i = root.i; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.tracked && n.back) n.back(*this, Var{i});
  }
}

// ---- binary elementwise -------------------------------------------------------

namespace {

enum class BinOp { Add, Sub, Mul, Div };

Var binary_op(Tape& t, Var a, Var b, BinOp op) {
  const Tensor& ta = t.val(a);
  const Tensor& tb = t.val(b);
  const std::vector<int64_t> out_shape = broadcast_shape(ta.shape, tb.shape);
  const std::vector<int64_t> a_st = bcast_strides(ta.shape, out_shape);
  const std::vector<int64_t> b_st = bcast_strides(tb.shape, out_shape);
  Tensor out(out_shape);
  const double* pa = ta.data.data();
  const double* pb = tb.data.data();
  double* po = out.data.data();
  const bool same = ta.shape == tb.shape;
  if (same) {
    const int64_t n = ta.numel();
    switch (op) {
      case BinOp::Add: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinOp::Sub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinOp::Mul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
      case BinOp::Div: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
    }
  } else {
    for_each_bcast(out_shape, a_st, b_st, [&](int64_t o, int64_t ao, int64_t bo) {
      switch (op) {
        case BinOp::Add: po[o] = pa[ao] + pb[bo]; break;
        case BinOp::Sub: po[o] = pa[ao] - pb[bo]; break;
        case BinOp::Mul: po[o] = pa[ao] * pb[bo]; break;
        case BinOp::Div: po[o] = pa[ao] / pb[bo]; break;
      }
    });
  }
  return t.emit(std::move(out), {a, b}, [a, b, op, out_shape, a_st, b_st](Tape& tp, Var self) {
    const std::vector<double>& g = tp.grad(self);
    const Tensor& ta2 = tp.val(a);
    const Tensor& tb2 = tp.val(b);
    const bool need_a = tp.tracked(a);
    const bool need_b = tp.tracked(b);
    double* ga = need_a ? tp.grad_buf(a).data() : nullptr;
    double* gb = need_b ? tp.grad_buf(b).data() : nullptr;
    const double* pa2 = ta2.data.data();
    const double* pb2 = tb2.data.data();
    for_each_bcast(out_shape, a_st, b_st, [&](int64_t o, int64_t ao, int64_t bo) {
      const double go = g[static_cast<size_t>(o)];
      switch (op) {
        case BinOp::Add:
          if (need_a) ga[ao] += go;
          if (need_b) gb[bo] += go;
          break;
        case BinOp::Sub:
          if (need_a) ga[ao] += go;
          if (need_b) gb[bo] -= go;
          break;
        case BinOp::Mul:
          if (need_a) ga[ao] += go * pb2[bo];
          if (need_b) gb[bo] += go * pa2[ao];
          break;
        case BinOp::Div:
          if (need_a) ga[ao] += go / pb2[bo];
          if (need_b) gb[bo] -= go * pa2[ao] / (pb2[bo] * pb2[bo]);
          break;
      }
    });
  });
}

}  // namespace

Var add(Tape& t, Var a, Var b) { return binary_op(t, a, b, BinOp::Add); }
Var sub(Tape& t, Var a, Var b) { return binary_op(t, a, b, BinOp::Sub); }
Var mul(Tape& t, Var a, Var b) { return binary_op(t, a, b, BinOp::Mul); }
Var div(Tape& t, Var a, Var b) { return binary_op(t, a, b, BinOp::Div); }

// ---- scalar-const and unary ----------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Var unary_op(Tape& t, Var a, Fwd&& fwd, Bwd&& bwd_factory) {
  const Tensor& ta = t.val(a);
  Tensor out(ta.shape);
  const int64_t n = ta.numel();
  for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = fwd(ta.data[static_cast<size_t>(i)]);
  return t.emit(std::move(out), {a}, bwd_factory());
}

}  // namespace

Var add_const(Tape& t, Var a, double c) {
  return unary_op(t, a, [c](double x) { return x + c; }, [a]() {
    return [a](Tape& tp, Var self) {
      const std::vector<double>& g = tp.grad(self);
      tp.accumulate(a, g.data(), static_cast<int64_t>(g.size()));
    };
  });
}

Var mul_const(Tape& t, Var a, double c) {
  return unary_op(t, a, [c](double x) { return x * c; }, [a, c]() {
    return [a, c](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    };
  });
}

Var rsub_const(Tape& t, Var a, double c) {
  return unary_op(t, a, [c](double x) { return c - x; }, [a]() {
    return [a](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
    };
  });
}

Var exp(Tape& t, Var a) {
  return unary_op(t, a, [](double x) { return std::exp(x); }, [a]() {
    return [a](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      const Tensor& out = tp.val(self);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out.data[i];
    };
  });
}

Var log(Tape& t, Var a) {
  return unary_op(t, a, [](double x) { return std::log(x); }, [a]() {
    return [a](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      const Tensor& in = tp.val(a);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / in.data[i];
    };
  });
}

Var sigmoid(Tape& t, Var a) {
  return unary_op(t, a, [](double x) { return sigmoid_scalar(x); }, [a]() {
    return [a](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      const Tensor& out = tp.val(self);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out.data[i] * (1.0 - out.data[i]);
    };
  });
}

Var relu(Tape& t, Var a) {
  return unary_op(t, a, [](double x) { return x > 0.0 ? x : 0.0; }, [a]() {
    return [a](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      const Tensor& in = tp.val(a);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) {
        if (in.data[i] > 0.0) ga[i] += g[i];
      }
    };
  });
}

Var abs(Tape& t, Var a) {
  return unary_op(t, a, [](double x) { return std::fabs(x); }, [a]() {
    return [a](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      const Tensor& in = tp.val(a);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) {
        const double s = in.data[i] > 0.0 ? 1.0 : (in.data[i] < 0.0 ? -1.0 : 0.0);
        ga[i] += s * g[i];
      }
    };
  });
}

Var pow_const(Tape& t, Var a, double p) {
  return unary_op(t, a, [p](double x) { return std::pow(x, p); }, [a, p]() {
    return [a, p](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      const Tensor& in = tp.val(a);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * p * std::pow(in.data[i], p - 1.0);
    };
  });
}

Var clamp(Tape& t, Var a, double lo, double hi) {
  return unary_op(t, a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); }, [a, lo, hi]() {
    return [a, lo, hi](Tape& tp, Var self) {
      if (!tp.tracked(a)) return;
      const std::vector<double>& g = tp.grad(self);
      const Tensor& in = tp.val(a);
      std::vector<double>& ga = tp.grad_buf(a);
      for (size_t i = 0; i < g.size(); ++i) {
        if (in.data[i] > lo && in.data[i] < hi) ga[i] += g[i];
      }
    };
  });
}

// ---- softmax and reductions ------------------------------------------------------

Var softmax(Tape& t, Var a, int axis) {
  const Tensor& ta = t.val(a);
  int64_t outer, n, inner;
  axis_split(ta.shape, axis, outer, n, inner);
  Tensor out(ta.shape);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (int64_t i = 0; i < n; ++i) m = std::max(m, ta.data[static_cast<size_t>(base + i * inner)]);
      double s = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double e = std::exp(ta.data[static_cast<size_t>(base + i * inner)] - m);
        out.data[static_cast<size_t>(base + i * inner)] = e;
        s += e;
      }
      for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(base + i * inner)] /= s;
    }
  }
  return t.emit(std::move(out), {a}, [a, outer, n, inner](Tape& tp, Var self) {
    if (!tp.tracked(a)) return;
    const std::vector<double>& g = tp.grad(self);
    const Tensor& s = tp.val(self);
    std::vector<double>& ga = tp.grad_buf(a);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * n * inner + in;
        double dot = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          const size_t k = static_cast<size_t>(base + i * inner);
          dot += g[k] * s.data[k];
        }
        for (int64_t i = 0; i < n; ++i) {
          const size_t k = static_cast<size_t>(base + i * inner);
          ga[k] += s.data[k] * (g[k] - dot);
        }
      }
    }
  });
}

Var sum(Tape& t, Var a, int axis, bool keepdim) {
  const Tensor& ta = t.val(a);
  int64_t outer, n, inner;
  axis_split(ta.shape, axis, outer, n, inner);
  Tensor out(drop_axis(ta.shape, axis, keepdim));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < n; ++i) {
      const int64_t base = (o * n + i) * inner;
      for (int64_t in = 0; in < inner; ++in) {
        out.data[static_cast<size_t>(o * inner + in)] += ta.data[static_cast<size_t>(base + in)];
      }
    }
  }
  return t.emit(std::move(out), {a}, [a, outer, n, inner](Tape& tp, Var self) {
    if (!tp.tracked(a)) return;
    const std::vector<double>& g = tp.grad(self);
    std::vector<double>& ga = tp.grad_buf(a);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t i = 0; i < n; ++i) {
        const int64_t base = (o * n + i) * inner;
        for (int64_t in = 0; in < inner; ++in) {
          ga[static_cast<size_t>(base + in)] += g[static_cast<size_t>(o * inner + in)];
        }
      }
    }
  });
}

Var mean(Tape& t, Var a, int axis, bool keepdim) {
  const Tensor& ta = t.val(a);
  int64_t outer, n, inner;
  axis_split(ta.shape, axis, outer, n, inner);
  Var s = sum(t, a, axis, keepdim);
  return mul_const(t, s, 1.0 / static_cast<double>(n));
}

Var max(Tape& t, Var a, int axis, bool keepdim) {
  const Tensor& ta = t.val(a);
  int64_t outer, n, inner;
  axis_split(ta.shape, axis, outer, n, inner);
  Tensor out(drop_axis(ta.shape, axis, keepdim));
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(outer * inner), 0);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      double best = -std::numeric_limits<double>::infinity();
      int64_t best_i = 0;
      for (int64_t i = 0; i < n; ++i) {
        const double v = ta.data[static_cast<size_t>((o * n + i) * inner + in)];
        if (v > best) {
          best = v;
          best_i = i;
        }
      }
      out.data[static_cast<size_t>(o * inner + in)] = best;
      (*arg)[static_cast<size_t>(o * inner + in)] = best_i;
    }
  }
  return t.emit(std::move(out), {a}, [a, arg, outer, n, inner](Tape& tp, Var self) {
    if (!tp.tracked(a)) return;
    const std::vector<double>& g = tp.grad(self);
    std::vector<double>& ga = tp.grad_buf(a);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t i = (*arg)[static_cast<size_t>(o * inner + in)];
        ga[static_cast<size_t>((o * n + i) * inner + in)] += g[static_cast<size_t>(o * inner + in)];
      }
    }
  });
}

Var sum_all(Tape& t, Var a) {
  const Tensor& ta = t.val(a);
  double s = 0.0;
  for (double v : ta.data) s += v;
  return t.emit(Tensor::scalar(s), {a}, [a](Tape& tp, Var self) {
    if (!tp.tracked(a)) return;
    const double g = tp.grad(self)[0];
    std::vector<double>& ga = tp.grad_buf(a);
    for (double& v : ga) v += g;
  });
}

// ---- structural -------------------------------------------------------------------

Var reshape(Tape& t, Var a, std::vector<int64_t> shape) {
  const Tensor& ta = t.val(a);
  if (Tensor::numel_of(shape) != ta.numel()) {
    throw std::invalid_argument("reshape " + shape_str(ta.shape) + " -> " + shape_str(shape) +
                                " changes element count");
  }
  Tensor out(std::move(shape), ta.data);
  return t.emit(std::move(out), {a}, [a](Tape& tp, Var self) {
    const std::vector<double>& g = tp.grad(self);
    tp.accumulate(a, g.data(), static_cast<int64_t>(g.size()));
  });
}

Var permute(Tape& t, Var a, const std::vector<int>& dims) {
  const Tensor& ta = t.val(a);
  const int r = ta.rank();
  if (static_cast<int>(dims.size()) != r) throw std::invalid_argument("permute dims rank mismatch");
  std::vector<int64_t> out_shape(static_cast<size_t>(r));
  const std::vector<int64_t> in_st = strides_of(ta.shape);
  std::vector<int64_t> mapped_st(static_cast<size_t>(r));
  for (int d = 0; d < r; ++d) {
    out_shape[static_cast<size_t>(d)] = ta.shape[static_cast<size_t>(dims[static_cast<size_t>(d)])];
    mapped_st[static_cast<size_t>(d)] = in_st[static_cast<size_t>(dims[static_cast<size_t>(d)])];
  }
  Tensor out(out_shape);
  const int64_t total = out.numel();
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t src = 0;
  for (int64_t lin = 0;;) {
    out.data[static_cast<size_t>(lin)] = ta.data[static_cast<size_t>(src)];
    if (++lin == total) break;
    for (int d = r - 1; d >= 0; --d) {
      ++idx[static_cast<size_t>(d)];
      src += mapped_st[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      src -= mapped_st[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return t.emit(std::move(out), {a}, [a, out_shape, mapped_st, r](Tape& tp, Var self) {
    if (!tp.tracked(a)) return;
    const std::vector<double>& g = tp.grad(self);
    std::vector<double>& ga = tp.grad_buf(a);
    const int64_t total2 = static_cast<int64_t>(g.size());
    std::vector<int64_t> idx2(static_cast<size_t>(r), 0);
    int64_t src = 0;
    for (int64_t lin = 0;;) {
      ga[static_cast<size_t>(src)] += g[static_cast<size_t>(lin)];
      if (++lin == total2) break;
      for (int d = r - 1; d >= 0; --d) {
        ++idx2[static_cast<size_t>(d)];
        src += mapped_st[static_cast<size_t>(d)];
        if (idx2[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
        src -= mapped_st[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
        idx2[static_cast<size_t>(d)] = 0;
      }
    }
  });
}

Var concat(Tape& t, const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  const Tensor& first = t.val(parts[0]);
  int ax = axis < 0 ? axis + first.rank() : axis;
  std::vector<int64_t> out_shape = first.shape;
  int64_t total_axis = 0;
  for (Var p : parts) {
    const Tensor& tp = t.val(p);
    if (tp.rank() != first.rank()) throw std::invalid_argument("concat rank mismatch");
    for (int d = 0; d < first.rank(); ++d) {
      if (d != ax && tp.shape[static_cast<size_t>(d)] != first.shape[static_cast<size_t>(d)]) {
        throw std::invalid_argument("concat shape mismatch: " + shape_str(first.shape) + " vs " +
                                    shape_str(tp.shape));
      }
    }
    total_axis += tp.shape[static_cast<size_t>(ax)];
  }
  out_shape[static_cast<size_t>(ax)] = total_axis;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= first.shape[static_cast<size_t>(d)];
  for (int d = ax + 1; d < first.rank(); ++d) inner *= first.shape[static_cast<size_t>(d)];
  Tensor out(out_shape);
  std::vector<int64_t> offsets;  // start of each part along the axis
  {
    int64_t off = 0;
    for (Var p : parts) {
      offsets.push_back(off);
      const Tensor& tp = t.val(p);
      const int64_t np = tp.shape[static_cast<size_t>(ax)];
      for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(tp.data.data() + o * np * inner, np * inner,
                    out.data.data() + (o * total_axis + off) * inner);
      }
      off += np;
    }
  }
  std::vector<Var> parents = parts;
  return t.emit(std::move(out), parents,
                [parts = parents, offsets, outer, inner, total_axis, ax](Tape& tp, Var self) {
                  const std::vector<double>& g = tp.grad(self);
                  for (size_t pi = 0; pi < parts.size(); ++pi) {
                    if (!tp.tracked(parts[pi])) continue;
                    const int64_t np = tp.val(parts[pi]).shape[static_cast<size_t>(ax)];
                    std::vector<double>& gp = tp.grad_buf(parts[pi]);
                    for (int64_t o = 0; o < outer; ++o) {
                      const double* src = g.data() + (o * total_axis + offsets[pi]) * inner;
                      double* dst = gp.data() + o * np * inner;
                      for (int64_t k = 0; k < np * inner; ++k) dst[k] += src[k];
                    }
                  }
                });
}

Var select_rows(Tape& t, Var a, std::vector<int64_t> rows) {
  const Tensor& ta = t.val(a);
  if (ta.rank() < 1) throw std::invalid_argument("select_rows needs rank >= 1");
  const int64_t R = ta.shape[0];
  const int64_t span = ta.numel() / R;
  std::vector<int64_t> out_shape = ta.shape;
  out_shape[0] = static_cast<int64_t>(rows.size());
  Tensor out(out_shape);
  for (size_t i = 0; i < rows.size(); ++i) {
    const int64_t r = rows[i];
    if (r < 0 || r >= R) throw std::invalid_argument("select_rows index out of range");
    std::copy_n(ta.data.data() + r * span, span, out.data.data() + static_cast<int64_t>(i) * span);
  }
  return t.emit(std::move(out), {a}, [a, rows = std::move(rows), span](Tape& tp, Var self) {
    if (!tp.tracked(a)) return;
    const std::vector<double>& g = tp.grad(self);
    std::vector<double>& ga = tp.grad_buf(a);
    for (size_t i = 0; i < rows.size(); ++i) {
      const double* src = g.data() + static_cast<int64_t>(i) * span;
      double* dst = ga.data() + rows[i] * span;
      for (int64_t k = 0; k < span; ++k) dst[k] += src[k];
    }
  });
}

// ---- linear algebra ------------------------------------------------------------------

void matmul_acc(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    const double* a_row = A + i * n;
    double* c_row = C + i * p;
    for (int64_t k = 0; k < n; ++k) {
      const double a = a_row[k];
      const double* b_row = B + k * p;
      for (int64_t j = 0; j < p; ++j) c_row[j] += a * b_row[j];
    }
  }
}

void matmul_abt_acc(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t p) {
  // C[i,j] += dot(A row i, B row j); B is [p, n].
  std::vector<double> bt(static_cast<size_t>(n * p));
  transpose2d(B, bt.data(), p, n);
  matmul_acc(A, bt.data(), C, m, n, p);
}

void matmul_atb_acc(const double* A, const double* B, double* C, int64_t m, int64_t n, int64_t p) {
  // C[i,j] += sum_c A[c,i] * B[c,j]; A is [m, n], result [n, p].
  for (int64_t c = 0; c < m; ++c) {
    const double* a_row = A + c * n;
    const double* b_row = B + c * p;
    for (int64_t i = 0; i < n; ++i) {
      const double a = a_row[i];
      double* c_row = C + i * p;
      for (int64_t j = 0; j < p; ++j) c_row[j] += a * b_row[j];
    }
  }
}

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& ta = t.val(a);
  const Tensor& tb = t.val(b);
  if (ta.rank() != 2 || tb.rank() != 2) {
    throw std::invalid_argument("matmul expects rank-2 operands, got " + shape_str(ta.shape) + " and " +
                                shape_str(tb.shape));
  }
  if (ta.shape[1] != tb.shape[0]) {
    throw std::invalid_argument("matmul inner dims differ: " + shape_str(ta.shape) + " x " +
                                shape_str(tb.shape));
  }
  const int64_t m = ta.shape[0], n = ta.shape[1], p = tb.shape[1];
  Tensor out({m, p});
  matmul_acc(ta.data.data(), tb.data.data(), out.data.data(), m, n, p);
  return t.emit(std::move(out), {a, b}, [a, b, m, n, p](Tape& tp, Var self) {
    const std::vector<double>& g = tp.grad(self);
    if (tp.tracked(a)) {
      // dA = G * B^T
      matmul_abt_acc(g.data(), tp.val(b).data.data(), tp.grad_buf(a).data(), m, p, n);
    }
    if (tp.tracked(b)) {
      // dB = A^T * G
      matmul_atb_acc(tp.val(a).data.data(), g.data(), tp.grad_buf(b).data(), m, n, p);
    }
  });
}

// ---- conv2d ----------------------------------------------------------------------------

namespace {

struct ConvGeom {
  int64_t cin, h, w, cout, k, stride, pad, hout, wout;
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  // cols [cin*k*k, hout*wout]
  const int64_t L = g.hout * g.wout;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t u = 0; u < g.k; ++u) {
      for (int64_t v = 0; v < g.k; ++v) {
        double* row = cols + ((c * g.k + u) * g.k + v) * L;
        for (int64_t oy = 0; oy < g.hout; ++oy) {
          const int64_t iy = oy * g.stride + u - g.pad;
          const bool y_ok = iy >= 0 && iy < g.h;
          for (int64_t ox = 0; ox < g.wout; ++ox) {
            const int64_t ix = ox * g.stride + v - g.pad;
            row[oy * g.wout + ox] =
                (y_ok && ix >= 0 && ix < g.w) ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* cols, const ConvGeom& g, double* dx) {
  const int64_t L = g.hout * g.wout;
  for (int64_t c = 0; c < g.cin; ++c) {
    for (int64_t u = 0; u < g.k; ++u) {
      for (int64_t v = 0; v < g.k; ++v) {
        const double* row = cols + ((c * g.k + u) * g.k + v) * L;
        for (int64_t oy = 0; oy < g.hout; ++oy) {
          const int64_t iy = oy * g.stride + u - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t ox = 0; ox < g.wout; ++ox) {
            const int64_t ix = ox * g.stride + v - g.pad;
            if (ix < 0 || ix >= g.w) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.wout + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad) {
  const Tensor& tx = t.val(x);
  const Tensor& tw = t.val(w);
  if (tx.rank() != 3 || tw.rank() != 4) {
    throw std::invalid_argument("conv2d expects x [C,H,W], w [Cout,Cin,k,k]; got " + shape_str(tx.shape) +
                                ", " + shape_str(tw.shape));
  }
  if (tw.shape[2] != tw.shape[3]) throw std::invalid_argument("conv2d kernel must be square");
  if (tx.shape[0] != tw.shape[1]) {
    throw std::invalid_argument("conv2d channel mismatch: x " + shape_str(tx.shape) + " vs w " +
                                shape_str(tw.shape));
  }
  ConvGeom g;
  g.cin = tx.shape[0];
  g.h = tx.shape[1];
  g.w = tx.shape[2];
  g.cout = tw.shape[0];
  g.k = tw.shape[2];
  g.stride = stride;
  g.pad = pad;
  g.hout = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wout = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.hout <= 0 || g.wout <= 0) throw std::invalid_argument("conv2d output would be empty");

  const int64_t ck = g.cin * g.k * g.k;
  const int64_t L = g.hout * g.wout;
  auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(ck * L));
  im2col(tx.data.data(), g, cols->data());

  Tensor out({g.cout, g.hout, g.wout});
  matmul_acc(tw.data.data(), cols->data(), out.data.data(), g.cout, ck, L);
  if (b.valid()) {
    const Tensor& tb = t.val(b);
    if (tb.numel() != g.cout) throw std::invalid_argument("conv2d bias size mismatch");
    for (int64_t c = 0; c < g.cout; ++c) {
      double* row = out.data.data() + c * L;
      const double bias = tb.data[static_cast<size_t>(c)];
      for (int64_t l = 0; l < L; ++l) row[l] += bias;
    }
  }
  std::vector<Var> parents{x, w};
  if (b.valid()) parents.push_back(b);
  return t.emit(std::move(out), parents, [x, w, b, g, ck, L, cols](Tape& tp, Var self) {
    const std::vector<double>& gout = tp.grad(self);
    if (tp.tracked(w)) {
      // dW = G * cols^T
      matmul_abt_acc(gout.data(), cols->data(), tp.grad_buf(w).data(), g.cout, L, ck);
    }
    if (b.valid() && tp.tracked(b)) {
      std::vector<double>& gb = tp.grad_buf(b);
      for (int64_t c = 0; c < g.cout; ++c) {
        double s = 0.0;
        const double* row = gout.data() + c * L;
        for (int64_t l = 0; l < L; ++l) s += row[l];
        gb[static_cast<size_t>(c)] += s;
      }
    }
    if (tp.tracked(x)) {
      std::vector<double> dcols(static_cast<size_t>(ck * L), 0.0);
      // dcols = W^T * G
      matmul_atb_acc(tp.val(w).data.data(), gout.data(), dcols.data(), g.cout, ck, L);
      col2im_acc(dcols.data(), g, tp.grad_buf(x).data());
    }
  });
}

// ---- grad check -------------------------------------------------------------------------

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  auto [value0, analytic] = f(x);
  if (!std::isfinite(value0)) throw std::runtime_error("grad_check: non-finite value at base point");
  if (analytic.numel() != x.numel()) {
    throw std::invalid_argument("grad_check: analytic gradient size mismatch");
  }
  double worst = 0.0;
  Tensor probe = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe.data[static_cast<size_t>(i)];
    probe.data[static_cast<size_t>(i)] = orig + h;
    const double fp = f(probe).first;
    probe.data[static_cast<size_t>(i)] = orig - h;
    const double fm = f(probe).first;
    probe.data[static_cast<size_t>(i)] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("grad_check: non-finite value at coordinate " + std::to_string(i));
    }
    const double central = (fp - fm) / (2.0 * h);
    const double a = analytic.data[static_cast<size_t>(i)];
    const double rel = std::fabs(a - central) / std::max(1e-8, std::fabs(a) + std::fabs(central));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace dcaps
