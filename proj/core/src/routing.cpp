#include "deformcaps/routing.hpp"

#include <cmath>
#include <stdexcept>

namespace dcaps {

namespace {

constexpr double kNormGuard = 1e-12;

// Normalizes [N, a] to [1, N, a]; remembers whether to squeeze the result.
Var as_batched(Tape& t, Var x, bool& was_rank2) {
  const Tensor& v = t.val(x);
  if (v.rank() == 3) {
    was_rank2 = false;
    return x;
  }
  if (v.rank() == 2) {
    was_rank2 = true;
    return reshape(t, x, {1, v.shape[0], v.shape[1]});
  }
  throw std::invalid_argument("expected rank 2 or 3 input, got " + shape_str(v.shape));
}

Var maybe_squeeze(Tape& t, Var x, bool was_rank2) {
  if (!was_rank2) return x;
  const Tensor& v = t.val(x);
  std::vector<int64_t> s(v.shape.begin() + 1, v.shape.end());
  return reshape(t, x, std::move(s));
}

}  // namespace

Var squeeze_cosine(Tape& t, Var U_obj) {
  bool rank2 = false;
  Var U = as_batched(t, U_obj, rank2);
  const Tensor& u = t.val(U);
  const int64_t P = u.shape[0], N = u.shape[1], A = u.shape[2];
  Tensor out({P, N});
  for (int64_t p = 0; p < P; ++p) {
    const double* up = u.data.data() + p * N * A;
    std::vector<double> m(static_cast<size_t>(A), 0.0);
    for (int64_t i = 0; i < N; ++i) {
      for (int64_t e = 0; e < A; ++e) m[static_cast<size_t>(e)] += up[i * A + e];
    }
    for (double& v : m) v /= static_cast<double>(N);
    double nm = 0.0;
    for (double v : m) nm += v * v;
    nm = std::sqrt(nm);
    for (int64_t i = 0; i < N; ++i) {
      double ni = 0.0, dot = 0.0;
      for (int64_t e = 0; e < A; ++e) {
        ni += up[i * A + e] * up[i * A + e];
        dot += up[i * A + e] * m[static_cast<size_t>(e)];
      }
      ni = std::sqrt(ni);
      out.data[static_cast<size_t>(p * N + i)] = (nm < kNormGuard || ni < kNormGuard) ? 0.0 : dot / (nm * ni);
    }
  }
  Var res = t.emit(std::move(out), {U}, [U, P, N, A](Tape& tp, Var self) {
    if (!tp.tracked(U)) return;
    const std::vector<double>& g = tp.grad(self);
    const Tensor& u2 = tp.val(U);
    std::vector<double>& gu = tp.grad_buf(U);
    std::vector<double> m(static_cast<size_t>(A));
    std::vector<double> svec(static_cast<size_t>(A));
    for (int64_t p = 0; p < P; ++p) {
      const double* up = u2.data.data() + p * N * A;
      double* gup = gu.data() + p * N * A;
      std::fill(m.begin(), m.end(), 0.0);
      for (int64_t i = 0; i < N; ++i) {
        for (int64_t e = 0; e < A; ++e) m[static_cast<size_t>(e)] += up[i * A + e];
      }
      for (double& v : m) v /= static_cast<double>(N);
      double nm = 0.0;
      for (double v : m) nm += v * v;
      nm = std::sqrt(nm);
      if (nm < kNormGuard) continue;  // all a_i defined 0 here
      std::fill(svec.begin(), svec.end(), 0.0);
      for (int64_t i = 0; i < N; ++i) {
        const double gi = g[static_cast<size_t>(p * N + i)];
        if (gi == 0.0) continue;
        double ni = 0.0, dot = 0.0;
        for (int64_t e = 0; e < A; ++e) {
          ni += up[i * A + e] * up[i * A + e];
          dot += up[i * A + e] * m[static_cast<size_t>(e)];
        }
        ni = std::sqrt(ni);
        if (ni < kNormGuard) continue;  // guarded entry, locally constant
        const double a = dot / (nm * ni);
        // direct term: d a_i / d u_i
        for (int64_t e = 0; e < A; ++e) {
          gup[i * A + e] += gi * (m[static_cast<size_t>(e)] / (nm * ni) - a * up[i * A + e] / (ni * ni));
        }
        // mean-mediated term, accumulated then spread below
        for (int64_t e = 0; e < A; ++e) {
          svec[static_cast<size_t>(e)] +=
              gi * (up[i * A + e] / (nm * ni) - a * m[static_cast<size_t>(e)] / (nm * nm));
        }
      }
      for (int64_t jj = 0; jj < N; ++jj) {
        for (int64_t e = 0; e < A; ++e) {
          gup[jj * A + e] += svec[static_cast<size_t>(e)] / static_cast<double>(N);
        }
      }
    }
  });
  return maybe_squeeze(t, res, rank2);
}

Var squeeze_kl(Tape& t, Var Z) {
  bool rank2 = false;
  Var z = as_batched(t, Z, rank2);
  Var p = softmax(t, z, 2);
  Var pool = mean(t, p, 1, /*keepdim=*/true);          // [P, 1, K]
  Var lratio = sub(t, log(t, pool), log(t, p));        // broadcast over N
  Var weighted = mul(t, pool, lratio);
  Var b = sum(t, weighted, 2, /*keepdim=*/false);      // [P, N]
  return maybe_squeeze(t, b, rank2);
}

Var squeeze_variance(Tape& t, Var Z, bool literal) {
  bool rank2 = false;
  Var z = as_batched(t, Z, rank2);
  const int64_t K = t.val(z).shape[2];
  Var p = softmax(t, z, 2);
  const double center = literal ? 1.0 : 1.0 / static_cast<double>(K);
  Var dev = add_const(t, p, -center);
  Var c = sum(t, pow_const(t, dev, 2.0), 2, /*keepdim=*/false);
  return maybe_squeeze(t, c, rank2);
}

Var excite(Tape& t, Var s, Var W1, Var W2) {
  const Tensor& ts = t.val(s);
  bool rank1 = ts.rank() == 1;
  Var sm = rank1 ? reshape(t, s, {1, ts.shape[0]}) : s;
  const Tensor& w1 = t.val(W1);
  const Tensor& w2 = t.val(W2);
  if (t.val(sm).shape[1] != w1.shape[1]) {
    throw std::invalid_argument("excite: s width " + shape_str(t.val(sm).shape) + " does not match W1 " +
                                shape_str(w1.shape));
  }
  if (w2.shape[1] != w1.shape[0]) {
    throw std::invalid_argument("excite: W2 " + shape_str(w2.shape) + " does not compose with W1 " +
                                shape_str(w1.shape));
  }
  Var h = relu(t, matmul(t, sm, permute(t, W1, {1, 0})));     // [P, 3N/t]
  Var r = sigmoid(t, matmul(t, h, permute(t, W2, {1, 0})));   // [P, N]
  if (rank1) r = reshape(t, r, {t.val(r).shape[1]});
  return r;
}

RoutedVars route(Tape& t, Var U_obj, Var U_cls, Var r) {
  bool rank2_obj = false, rank2_cls = false;
  Var uo = as_batched(t, U_obj, rank2_obj);
  Var uc = as_batched(t, U_cls, rank2_cls);
  const Tensor& to = t.val(uo);
  const Tensor& tc = t.val(uc);
  const Tensor& tr = t.val(r);
  const int64_t P = to.shape[0], N = to.shape[1];
  if (tc.shape[0] != P || tc.shape[1] != N) {
    throw std::invalid_argument("route: projection stacks disagree: " + shape_str(to.shape) + " vs " +
                                shape_str(tc.shape));
  }
  if (tr.numel() != P * N) {
    throw std::invalid_argument("route: r length " + shape_str(tr.shape) + " does not match N=" +
                                std::to_string(N));
  }
  Var rr = reshape(t, r, {P, N, 1});
  Var v_obj = sum(t, mul(t, rr, uo), 1, /*keepdim=*/false);  // [P, a_obj]
  Var v_cls = sum(t, mul(t, rr, uc), 1, /*keepdim=*/false);  // [P, K]
  return RoutedVars{maybe_squeeze(t, v_obj, rank2_obj), maybe_squeeze(t, v_cls, rank2_cls)};
}

ExcitationWeights make_excitation_weights(int N, int t, Pcg32& rng) {
  if (t <= 0 || (3 * N) % t != 0) {
    throw std::invalid_argument("reduction ratio t=" + std::to_string(t) + " must divide 3N=" +
                                std::to_string(3 * N));
  }
  const int r = 3 * N / t;
  ExcitationWeights w;
  w.t = t;
  w.W1 = Tensor({r, 3 * N});
  w.W2 = Tensor({N, r});
  const double b1 = 1.0 / std::sqrt(3.0 * N);
  for (double& v : w.W1.data) v = rng.uniform(-b1, b1);
  const double b2 = 1.0 / std::sqrt(static_cast<double>(r));
  for (double& v : w.W2.data) v = rng.uniform(-b2, b2);
  return w;
}

SqueezeDescriptors compute_descriptors(const Tensor& U_obj, const Tensor& Z, bool literal_variance) {
  Tape t;
  Var uo = t.constant(U_obj);
  Var z = t.constant(Z);
  Var a = squeeze_cosine(t, uo);
  Var b = squeeze_kl(t, z);
  Var c = squeeze_variance(t, z, literal_variance);
  Var s = concat(t, {a, b, c}, -1);
  return SqueezeDescriptors{t.val(a), t.val(b), t.val(c), t.val(s)};
}

RoutedParents se_route(const Tensor& U_obj, const Tensor& Z, const ExcitationWeights& w,
                       bool literal_variance) {
  Tape t;
  Var uo = t.constant(U_obj);
  Var z = t.constant(Z);
  Var a = squeeze_cosine(t, uo);
  Var b = squeeze_kl(t, z);
  Var c = squeeze_variance(t, z, literal_variance);
  Var s = concat(t, {a, b, c}, -1);
  Var r = excite(t, s, t.constant(w.W1), t.constant(w.W2));
  RoutedVars v = route(t, uo, z, r);
  return RoutedParents{t.val(v.v_obj), t.val(v.v_cls), t.val(r)};
}

}  // namespace dcaps
