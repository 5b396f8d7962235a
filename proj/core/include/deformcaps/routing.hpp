#pragma once

#include "deformcaps/autograd.hpp"
#include "deformcaps/rng.hpp"
#include "deformcaps/tensor.hpp"

namespace dcaps {

/// Squeeze-phase child descriptors at one location (plain-tensor view).
struct SqueezeDescriptors {
  Tensor a;  // [N] cosine agreement, in [-1, 1]
  Tensor b;  // [N] KL(pool || child), nats, >= 0
  Tensor c;  // [N] distribution variance, >= 0
  Tensor s;  // [3N] concatenation a + b + c, in that order
};

/// Two-layer bottleneck weights: W1 [3N/t x 3N], W2 [N x 3N/t], no biases.
struct ExcitationWeights {
  Tensor W1;
  Tensor W2;
  int t = 4;
};

struct RoutedParents {
  Tensor v_obj;  // [a_obj]
  Tensor v_cls;  // [K]
  Tensor r;      // [N] routing coefficients, strictly in (0, 1)
};

// The tape ops below accept a single location ([N, a]-shaped inputs) or a
// batch of locations ([P, N, a]); outputs drop the P dim for rank-2 inputs.

/// Cosine angle between each child projection and the mean projection.
/// Norms below 1e-12 yield a neutral agreement of 0 for that entry.
Var squeeze_cosine(Tape& t, Var U_obj);

/// KL divergence from the linear opinion pool to each child's softmax
/// distribution: b_i = sum_k pool_k * log(pool_k / softmax(z_i)_k).
Var squeeze_kl(Tape& t, Var Z);

/// Spread of each child's softmax distribution. The default measures
/// deviation from the distribution mean 1/K; `literal` subtracts the
/// distribution's total mass (1) instead.
Var squeeze_variance(Tape& t, Var Z, bool literal = false);

/// r = sigmoid(W2 * relu(W1 * s)); s is [3N] or [P, 3N].
Var excite(Tape& t, Var s, Var W1, Var W2);

struct RoutedVars {
  Var v_obj;
  Var v_cls;
};

/// Weighted sums v = sum_i r_i * u_i; the same r weights both parents.
RoutedVars route(Tape& t, Var U_obj, Var U_cls, Var r);

/// Fan-in uniform init; requires t to divide 3N.
ExcitationWeights make_excitation_weights(int N, int t, Pcg32& rng);

// Plain-tensor conveniences (single location), built on the ops above.
SqueezeDescriptors compute_descriptors(const Tensor& U_obj, const Tensor& Z, bool literal_variance = false);
RoutedParents se_route(const Tensor& U_obj, const Tensor& Z, const ExcitationWeights& w,
                       bool literal_variance = false);

}  // namespace dcaps
