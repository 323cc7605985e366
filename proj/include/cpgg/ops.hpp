#pragma once

#include "cpgg/autograd.hpp"

#include <array>
#include <span>
#include <vector>

// Differentiable operator set. No implicit broadcasting: every binary op
// requires identical shapes except the explicit scalar variants. Ops that
// carry a bias (linear, conv3d, norms) own that addition.

namespace cpgg {

using Triple = std::array<Index, 3>;

// Elementwise arithmetic.
template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& a, S factor);
template <typename S> Var<S> add_scalar(const Var<S>& a, S offset);
/// Row r of a (first axis) multiplied by factors[r].
template <typename S> Var<S> scale_rows(const Var<S>& a, std::span<const S> factors);

// Activations.
template <typename S> Var<S> leaky_relu(const Var<S>& x, S negative_slope = S(0.01));
template <typename S> Var<S> silu(const Var<S>& x);
template <typename S> Var<S> sigmoid(const Var<S>& x);
template <typename S> Var<S> exp(const Var<S>& x);

// Linear algebra.
template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
/// x (N, in) * w (in, out) + b (out).
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b);
/// Multi-head scaled dot-product attention, bidirectional. q (Nq, D), k/v (Nk, D).
template <typename S> Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads);
template <typename S> Var<S> softmax_rows(const Var<S>& x);

// Normalization.
/// Per-row normalization of (N, D) with affine gamma/beta of length D.
template <typename S> Var<S> layernorm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5));
/// x (C, ...) normalized over each group of C/groups channels.
template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S eps = S(1e-5));

// Volumetric.
/// x (C_in, T, H, W), w (C_out, C_in, kt, kh, kw) -> (C_out, T', H', W').
template <typename S> Var<S> conv3d(const Var<S>& x, const Var<S>& w, Triple stride, Triple pad);
template <typename S>
Var<S> conv3d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, Triple stride, Triple pad);
/// Nearest-neighbour repeat along (T, H, W) of a (C, T, H, W) tensor.
template <typename S> Var<S> upsample_nearest(const Var<S>& x, Triple factor);

// Structural.
template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);
/// Rows of x (first axis) selected by index; repeats allowed.
template <typename S> Var<S> gather_rows(const Var<S>& x, std::span<const Index> rows);
template <typename S> Var<S> slice_rows(const Var<S>& x, Index begin, Index count);
template <typename S> Var<S> concat_rows(const std::vector<Var<S>>& parts);
/// (N, D) -> (1, D) column means.
template <typename S> Var<S> mean_rows(const Var<S>& x);

// Reductions and losses (scalar outputs of shape (1)).
template <typename S> Var<S> sum(const Var<S>& x);
template <typename S> Var<S> mean(const Var<S>& x);
template <typename S> Var<S> mse(const Var<S>& prediction, const Var<S>& target);
/// Mean over rows of the per-row squared L2 distance.
template <typename S> Var<S> row_sq_dist_mean(const Var<S>& prediction, const Var<S>& target);
/// Binary cross entropy on logits, averaged; targets in {0,1}.
template <typename S> Var<S> bce_with_logits(const Var<S>& logits, std::span<const S> targets);

/// Convenience: builds a constant (non-differentiable) Var.
template <typename S> Var<S> constant(Tensor<S> t) { return Var<S>(std::move(t), false); }

}  // namespace cpgg
