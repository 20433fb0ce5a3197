#pragma once

#include "ucseg/autodiff.hpp"

namespace ucseg {

// Spatial ops over [N, C, sp...] tensors; sp has rank 1..3 (2 for 2D images,
// 3 for volumes). Kernels are cubic: w is [Cout, Cin, k^r].

// 'same'-style convolution; out_dim = (S + 2*pad - k) / stride + 1 per axis.
Var conv_nd(const Var& x, const Var& w, const Var& b, std::size_t k, std::size_t stride,
            std::size_t pad);

// window == stride, windows that do not fit are dropped (floor division)
Var avg_pool_nd(const Var& x, std::size_t k);

Var upsample_nearest_nd(const Var& x, std::size_t factor);

// bi/trilinear resize, half-pixel centers (align_corners = false)
Var resize_linear_nd(const Var& x, const std::vector<std::size_t>& out_sp);

// per-(sample, group) normalization with learnable per-channel affine
Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, double eps);

// global average pool: [N, C, sp...] -> [N, C]
Var gap_spatial(const Var& x);

// row-wise L2 normalization of [N, D]
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

// Split a single map [sp...] into non-overlapping patch^r blocks, one token per
// block, features = row-major block contents: -> [n_tokens, patch^r].
Var tokenize_patches(const Var& x, std::size_t patch);
Var detokenize_patches(const Var& tokens, const std::vector<std::size_t>& sp, std::size_t patch);

}  // namespace ucseg
