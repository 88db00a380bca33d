// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <memory>
#include <vector>

#include "mujica/graph.hpp"

namespace mujica {

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_scalar(Var x, double c);
Var scale(Var x, double c);
Var smul(Var x, Var s); // s is a size-1 learnable scalar
Var square(Var x);
Var sqrt(Var x);
Var powi(Var x, int n);
Var max_with(Var x, double c);
Var min_with(Var x, double c);
Var clamp01(Var x);
Var leaky_relu(Var x, double negative_slope);
Var gelu(Var x);

// ---- reductions / shape ----
Var sum(Var x);
Var mean(Var x);
Var reshape(Var x, std::vector<int> shape);
Var concat_lastdim(const std::vector<Var>& parts);
Var slice_lastdim(Var x, int from, int count);

// ---- channel-broadcast helpers (last dim is the channel axis) ----
Var csum(Var x);            // {...,C} -> {...,1}
Var cmul(Var a, Var s);     // {...,C} * {...,1}
Var cdiv(Var a, Var s);     // {...,C} / {...,1}
Var dot3(Var x, const std::array<double, 3>& v); // {H,W,3} -> {H,W,1}

// ---- linear algebra ----
Var matmul(Var a, Var b);     // {M,K} x {K,N}
Var matmul_nt(Var a, Var b);  // {M,K} x {N,K}^T -> {M,N}
Var add_rowvec(Var x, Var b); // {...,C} + {C}
Var linear(Var x, Var w, Var b); // {...,Cin} -> {...,Cout}

// ---- neural net ops ----
Var conv2d(Var x, Var w, Var b, int stride, int pad); // x {H,W,Cin}, w {kh,kw,Cin,Cout}
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6); // normalizes last dim

// ---- windowing / rearrangement ----
Var window_partition(Var x, int window); // {H,W,C} -> {HW/S^2, S^2, C}, row-major windows
Var window_reverse(Var x, int height, int width);
Var split_heads(Var x, int heads); // {N,T,D} -> {N*heads, T, D/heads}
Var merge_heads(Var x, int heads); // inverse of split_heads
Var pixel_shuffle(Var x, int s);   // {H,W,C*s^2} -> {H*s,W*s,C}
Var pixel_unshuffle(Var x, int s); // inverse

/// Swin-style relative position index for an SxS window: maps (query, key)
/// token pairs to entries of a (2S-1)^2 bias table. Size S^2 * S^2.
std::vector<int> relative_position_index(int window);

/// Optional tap on the attention internals; when supplied, forward fills one
/// {N*heads, T, T} softmax tensor per query stream.
struct AttentionProbe {
    std::vector<Tensor> softmax;
};

/// Multi-head window attention with one key/value stream and any number of
/// query streams, summed: out = sum_i softmax(scale * Q_i K^T + B_i) V.
/// All streams are head-split {N*heads, T, head_dim}; bias tables are
/// {heads, (2S-1)^2} indexed through `bias_index` (size T*T). Softmax
/// matrices are recomputed in backward instead of being kept on the tape.
Var window_attention_sum(const std::vector<Var>& queries, Var keys, Var values,
                         const std::vector<Var>& bias_tables,
                         std::shared_ptr<const std::vector<int>> bias_index, int heads,
                         double scale, AttentionProbe* probe = nullptr);

} // namespace mujica
