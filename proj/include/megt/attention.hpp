#pragma once

#include <cstddef>
#include <vector>

#include "megt/autodiff.hpp"
#include "megt/rng.hpp"
#include "megt/tensor.hpp"

namespace megt {

/// Multi-head self-attention weights. Q/K/V projections are d_model x d_model
/// and are split column-wise into heads; W_o is shared across heads.
struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;

  static AttentionParams init(std::size_t d_model, Rng rng);
};

struct AttentionVars {
  ad::Var w_q, w_k, w_v, w_o;
};
AttentionVars bind(ad::Tape& tape, AttentionParams& p);

struct NystromConfig {
  std::size_t landmarks = 32;
  std::size_t pinv_iters = 6;
};

enum class AttentionKind { nystrom, exact };

/// Class-to-patch attention rows, one per head, plus their head average.
struct AttentionTrace {
  std::vector<ad::Var> head_rows;  // each 1 x n (class column dropped)
  ad::Var mean_row;                // 1 x n
};

struct MhaOutput {
  ad::Var output;             // n x d_model
  std::vector<ad::Var> maps;  // exact path only: n x n per head
  AttentionTrace trace;       // filled when n >= 2 (row 0 treated as the class token)
};

std::size_t head_width(std::size_t d_model, std::size_t heads);

/// softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated and projected by W_o.
MhaOutput exact_mha(ad::Var x, const AttentionVars& p, std::size_t heads);

/// Nystrom approximation of exact_mha. Landmarks are contiguous-segment means
/// of each head's Q and K; the middle factor is inverted with pinv_iterative.
MhaOutput nystrom_attention(ad::Var x, const AttentionVars& p, std::size_t heads,
                            const NystromConfig& cfg);

MhaOutput self_attention(ad::Var x, const AttentionVars& p, std::size_t heads, AttentionKind kind,
                         const NystromConfig& cfg);

/// Iterative Moore-Penrose pseudoinverse,
///   Z0 = A^T / (|A|_1 |A|_inf),  Z <- Z (13I - AZ (15I - AZ (7I - AZ))) / 4.
/// Differentiable. An all-zero input yields an all-zero (constant) result.
ad::Var pinv_iterative(ad::Var a, std::size_t iters);
Tensor pinv_iterative(const Tensor& a, std::size_t iters);

/// Landmarks as means over m contiguous row segments. m > n is clamped with a warning.
ad::Var landmark_means(ad::Var q, std::size_t m);

/// Exact attention of one query row over all keys (class first); the class
/// column is dropped without renormalizing.
ad::Var class_attention_row(ad::Var q_cls, ad::Var keys);

/// Elementwise mean of equally shaped rows.
ad::Var head_average(std::span<const ad::Var> rows);

struct CrossAttentionParams {
  Tensor w_q, w_k, w_v;

  static CrossAttentionParams init(std::size_t d_model, Rng rng);
};

struct CrossAttentionVars {
  ad::Var w_q, w_k, w_v;
};
CrossAttentionVars bind(ad::Tape& tape, CrossAttentionParams& p);

struct CrossAttentionOutput {
  ad::Var output;  // 1 x d_model
  ad::Var weights;  // 1 x (n + 1), column 0 = the querying class token
};

/// Single-query attention of x_cls over [x_cls; other_patches]. other_patches may have zero rows.
CrossAttentionOutput cross_attention(ad::Var x_cls, ad::Var other_patches,
                                     const CrossAttentionVars& p);

}  // namespace megt
