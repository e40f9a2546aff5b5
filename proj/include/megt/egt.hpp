#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "megt/attention.hpp"
#include "megt/params.hpp"

namespace megt {

// -- Transformer encoder layer ---------------------------------------------------

struct MlpParams {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayerParams {
  Tensor ln1_gamma, ln1_beta;
  AttentionParams attn;
  Tensor ln2_gamma, ln2_beta;
  MlpParams mlp;

  static EncoderLayerParams init(std::size_t d_model, std::size_t mlp_ratio, Rng rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct EncoderLayerVars {
  ad::Var ln1_gamma, ln1_beta;
  AttentionVars attn;
  ad::Var ln2_gamma, ln2_beta;
  ad::Var w1, b1, w2, b2;
};
EncoderLayerVars bind(ad::Tape& tape, EncoderLayerParams& p);

struct EncoderOptions {
  std::size_t heads = 8;
  AttentionKind kind = AttentionKind::nystrom;
  NystromConfig nystrom;
  double ln_eps = 1e-5;
};

struct EncoderOutput {
  ad::Var tokens;
  AttentionTrace trace;
};

/// Pre-norm residual layer: T' = MSA(LN(T)) + T, T = MLP(LN(T')) + T'. Row 0 is the class token.
EncoderOutput encoder_layer(ad::Var tokens, const EncoderLayerVars& p, const EncoderOptions& opt);

// -- token pruning ----------------------------------------------------------------

struct PruneResult {
  std::vector<std::size_t> kept_indices;  // ascending original positions
  ad::Var kept_tokens;                    // k x d
  std::optional<ad::Var> fusion_token;    // present iff k < n
  ad::Var abar;
};

/// Keeps the k highest-scoring patches (ties favour the lower index) in original
/// order and folds the rest into sum_i abar_i h_i.
PruneResult prune_tokens(ad::Var patches, ad::Var abar, std::size_t k);

/// Order used for top-k: indices sorted by descending score, ascending index on ties.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

// -- Graph-Transformer layer -----------------------------------------------------

struct GtlParams {
  Tensor w_q, w_k, w_v1, w_v2;
  std::vector<Tensor> gcn;  // one (d/H x d/H) weight per head
  Tensor w_o1, w_o2, w_o3;

  static GtlParams init(std::size_t d_model, std::size_t heads, Rng rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct GtlVars {
  ad::Var w_q, w_k, w_v1, w_v2;
  std::vector<ad::Var> gcn;
  ad::Var w_o1, w_o2, w_o3;
};
GtlVars bind(ad::Tape& tape, GtlParams& p);

struct GtlProjection {
  std::vector<ad::Var> scores;    // raw A_i, (k+1) x (k+1)
  std::vector<ad::Var> v1_heads;  // (k+1) x d/H
  std::vector<ad::Var> v2_heads;
};

/// Four projections, head split, and scaled scores A_i = Q_i K_i^T / sqrt(d/H).
GtlProjection gtl_scores(ad::Var x_patch, const GtlVars& p, std::size_t heads);

/// softmax(A_i) V1_i per head, concatenated, projected by W_o1.
ad::Var gtl_transformer_branch(std::span<const ad::Var> scores, std::span<const ad::Var> v1_heads,
                               ad::Var w_o1);

/// Self-connected adjacency softmax_rows(A_i) + I.
ad::Var gcn_adjacency(ad::Var scores);

/// relu(D^-1/2 A D^-1/2 X W) for one head.
ad::Var gcn_propagate(ad::Var adjacency, ad::Var features, ad::Var weight);

ad::Var gtl_gcn_branch(std::span<const ad::Var> scores, std::span<const ad::Var> v2_heads,
                       std::span<const ad::Var> gcn_weights, ad::Var w_o2);

/// [v1_out | v2_out] W_o3.
ad::Var gtl_fuse(ad::Var v1_out, ad::Var v2_out, ad::Var w_o3);

ad::Var graph_transformer_layer(ad::Var x_patch, const GtlVars& p, std::size_t heads);

// -- EGT branch -------------------------------------------------------------------

struct EgtOptions {
  EncoderOptions encoder;
  std::size_t k_keep = 128;
  std::size_t depth = 1;  // encoder layers in each of the two encoders
  bool enable_tpm = true;
  bool enable_gtl = true;
};

struct EgtBranchParams {
  Tensor class_token;  // 1 x d_model
  Tensor input_proj;   // d_in x d_model
  std::vector<EncoderLayerParams> encoder_1, encoder_2;
  std::optional<GtlParams> gtl;

  static EgtBranchParams init(std::size_t d_in, std::size_t d_model, std::size_t mlp_ratio,
                              const EgtOptions& opt, Rng rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct EgtBranchVars {
  ad::Var class_token, input_proj;
  std::vector<EncoderLayerVars> encoder_1, encoder_2;
  std::optional<GtlVars> gtl;
};
EgtBranchVars bind(ad::Tape& tape, EgtBranchParams& p);

struct EgtOutput {
  ad::Var tokens;  // class token at row 0
  AttentionTrace trace;
  std::vector<std::size_t> kept_indices;  // original instance index of each patch row
  bool has_fusion = false;                // last patch row is the fusion token
};

std::size_t egt_output_tokens(std::size_t n, std::size_t k_keep, bool enable_tpm);

EgtOutput egt_forward(ad::Var features, const EgtBranchVars& p, const EgtOptions& opt);

}  // namespace megt
