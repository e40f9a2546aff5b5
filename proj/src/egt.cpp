#include "megt/egt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "megt/errors.hpp"
#include "megt/numerics.hpp"

namespace megt {

using ad::Var;

namespace {

Tensor xavier(std::size_t rows, std::size_t cols, const Rng& rng, const std::string& name) {
  return init_params(rows, cols, InitSpec{InitScheme::xavier_uniform}, rng.child(name));
}

Tensor ones_row(std::size_t d) { return Tensor(1, d, 1.0); }
Tensor zeros_row(std::size_t d) { return Tensor(1, d, 0.0); }

Var concat2_cols(Var a, Var b) {
  const std::array<Var, 2> parts{a, b};
  return ad::concat_cols(parts);
}

Var concat2_rows(Var a, Var b) {
  const std::array<Var, 2> parts{a, b};
  return ad::concat_rows(parts);
}

}  // namespace

// -- encoder layer ------------------------------------------------------------------

EncoderLayerParams EncoderLayerParams::init(std::size_t d_model, std::size_t mlp_ratio, Rng rng) {
  const std::size_t hidden = d_model * mlp_ratio;
  EncoderLayerParams p;
  p.ln1_gamma = ones_row(d_model);
  p.ln1_beta = zeros_row(d_model);
  p.attn = AttentionParams::init(d_model, rng.child("attn"));
  p.ln2_gamma = ones_row(d_model);
  p.ln2_beta = zeros_row(d_model);
  p.mlp.w1 = xavier(d_model, hidden, rng, "mlp/W1");
  p.mlp.b1 = zeros_row(hidden);
  p.mlp.w2 = xavier(hidden, d_model, rng, "mlp/W2");
  p.mlp.b2 = zeros_row(d_model);
  return p;
}

void EncoderLayerParams::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + "/ln1_gamma", ln1_gamma);
  f(prefix + "/ln1_beta", ln1_beta);
  f(prefix + "/attn/W_q", attn.w_q);
  f(prefix + "/attn/W_k", attn.w_k);
  f(prefix + "/attn/W_v", attn.w_v);
  f(prefix + "/attn/W_o", attn.w_o);
  f(prefix + "/ln2_gamma", ln2_gamma);
  f(prefix + "/ln2_beta", ln2_beta);
  f(prefix + "/mlp/W1", mlp.w1);
  f(prefix + "/mlp/b1", mlp.b1);
  f(prefix + "/mlp/W2", mlp.w2);
  f(prefix + "/mlp/b2", mlp.b2);
}

EncoderLayerVars bind(ad::Tape& tape, EncoderLayerParams& p) {
  return {tape.parameter(p.ln1_gamma), tape.parameter(p.ln1_beta), bind(tape, p.attn),
          tape.parameter(p.ln2_gamma), tape.parameter(p.ln2_beta), tape.parameter(p.mlp.w1),
          tape.parameter(p.mlp.b1),    tape.parameter(p.mlp.w2),   tape.parameter(p.mlp.b2)};
}

EncoderOutput encoder_layer(Var tokens, const EncoderLayerVars& p, const EncoderOptions& opt) {
  const Var normed = ad::layer_norm_rows(tokens, p.ln1_gamma, p.ln1_beta, opt.ln_eps);
  MhaOutput attn = self_attention(normed, p.attn, opt.heads, opt.kind, opt.nystrom);
  const Var mid = ad::add(attn.output, tokens);
  const Var normed2 = ad::layer_norm_rows(mid, p.ln2_gamma, p.ln2_beta, opt.ln_eps);
  const Var hidden = ad::relu(ad::add_row(ad::matmul(normed2, p.w1), p.b1));
  const Var mlp = ad::add_row(ad::matmul(hidden, p.w2), p.b2);
  return {ad::add(mlp, mid), std::move(attn.trace)};
}

// -- token pruning ------------------------------------------------------------------

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

PruneResult prune_tokens(Var patches, Var abar, std::size_t k) {
  if (k < 1) throw ConfigError("prune_tokens: k must be at least 1");
  const std::size_t n = patches.rows();
  if (abar.rows() != 1 || abar.cols() != n)
    throw ShapeError("prune_tokens: scores " + abar.value().shape_string() + " for " +
                     patches.value().shape_string() + " tokens");
  PruneResult out;
  out.abar = abar;
  if (k >= n) {
    out.kept_indices.resize(n);
    std::iota(out.kept_indices.begin(), out.kept_indices.end(), std::size_t{0});
    out.kept_tokens = patches;
    return out;
  }
  out.kept_indices = top_k_indices(abar.value().values(), k);
  std::vector<std::size_t> dropped;
  dropped.reserve(n - k);
  for (std::size_t i = 0, j = 0; i < n; ++i) {
    if (j < out.kept_indices.size() && out.kept_indices[j] == i) {
      ++j;
    } else {
      dropped.push_back(i);
    }
  }
  out.kept_tokens = ad::gather_rows(patches, out.kept_indices);
  out.fusion_token = ad::matmul(ad::gather_cols(abar, dropped), ad::gather_rows(patches, dropped));
  return out;
}

// -- Graph-Transformer layer --------------------------------------------------------

GtlParams GtlParams::init(std::size_t d_model, std::size_t heads, Rng rng) {
  const std::size_t dh = head_width(d_model, heads);
  GtlParams p;
  p.w_q = xavier(d_model, d_model, rng, "W_Q");
  p.w_k = xavier(d_model, d_model, rng, "W_K");
  p.w_v1 = xavier(d_model, d_model, rng, "W_V1");
  p.w_v2 = xavier(d_model, d_model, rng, "W_V2");
  for (std::size_t h = 0; h < heads; ++h)
    p.gcn.push_back(xavier(dh, dh, rng.child("gcn"), std::to_string(h)));
  p.w_o1 = xavier(d_model, d_model, rng, "W_o1");
  p.w_o2 = xavier(d_model, d_model, rng, "W_o2");
  p.w_o3 = xavier(2 * d_model, d_model, rng, "W_o3");
  return p;
}

void GtlParams::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + "/W_Q", w_q);
  f(prefix + "/W_K", w_k);
  f(prefix + "/W_V1", w_v1);
  f(prefix + "/W_V2", w_v2);
  for (std::size_t h = 0; h < gcn.size(); ++h) f(prefix + "/gcn" + std::to_string(h), gcn[h]);
  f(prefix + "/W_o1", w_o1);
  f(prefix + "/W_o2", w_o2);
  f(prefix + "/W_o3", w_o3);
}

GtlVars bind(ad::Tape& tape, GtlParams& p) {
  GtlVars v{tape.parameter(p.w_q), tape.parameter(p.w_k), tape.parameter(p.w_v1),
            tape.parameter(p.w_v2), {}, {}, {}, {}};
  for (Tensor& w : p.gcn) v.gcn.push_back(tape.parameter(w));
  v.w_o1 = tape.parameter(p.w_o1);
  v.w_o2 = tape.parameter(p.w_o2);
  v.w_o3 = tape.parameter(p.w_o3);
  return v;
}

GtlProjection gtl_scores(Var x_patch, const GtlVars& p, std::size_t heads) {
  const std::size_t dh = head_width(p.w_q.cols(), heads);
  const Var q = ad::matmul(x_patch, p.w_q);
  const Var k = ad::matmul(x_patch, p.w_k);
  const Var v1 = ad::matmul(x_patch, p.w_v1);
  const Var v2 = ad::matmul(x_patch, p.w_v2);
  GtlProjection out;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = ad::slice_cols(q, h * dh, dh);
    const Var kh = ad::slice_cols(k, h * dh, dh);
    out.scores.push_back(ad::scale(ad::matmul_nt(qh, kh), inv_scale));
    out.v1_heads.push_back(ad::slice_cols(v1, h * dh, dh));
    out.v2_heads.push_back(ad::slice_cols(v2, h * dh, dh));
  }
  return out;
}

Var gtl_transformer_branch(std::span<const Var> scores, std::span<const Var> v1_heads, Var w_o1) {
  if (scores.size() != v1_heads.size()) throw ShapeError("gtl_transformer_branch: head count mismatch");
  std::vector<Var> heads;
  for (std::size_t h = 0; h < scores.size(); ++h)
    heads.push_back(ad::matmul(ad::softmax_rows(scores[h]), v1_heads[h]));
  return ad::matmul(heads.size() == 1 ? heads[0] : ad::concat_cols(heads), w_o1);
}

Var gcn_adjacency(Var scores) { return ad::add_identity(ad::softmax_rows(scores)); }

Var gcn_propagate(Var adjacency, Var features, Var weight) {
  return ad::relu(ad::matmul(ad::gcn_normalize(adjacency), ad::matmul(features, weight)));
}

Var gtl_gcn_branch(std::span<const Var> scores, std::span<const Var> v2_heads,
                   std::span<const Var> gcn_weights, Var w_o2) {
  if (scores.size() != v2_heads.size() || scores.size() != gcn_weights.size())
    throw ShapeError("gtl_gcn_branch: head count mismatch");
  std::vector<Var> heads;
  for (std::size_t h = 0; h < scores.size(); ++h)
    heads.push_back(gcn_propagate(gcn_adjacency(scores[h]), v2_heads[h], gcn_weights[h]));
  return ad::matmul(heads.size() == 1 ? heads[0] : ad::concat_cols(heads), w_o2);
}

Var gtl_fuse(Var v1_out, Var v2_out, Var w_o3) {
  if (v1_out.rows() != v2_out.rows())
    throw ShapeError("gtl_fuse: " + v1_out.value().shape_string() + " vs " +
                     v2_out.value().shape_string());
  return ad::matmul(concat2_cols(v1_out, v2_out), w_o3);
}

Var graph_transformer_layer(Var x_patch, const GtlVars& p, std::size_t heads) {
  const GtlProjection proj = gtl_scores(x_patch, p, heads);
  const Var v1 = gtl_transformer_branch(proj.scores, proj.v1_heads, p.w_o1);
  const Var v2 = gtl_gcn_branch(proj.scores, proj.v2_heads, p.gcn, p.w_o2);
  return gtl_fuse(v1, v2, p.w_o3);
}

// -- EGT branch ---------------------------------------------------------------------

EgtBranchParams EgtBranchParams::init(std::size_t d_in, std::size_t d_model, std::size_t mlp_ratio,
                                      const EgtOptions& opt, Rng rng) {
  if (opt.depth < 1) throw ConfigError("EGT encoder depth must be at least 1");
  if (opt.k_keep < 1) throw ConfigError("k_keep must be at least 1");
  EgtBranchParams p;
  p.class_token = init_params(1, d_model, InitSpec{InitScheme::normal, 0.02}, rng.child("cls"));
  p.input_proj = xavier(d_in, d_model, rng, "input_proj");
  for (std::size_t l = 0; l < opt.depth; ++l) {
    p.encoder_1.push_back(EncoderLayerParams::init(d_model, mlp_ratio, rng.child("encoder_1").child(l)));
    p.encoder_2.push_back(EncoderLayerParams::init(d_model, mlp_ratio, rng.child("encoder_2").child(l)));
  }
  if (opt.enable_gtl) p.gtl = GtlParams::init(d_model, opt.encoder.heads, rng.child("gtl"));
  return p;
}

void EgtBranchParams::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + "/cls", class_token);
  f(prefix + "/input_proj", input_proj);
  for (std::size_t l = 0; l < encoder_1.size(); ++l)
    encoder_1[l].visit(prefix + "/encoder_1/" + std::to_string(l), f);
  if (gtl) gtl->visit(prefix + "/gtl", f);
  for (std::size_t l = 0; l < encoder_2.size(); ++l)
    encoder_2[l].visit(prefix + "/encoder_2/" + std::to_string(l), f);
}

EgtBranchVars bind(ad::Tape& tape, EgtBranchParams& p) {
  EgtBranchVars v;
  v.class_token = tape.parameter(p.class_token);
  v.input_proj = tape.parameter(p.input_proj);
  for (auto& l : p.encoder_1) v.encoder_1.push_back(bind(tape, l));
  if (p.gtl) v.gtl = bind(tape, *p.gtl);
  for (auto& l : p.encoder_2) v.encoder_2.push_back(bind(tape, l));
  return v;
}

std::size_t egt_output_tokens(std::size_t n, std::size_t k_keep, bool enable_tpm) {
  if (!enable_tpm || k_keep >= n) return 1 + n;
  return 1 + k_keep + 1;
}

EgtOutput egt_forward(Var features, const EgtBranchVars& p, const EgtOptions& opt) {
  const std::size_t n = features.rows();
  if (n == 0) throw DataError("egt_forward: empty bag");
  if (opt.enable_gtl && !p.gtl) throw ConfigError("egt_forward: GTL enabled but no GTL parameters");
  EgtOutput out;
  Var tokens = concat2_rows(p.class_token, ad::matmul(features, p.input_proj));
  for (const auto& layer : p.encoder_1) {
    EncoderOutput enc = encoder_layer(tokens, layer, opt.encoder);
    tokens = enc.tokens;
    out.trace = std::move(enc.trace);
  }
  const Var cls = ad::slice_rows(tokens, 0, 1);
  Var patches = ad::slice_rows(tokens, 1, n);
  if (opt.enable_tpm && opt.k_keep < n) {
    PruneResult pruned = prune_tokens(patches, out.trace.mean_row, opt.k_keep);
    out.kept_indices = std::move(pruned.kept_indices);
    out.has_fusion = pruned.fusion_token.has_value();
    patches = out.has_fusion ? concat2_rows(pruned.kept_tokens, *pruned.fusion_token)
                             : pruned.kept_tokens;
  } else {
    out.kept_indices.resize(n);
    std::iota(out.kept_indices.begin(), out.kept_indices.end(), std::size_t{0});
  }
  if (opt.enable_gtl) patches = graph_transformer_layer(patches, *p.gtl, opt.encoder.heads);
  tokens = concat2_rows(cls, patches);
  for (const auto& layer : p.encoder_2) tokens = encoder_layer(tokens, layer, opt.encoder).tokens;
  out.tokens = tokens;
  return out;
}

}  // namespace megt
