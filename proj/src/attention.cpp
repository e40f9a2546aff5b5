#include "megt/attention.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "megt/errors.hpp"
#include "megt/numerics.hpp"

namespace megt {

using ad::Var;

namespace {

Tensor xavier(std::size_t rows, std::size_t cols, const Rng& rng, const char* name) {
  return init_params(rows, cols, InitSpec{InitScheme::xavier_uniform}, rng.child(name));
}

Var scaled_scores(Var q, Var k, double dk) { return ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(dk)); }

Var identity_like(ad::Tape& tape, std::size_t n, double diag) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = diag;
  return tape.constant(std::move(t));
}

struct HeadSlices {
  Var q, k, v;
};

HeadSlices head_slice(Var q, Var k, Var v, std::size_t h, std::size_t dh) {
  return {ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh), ad::slice_cols(v, h * dh, dh)};
}

}  // namespace

AttentionParams AttentionParams::init(std::size_t d_model, Rng rng) {
  return {xavier(d_model, d_model, rng, "W_q"), xavier(d_model, d_model, rng, "W_k"),
          xavier(d_model, d_model, rng, "W_v"), xavier(d_model, d_model, rng, "W_o")};
}

AttentionVars bind(ad::Tape& tape, AttentionParams& p) {
  return {tape.parameter(p.w_q), tape.parameter(p.w_k), tape.parameter(p.w_v),
          tape.parameter(p.w_o)};
}

CrossAttentionParams CrossAttentionParams::init(std::size_t d_model, Rng rng) {
  return {xavier(d_model, d_model, rng, "W_q"), xavier(d_model, d_model, rng, "W_k"),
          xavier(d_model, d_model, rng, "W_v")};
}

CrossAttentionVars bind(ad::Tape& tape, CrossAttentionParams& p) {
  return {tape.parameter(p.w_q), tape.parameter(p.w_k), tape.parameter(p.w_v)};
}

std::size_t head_width(std::size_t d_model, std::size_t heads) {
  if (heads == 0 || d_model % heads != 0)
    throw ConfigError(std::to_string(heads) + " heads do not divide d_model = " +
                      std::to_string(d_model));
  return d_model / heads;
}

Var class_attention_row(Var q_cls, Var keys) {
  if (q_cls.rows() != 1) throw ShapeError("class_attention_row: query must be one row");
  const std::size_t n = keys.rows() - 1;
  Var row = ad::softmax_rows(scaled_scores(q_cls, keys, static_cast<double>(q_cls.cols())));
  return ad::slice_cols(row, 1, n);
}

Var head_average(std::span<const Var> rows) {
  if (rows.empty()) throw ShapeError("head_average: no heads");
  Var acc = rows[0];
  for (std::size_t h = 1; h < rows.size(); ++h) acc = ad::add(acc, rows[h]);
  return rows.size() == 1 ? acc : ad::scale(acc, 1.0 / static_cast<double>(rows.size()));
}

namespace {

// Row 0 of the sequence is the class token; records its exact attention row per head.
void fill_trace(MhaOutput& out, const std::vector<HeadSlices>& heads) {
  if (heads.empty() || heads[0].q.rows() < 2) return;
  for (const auto& hs : heads)
    out.trace.head_rows.push_back(class_attention_row(ad::slice_rows(hs.q, 0, 1), hs.k));
  out.trace.mean_row = head_average(out.trace.head_rows);
}

}  // namespace

MhaOutput exact_mha(Var x, const AttentionVars& p, std::size_t heads) {
  const std::size_t dh = head_width(x.cols(), heads);
  const Var q = ad::matmul(x, p.w_q);
  const Var k = ad::matmul(x, p.w_k);
  const Var v = ad::matmul(x, p.w_v);
  MhaOutput out;
  std::vector<Var> head_out;
  std::vector<HeadSlices> slices;
  for (std::size_t h = 0; h < heads; ++h) {
    const HeadSlices hs = head_slice(q, k, v, h, dh);
    const Var map = ad::softmax_rows(scaled_scores(hs.q, hs.k, static_cast<double>(dh)));
    out.maps.push_back(map);
    head_out.push_back(ad::matmul(map, hs.v));
    slices.push_back(hs);
  }
  out.output = ad::matmul(heads == 1 ? head_out[0] : ad::concat_cols(head_out), p.w_o);
  fill_trace(out, slices);
  return out;
}

Var landmark_means(Var q, std::size_t m) {
  const std::size_t n = q.rows();
  if (m == 0) throw ConfigError("landmark_means: need at least one landmark");
  if (m > n) {
    warn("landmark count " + std::to_string(m) + " exceeds sequence length " + std::to_string(n) +
         "; clamped");
    m = n;
  }
  return ad::segment_means(q, m);
}

Var pinv_iterative(Var a, std::size_t iters) {
  if (iters == 0) throw ConfigError("pinv_iterative: need at least one iteration");
  const Tensor& av = a.value();
  if (av.rows() != av.cols()) throw ShapeError("pinv_iterative: square input required, got " + av.shape_string());
  bool all_zero = true;
  for (double x : av.values()) all_zero = all_zero && x == 0.0;
  ad::Tape& tape = a.tape();
  if (all_zero) return tape.constant(Tensor(av.rows(), av.cols()));
  const std::size_t m = av.rows();
  const Var i7 = identity_like(tape, m, 7.0);
  const Var i13 = identity_like(tape, m, 13.0);
  const Var i15 = identity_like(tape, m, 15.0);
  Var z = ad::scale_by(ad::transpose(a), ad::pinv_init_scale(a));
  for (std::size_t it = 0; it < iters; ++it) {
    const Var az = ad::matmul(a, z);
    Var inner = ad::matmul(az, ad::sub(i7, az));
    inner = ad::matmul(az, ad::sub(i15, inner));
    z = ad::scale(ad::matmul(z, ad::sub(i13, inner)), 0.25);
  }
  return z;
}

Tensor pinv_iterative(const Tensor& a, std::size_t iters) {
  ad::Tape tape(false);
  return pinv_iterative(tape.constant(a), iters).value();
}

MhaOutput nystrom_attention(Var x, const AttentionVars& p, std::size_t heads,
                            const NystromConfig& cfg) {
  const std::size_t n = x.rows();
  if (n == 0) throw ShapeError("nystrom_attention: empty sequence");
  const std::size_t dh = head_width(x.cols(), heads);
  const double d = static_cast<double>(dh);
  const std::size_t landmarks = std::min(cfg.landmarks, n);
  if (landmarks == 0) throw ConfigError("nystrom_attention: need at least one landmark");
  const Var q = ad::matmul(x, p.w_q);
  const Var k = ad::matmul(x, p.w_k);
  const Var v = ad::matmul(x, p.w_v);
  MhaOutput out;
  std::vector<Var> head_out;
  std::vector<HeadSlices> slices;
  for (std::size_t h = 0; h < heads; ++h) {
    const HeadSlices hs = head_slice(q, k, v, h, dh);
    const Var q_land = landmark_means(hs.q, landmarks);
    const Var k_land = landmark_means(hs.k, landmarks);
    const Var kernel_left = ad::softmax_rows(scaled_scores(hs.q, k_land, d));     // n x m
    const Var kernel_mid = ad::softmax_rows(scaled_scores(q_land, k_land, d));    // m x m
    const Var kernel_right = ad::softmax_rows(scaled_scores(q_land, hs.k, d));    // m x n
    // Right-to-left keeps every product at O(n m d).
    Var acc = ad::matmul(kernel_right, hs.v);
    acc = ad::matmul(pinv_iterative(kernel_mid, cfg.pinv_iters), acc);
    head_out.push_back(ad::matmul(kernel_left, acc));
    slices.push_back(hs);
  }
  out.output = ad::matmul(heads == 1 ? head_out[0] : ad::concat_cols(head_out), p.w_o);
  fill_trace(out, slices);
  return out;
}

MhaOutput self_attention(Var x, const AttentionVars& p, std::size_t heads, AttentionKind kind,
                         const NystromConfig& cfg) {
  return kind == AttentionKind::exact ? exact_mha(x, p, heads) : nystrom_attention(x, p, heads, cfg);
}

CrossAttentionOutput cross_attention(Var x_cls, Var other_patches, const CrossAttentionVars& p) {
  if (x_cls.rows() != 1) throw ShapeError("cross_attention: class token must be one row");
  const std::array<Var, 2> parts{x_cls, other_patches};
  const Var keyed = other_patches.rows() == 0 ? x_cls : ad::concat_rows(parts);
  const Var q = ad::matmul(x_cls, p.w_q);
  const Var k = ad::matmul(keyed, p.w_k);
  const Var v = ad::matmul(keyed, p.w_v);
  const Var w = ad::softmax_rows(scaled_scores(q, k, static_cast<double>(x_cls.cols())));
  return {ad::matmul(w, v), w};
}

}  // namespace megt
