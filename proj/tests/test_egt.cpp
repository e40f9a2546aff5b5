#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "megt/egt.hpp"
#include "megt/errors.hpp"
#include "megt/gradcheck.hpp"
#include "megt/rng.hpp"
#include "support.hpp"

using namespace megt;
using namespace testutil;
namespace ad = megt::ad;

namespace {

Tensor zeros_like(const Tensor& t) { return Tensor(t.rows(), t.cols(), 0.0); }

Tensor hconcat(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
  }
  return out;
}

Tensor vconcat(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows() + b.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
  for (std::size_t i = 0; i < b.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(a.rows() + i, j) = b(i, j);
  return out;
}

// D^-1/2 A D^-1/2 with D the row sums of A.
Tensor loop_gcn_normalize(const Tensor& a) {
  std::vector<double> r(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
    r[i] = 1.0 / std::sqrt(s);
  }
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = r[i] * a(i, j) * r[j];
  return out;
}

Tensor loop_relu(Tensor a) {
  for (double& v : a.values()) v = std::max(v, 0.0);
  return a;
}

GtlParams random_gtl(std::size_t d, std::size_t heads, std::uint64_t seed) {
  return GtlParams::init(d, heads, Rng(seed));
}

void visit_all(EncoderLayerParams& p, std::vector<Tensor*>& out) {
  p.visit("", [&](const std::string&, Tensor& t) { out.push_back(&t); });
}

}  // namespace

TEST_CASE("encoder_layer with zero weights is the identity") {
  EncoderLayerParams p = EncoderLayerParams::init(8, 4, Rng(1));
  for (Tensor* t : {&p.attn.w_q, &p.attn.w_k, &p.attn.w_v, &p.attn.w_o, &p.mlp.w1, &p.mlp.b1, &p.mlp.w2,
                    &p.mlp.b2})
    *t = zeros_like(*t);
  p.ln1_gamma = random_tensor(1, 8, 3);
  Tape tape;
  const Tensor x = random_tensor(5, 8, 2);
  for (AttentionKind kind : {AttentionKind::exact, AttentionKind::nystrom}) {
    EncoderOptions opt;
    opt.heads = 2;
    opt.kind = kind;
    CHECK(encoder_layer(tape.constant(x), bind(tape, p), opt).tokens.value() == x);
  }
}

TEST_CASE("encoder_layer exact and nystrom agree with m = n") {
  EncoderLayerParams p = EncoderLayerParams::init(8, 4, Rng(2));
  Tape tape;
  const Var x = tape.constant(random_tensor(6, 8, 5));
  EncoderOptions ex{2, AttentionKind::exact, {}, 1e-5};
  EncoderOptions ny{2, AttentionKind::nystrom, {6, 30}, 1e-5};
  const EncoderLayerVars v = bind(tape, p);
  CHECK(max_abs_diff(encoder_layer(x, v, ex).tokens.value(), encoder_layer(x, v, ny).tokens.value()) <= 1e-4);
}

TEST_CASE("encoder_layer gradients") {
  EncoderLayerParams p = EncoderLayerParams::init(8, 2, Rng(3));
  Rng jit(9);
  for (Tensor* t : {&p.ln1_gamma, &p.ln1_beta, &p.ln2_gamma, &p.ln2_beta, &p.mlp.b1, &p.mlp.b2})
    for (double& v : t->values()) v += 0.3 * jit.uniform(-1, 1);
  Tensor x = random_tensor(6, 8, 4);
  const Tensor r = random_tensor(6, 8, 5);
  for (AttentionKind kind : {AttentionKind::exact, AttentionKind::nystrom}) {
    GradCheckCase c;
    c.scope = "encoder";
    c.params.emplace_back("x", &x);
    p.visit("enc", [&](const std::string& name, Tensor& t) { c.params.emplace_back(name, &t); });
    c.loss = [&, kind](Tape& tape) {
      const EncoderOptions opt{2, kind, {3, 6}, 1e-5};
      const Var out = encoder_layer(tape.parameter(x), bind(tape, p), opt).tokens;
      return ad::sum(ad::hadamard(out, tape.constant(r)));
    };
    GradCheckOptions o;
    o.per_param = 1000;
    const ScopeReport rep = run_gradcheck(c, o, Rng(1));
    INFO("worst ", rep.worst.param, "[", rep.worst.coordinate, "] ", rep.worst.rel_err);
    CHECK(rep.passed());
    CHECK(rep.checked > 500);
  }
}

TEST_CASE("prune_tokens worked example") {
  Tape tape;
  const Tensor h = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}, {7, 8}});
  const PruneResult r = prune_tokens(tape.constant(h), tape.constant(Tensor::from_rows({{0.2, 0.3, 0.3, 0.2}})), 2);
  CHECK(r.kept_indices == std::vector<std::size_t>{1, 2});
  CHECK(r.kept_tokens.value() == Tensor::from_rows({{3, 4}, {5, 6}}));
  REQUIRE(r.fusion_token.has_value());
  CHECK(r.fusion_token->value() == Tensor::from_rows({{0.2 * 1 + 0.2 * 7, 0.2 * 2 + 0.2 * 8}}));

  const PruneResult all = prune_tokens(tape.constant(h), tape.constant(Tensor::from_rows({{0.1, 0.4, 0.2, 0.3}})), 4);
  CHECK(all.kept_indices == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK_FALSE(all.fusion_token.has_value());
  CHECK(all.kept_tokens.value() == h);
  CHECK_THROWS_AS(prune_tokens(tape.constant(h), tape.constant(Tensor(1, 4, 0.25)), 0), ConfigError);
  CHECK_THROWS_AS(prune_tokens(tape.constant(h), tape.constant(Tensor(1, 3, 0.25)), 2), ShapeError);
}

TEST_CASE("top_k_indices ties favour the lower index") {
  const std::vector<double> s{0.5, 0.2, 0.5, 0.5, 0.1};
  CHECK(top_k_indices(s, 2) == std::vector<std::size_t>{0, 2});
  CHECK(top_k_indices(s, 3) == std::vector<std::size_t>{0, 2, 3});
  CHECK(top_k_indices(s, 9) == std::vector<std::size_t>{0, 1, 2, 3, 4});
}

TEST_CASE("prune_tokens properties over random trials") {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + gen() % 15, k = 1 + gen() % (n + 2), d = 3;
    Tape tape;
    const Tensor h = random_tensor(n, d, 1000 + trial);
    Tensor abar(1, n);
    for (double& v : abar.values()) v = std::uniform_real_distribution<double>(0.0, 1.0)(gen);
    const PruneResult r = prune_tokens(tape.constant(h), tape.constant(abar), k);

    // Kept: ascending, distinct, exactly the k largest scores.
    CHECK(std::is_sorted(r.kept_indices.begin(), r.kept_indices.end()));
    CHECK(std::set<std::size_t>(r.kept_indices.begin(), r.kept_indices.end()).size() == r.kept_indices.size());
    CHECK(r.kept_indices.size() == std::min(k, n));
    CHECK(r.fusion_token.has_value() == (k < n));
    double min_kept = INFINITY, max_dropped = -INFINITY;
    for (std::size_t i = 0; i < n; ++i) {
      const bool kept = std::find(r.kept_indices.begin(), r.kept_indices.end(), i) != r.kept_indices.end();
      (kept ? min_kept : max_dropped) = kept ? std::min(min_kept, abar[i]) : std::max(max_dropped, abar[i]);
    }
    CHECK(min_kept >= max_dropped);

    // Strictly increasing transforms leave the selection unchanged.
    Tensor warped = abar;
    for (double& v : warped.values()) v = std::exp(3.0 * v) - 7.0;
    CHECK(prune_tokens(tape.constant(h), tape.constant(warped), k).kept_indices == r.kept_indices);

    // Permuting patches permutes the selection and leaves the fusion token unchanged.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    Tensor hp(n, d), ap(1, n);
    for (std::size_t i = 0; i < n; ++i) {
      ap[i] = abar[perm[i]];
      for (std::size_t j = 0; j < d; ++j) hp(i, j) = h(perm[i], j);
    }
    const PruneResult rp = prune_tokens(tape.constant(hp), tape.constant(ap), k);
    std::vector<std::size_t> mapped;
    for (std::size_t i : rp.kept_indices) mapped.push_back(perm[i]);
    std::sort(mapped.begin(), mapped.end());
    CHECK(mapped == r.kept_indices);
    if (r.fusion_token) CHECK(max_abs_diff(r.fusion_token->value(), rp.fusion_token->value()) <= 1e-12);
  }
}

TEST_CASE("prune_tokens gradient flows through scores and tokens") {
  const std::vector<Tensor> in{random_tensor(6, 3, 1), random_tensor(1, 6, 2, 0.0, 1.0)};
  CHECK(grad_check([](Tape&, std::vector<Var>& v) { return *prune_tokens(v[0], v[1], 3).fusion_token; }, in) <= 1e-6);
  CHECK(grad_check([](Tape&, std::vector<Var>& v) { return prune_tokens(v[0], v[1], 3).kept_tokens; }, in) <= 1e-6);
}

TEST_CASE("gtl_scores") {
  Tape tape;
  GtlParams p = random_gtl(4, 2, 1);
  const Tensor x = random_tensor(3, 4, 2);
  {
    GtlParams z = p;
    z.w_q = zeros_like(z.w_q);
    for (const Var& s : gtl_scores(tape.constant(x), bind(tape, z), 2).scores) CHECK(s.value() == Tensor(3, 3, 0.0));
  }
  {
    GtlParams h = random_gtl(2, 1, 3);
    h.w_q = Tensor::from_rows({{1, 0}, {0, 2}});
    h.w_k = Tensor::from_rows({{0, 1}, {1, 1}});
    const Tensor xs = Tensor::from_rows({{1, 2}, {3, -1}});
    // Q = [[1,4],[3,-2]], K = [[2,3],[-1,2]], A = Q K^T / sqrt(2).
    const Tensor expect = loop_scale(Tensor::from_rows({{14, 7}, {0, -7}}), 1.0 / std::sqrt(2.0));
    CHECK(max_abs_diff(gtl_scores(tape.constant(xs), bind(tape, h), 1).scores[0].value(), expect) <= 1e-12);
  }
  {
    GtlParams d2 = p;
    d2.w_q = loop_scale(d2.w_q, 2.0);
    const auto a = gtl_scores(tape.constant(x), bind(tape, p), 2).scores;
    const auto b = gtl_scores(tape.constant(x), bind(tape, d2), 2).scores;
    for (std::size_t h = 0; h < 2; ++h) CHECK(max_abs_diff(b[h].value(), loop_scale(a[h].value(), 2.0)) <= 1e-14);
  }
}

TEST_CASE("gtl_transformer_branch") {
  Tape tape;
  const Tensor v1 = random_tensor(4, 3, 1);
  const Var vv = tape.constant(v1);
  const Var id = tape.constant(Tensor::identity(3));
  {
    const Var s[] = {tape.constant(Tensor(4, 4, 0.0))};
    const Var v[] = {vv};
    const Tensor out = gtl_transformer_branch(s, v, id).value();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double mean = 0.0;
        for (std::size_t r = 0; r < 4; ++r) mean += v1(r, j) / 4.0;
        CHECK(std::abs(out(i, j) - mean) <= 1e-15);
      }
  }
  {
    Tensor dom = random_tensor(4, 4, 2);
    for (std::size_t i = 0; i < 4; ++i) dom(i, i) += 1e6;
    const Var s[] = {tape.constant(dom)};
    const Var v[] = {vv};
    CHECK(max_abs_diff(gtl_transformer_branch(s, v, id).value(), v1) <= 1e-6);
  }
  {
    const Tensor a0 = random_tensor(4, 4, 3), a1 = random_tensor(4, 4, 4);
    const Tensor u0 = random_tensor(4, 2, 5), u1 = random_tensor(4, 2, 6), wo = random_tensor(4, 3, 7);
    const Var s[] = {tape.constant(a0), tape.constant(a1)};
    const Var v[] = {tape.constant(u0), tape.constant(u1)};
    const Tensor expect = loop_matmul(hconcat(loop_matmul(loop_softmax(a0), u0), loop_matmul(loop_softmax(a1), u1)), wo);
    CHECK(max_abs_diff(gtl_transformer_branch(s, v, tape.constant(wo)).value(), expect) <= 1e-12);
  }
}

TEST_CASE("gcn branch") {
  Tape tape;
  SUBCASE("identity graph") {
    const Tensor v2 = random_tensor(4, 3, 1), w = random_tensor(3, 3, 2);
    const Tensor out = gcn_propagate(tape.constant(Tensor::identity(4)), tape.constant(v2), tape.constant(w)).value();
    CHECK(max_abs_diff(out, loop_relu(loop_matmul(v2, w))) <= 1e-15);
  }
  SUBCASE("two-node uniform adjacency") {
    const Tensor adj = gcn_adjacency(tape.constant(Tensor(2, 2, 0.0))).value();
    CHECK(max_abs_diff(adj, Tensor::from_rows({{1.5, 0.5}, {0.5, 1.5}})) <= 1e-15);
    const Tensor prop = ad::gcn_normalize(tape.constant(adj)).value();
    CHECK(max_abs_diff(prop, Tensor::from_rows({{0.75, 0.25}, {0.25, 0.75}})) <= 1e-15);
  }
  SUBCASE("adjacency is nonnegative and self-connected") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Tensor adj = gcn_adjacency(tape.constant(random_tensor(6, 6, seed, -40, 40))).value();
      for (std::size_t i = 0; i < 6; ++i) {
        CHECK(adj(i, i) >= 1.0);
        for (std::size_t j = 0; j < 6; ++j) CHECK(adj(i, j) >= 0.0);
      }
      CHECK(ad::gcn_normalize(tape.constant(adj)).value().all_finite());
    }
  }
  SUBCASE("full branch against a loop oracle") {
    const Tensor a0 = random_tensor(5, 5, 3), a1 = random_tensor(5, 5, 4);
    const Tensor u0 = random_tensor(5, 2, 5), u1 = random_tensor(5, 2, 6);
    const Tensor g0 = random_tensor(2, 2, 7), g1 = random_tensor(2, 2, 8), wo = random_tensor(4, 4, 9);
    auto head = [](const Tensor& a, const Tensor& u, const Tensor& g) {
      Tensor adj = loop_softmax(a);
      for (std::size_t i = 0; i < adj.rows(); ++i) adj(i, i) += 1.0;
      return loop_relu(loop_matmul(loop_gcn_normalize(adj), loop_matmul(u, g)));
    };
    const Tensor expect = loop_matmul(hconcat(head(a0, u0, g0), head(a1, u1, g1)), wo);
    const Var s[] = {tape.constant(a0), tape.constant(a1)};
    const Var v[] = {tape.constant(u0), tape.constant(u1)};
    const Var g[] = {tape.constant(g0), tape.constant(g1)};
    CHECK(max_abs_diff(gtl_gcn_branch(s, v, g, tape.constant(wo)).value(), expect) <= 1e-12);
  }
}

TEST_CASE("gtl_fuse") {
  Tape tape;
  const Tensor a = random_tensor(4, 3, 1), b = random_tensor(4, 3, 2);
  const Tensor top = vconcat(Tensor::identity(3), Tensor(3, 3, 0.0));
  const Tensor bottom = vconcat(Tensor(3, 3, 0.0), Tensor::identity(3));
  CHECK(gtl_fuse(tape.constant(a), tape.constant(b), tape.constant(top)).value() == a);
  CHECK(gtl_fuse(tape.constant(a), tape.constant(b), tape.constant(bottom)).value() == b);
  const Tensor w = random_tensor(6, 3, 3);
  CHECK(max_abs_diff(gtl_fuse(tape.constant(a), tape.constant(b), tape.constant(w)).value(),
                     loop_matmul(hconcat(a, b), w)) <= 1e-12);
  CHECK_THROWS_AS(gtl_fuse(tape.constant(a), tape.constant(Tensor(3, 3)), tape.constant(w)), ShapeError);
}

TEST_CASE("graph_transformer_layer gradients reach every parameter") {
  GtlParams p = random_gtl(8, 2, 5);
  Tensor x = random_tensor(5, 8, 6);
  const Tensor r = random_tensor(5, 8, 7);
  GradCheckCase c;
  c.scope = "gtl";
  c.params.emplace_back("x", &x);
  p.visit("gtl", [&](const std::string& name, Tensor& t) { c.params.emplace_back(name, &t); });
  c.loss = [&](Tape& tape) {
    return ad::sum(ad::hadamard(graph_transformer_layer(tape.parameter(x), bind(tape, p), 2), tape.constant(r)));
  };
  {
    for (auto& [name, t] : c.params) t->zero_grad();
    Tape tape;
    tape.backward(c.loss(tape));
    for (auto& [name, t] : c.params) {
      double norm = 0.0;
      for (double g : t->grad()) norm += g * g;
      INFO(name);
      CHECK(norm > 0.0);
    }
  }
  GradCheckOptions o;
  o.per_param = 1000;
  CHECK(run_gradcheck(c, o, Rng(2)).passed());
}

namespace {

struct Branch {
  EgtOptions opt;
  EgtBranchParams params;
  Branch(std::size_t k, bool tpm, bool gtl, std::uint64_t seed = 4) : params{} {
    opt.encoder.heads = 2;
    opt.encoder.nystrom = {4, 6};
    opt.k_keep = k;
    opt.enable_tpm = tpm;
    opt.enable_gtl = gtl;
    params = EgtBranchParams::init(5, 8, 2, opt, Rng(seed));
  }
};

}  // namespace

TEST_CASE("egt_forward token count") {
  for (std::size_t n : {1u, 2u, 5u, 9u, 12u})
    for (std::size_t k : {1u, 3u, 9u, 20u}) {
      Branch b(k, true, true);
      Tape tape;
      const EgtOutput out = egt_forward(tape.constant(random_tensor(n, 5, n + k)), bind(tape, b.params), b.opt);
      const std::size_t expect = 1 + std::min(k, n) + (k < n ? 1 : 0);
      CHECK(out.tokens.rows() == expect);
      CHECK(egt_output_tokens(n, k, true) == expect);
      CHECK(out.has_fusion == (k < n));
      CHECK(out.kept_indices.size() == std::min(k, n));
    }
  Branch b(4, true, true);
  Tape tape;
  CHECK_THROWS_AS(egt_forward(tape.constant(Tensor(0, 5)), bind(tape, b.params), b.opt), DataError);
}

TEST_CASE("egt ablations reduce to the smaller architecture") {
  const std::size_t n = 9;
  const Tensor x = random_tensor(n, 5, 21);
  auto reduced = [&](Branch& b, bool prune, bool gtl) {
    Tape tape;
    const EgtBranchVars v = bind(tape, b.params);
    Var t = ad::concat_rows(std::vector<Var>{v.class_token, ad::matmul(tape.constant(x), v.input_proj)});
    EncoderOutput e1 = encoder_layer(t, v.encoder_1[0], b.opt.encoder);
    Var cls = ad::slice_rows(e1.tokens, 0, 1), patches = ad::slice_rows(e1.tokens, 1, n);
    if (prune) {
      PruneResult pr = prune_tokens(patches, e1.trace.mean_row, b.opt.k_keep);
      patches = ad::concat_rows(std::vector<Var>{pr.kept_tokens, *pr.fusion_token});
    }
    if (gtl) patches = graph_transformer_layer(patches, *v.gtl, 2);
    return encoder_layer(ad::concat_rows(std::vector<Var>{cls, patches}), v.encoder_2[0], b.opt.encoder).tokens.value();
  };
  auto full = [&](Branch& b) {
    Tape tape;
    return egt_forward(tape.constant(x), bind(tape, b.params), b.opt).tokens.value();
  };
  SUBCASE("EGT-m: no pruning, no GTL is two stacked encoder layers") {
    Branch b(4, false, false);
    CHECK(!b.params.gtl.has_value());
    CHECK(max_abs_diff(full(b), reduced(b, false, false)) <= 1e-12);
    Branch big_k(50, true, false);  // k >= n disables pruning as well
    CHECK(max_abs_diff(full(big_k), reduced(big_k, false, false)) <= 1e-12);
  }
  SUBCASE("EGT-TPM: pruning only") {
    Branch b(4, true, false);
    CHECK(max_abs_diff(full(b), reduced(b, true, false)) <= 1e-12);
  }
  SUBCASE("EGT-GTL: GTL only") {
    Branch b(4, false, true);
    CHECK(max_abs_diff(full(b), reduced(b, false, true)) <= 1e-12);
  }
  SUBCASE("full branch") {
    Branch b(4, true, true);
    CHECK(max_abs_diff(full(b), reduced(b, true, true)) <= 1e-12);
  }
}

TEST_CASE("egt branch gradient check (n = 12, d_model = 16)") {
  const std::vector<ScopeReport> reps = gradcheck("egt", 5);
  REQUIRE(reps.size() == 1);
  INFO("worst ", reps[0].worst.param, " ", reps[0].worst.rel_err);
  CHECK(reps[0].passed());
}

TEST_CASE("parameter initialization conventions") {
  Branch b(4, true, true);
  for (double v : b.params.encoder_1[0].mlp.b1.values()) CHECK(v == 0.0);
  for (double v : b.params.encoder_1[0].ln1_gamma.values()) CHECK(v == 1.0);
  double sq = 0.0;
  for (double v : b.params.class_token.values()) sq += v * v;
  CHECK(std::sqrt(sq / 8) < 0.1);
  // Adding a GTL does not change the encoders' initial weights.
  Branch no_gtl(4, true, false);
  CHECK(no_gtl.params.encoder_2[0].attn.w_q == b.params.encoder_2[0].attn.w_q);
  CHECK(no_gtl.params.input_proj == b.params.input_proj);
}
