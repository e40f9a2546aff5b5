#include "megt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "megt/attention.hpp"
#include "megt/egt.hpp"
#include "megt/errors.hpp"
#include "megt/model.hpp"
#include "megt/numerics.hpp"

namespace megt {

using ad::Var;

ScopeReport run_gradcheck(const GradCheckCase& c, const GradCheckOptions& opt, Rng rng) {
  for (auto& [name, p] : c.params) p->zero_grad();
  {
    ad::Tape tape;
    tape.backward(c.loss(tape));
  }
  auto value_at = [&]() {
    ad::Tape tape(false);
    return c.loss(tape).value()[0];
  };
  ScopeReport report;
  report.scope = c.scope;
  for (auto& [name, p] : c.params) {
    std::vector<std::size_t> coords(p->size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    for (std::size_t i = 0; i < std::min(opt.per_param, coords.size()); ++i)
      std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    coords.resize(std::min(opt.per_param, coords.size()));
    const std::vector<double> analytic(p->grad().begin(), p->grad().end());
    for (std::size_t k : coords) {
      const double orig = (*p)[k];
      (*p)[k] = orig + opt.step;
      const double up = value_at();
      (*p)[k] = orig - opt.step;
      const double down = value_at();
      (*p)[k] = orig;
      CoordinateCheck chk{name, k, analytic[k], (up - down) / (2.0 * opt.step), 0.0};
      chk.rel_err = relative_error(chk.analytic, chk.numeric, opt.floor);
      if (!std::isfinite(chk.numeric) || !std::isfinite(chk.analytic)) chk.rel_err = std::numeric_limits<double>::infinity();
      ++report.checked;
      if (report.checked == 1 || chk.rel_err > report.worst.rel_err) report.worst = chk;
      if (!(chk.rel_err <= opt.tolerance)) report.failures.push_back(chk);
    }
    p->clear_grad();
  }
  return report;
}

namespace {

// Keeps the parameter storage of a synthetic case alive alongside its closure.
struct CaseStore {
  std::vector<std::unique_ptr<Tensor>> tensors;
  Tensor* add(Tensor t) {
    tensors.push_back(std::make_unique<Tensor>(std::move(t)));
    return tensors.back().get();
  }
};

Tensor uniform(std::size_t r, std::size_t c, Rng rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& x : t.values()) x = scale * rng.uniform(-1.0, 1.0);
  return t;
}

// sum(R o x) with a fixed random readout R.
Var readout(ad::Tape& tape, Var x, const Tensor& r) { return ad::sum(ad::hadamard(x, tape.constant(r))); }

void add_visited(GradCheckCase& c, const std::string& prefix,
                 const std::function<void(const ParamVisitor&)>& visit) {
  visit([&](const std::string& name, Tensor& t) { c.params.emplace_back(prefix + name, &t); });
}

// Random non-trivial values for LayerNorm gains and biases so their gradients are exercised.
void jitter(const std::function<void(const ParamVisitor&)>& visit, Rng rng) {
  std::size_t k = 0;
  visit([&](const std::string& name, Tensor& t) {
    if (name.find("gamma") != std::string::npos || name.find("beta") != std::string::npos ||
        name.find("/b") != std::string::npos) {
      Rng r = rng.child(k);
      for (double& x : t.values()) x += 0.2 * r.uniform(-1.0, 1.0);
    }
    ++k;
  });
}

struct Scope {
  std::shared_ptr<CaseStore> store = std::make_shared<CaseStore>();
  std::shared_ptr<void> owned;
  GradCheckCase c;
};

Scope attention_scope(Rng rng) {
  Scope s;
  const std::size_t n = 9, d = 8, heads = 2;
  auto params = std::make_shared<std::pair<AttentionParams, CrossAttentionParams>>(
      AttentionParams::init(d, rng.child("attn")), CrossAttentionParams::init(d, rng.child("ca")));
  s.owned = params;
  Tensor* x = s.store->add(uniform(n, d, rng.child("x")));
  Tensor* r1 = s.store->add(uniform(n, d, rng.child("r1")));
  Tensor* r2 = s.store->add(uniform(n, d, rng.child("r2")));
  Tensor* r3 = s.store->add(uniform(1, d, rng.child("r3")));
  Tensor* r4 = s.store->add(uniform(1, n - 1, rng.child("r4")));
  s.c.scope = "attention";
  s.c.params = {{"x", x},
                {"attn/W_q", &params->first.w_q}, {"attn/W_k", &params->first.w_k},
                {"attn/W_v", &params->first.w_v}, {"attn/W_o", &params->first.w_o},
                {"ca/W_q", &params->second.w_q}, {"ca/W_k", &params->second.w_k},
                {"ca/W_v", &params->second.w_v}};
  s.c.loss = [=](ad::Tape& tape) {
    const Var xv = tape.parameter(*x);
    const AttentionVars a = bind(tape, params->first);
    const CrossAttentionVars ca = bind(tape, params->second);
    const MhaOutput ny = nystrom_attention(xv, a, heads, NystromConfig{4, 6});
    const MhaOutput ex = exact_mha(xv, a, heads);
    const CrossAttentionOutput co = cross_attention(ad::slice_rows(xv, 0, 1), ad::slice_rows(xv, 1, n - 1), ca);
    Var loss = ad::add(readout(tape, ny.output, *r1), readout(tape, ex.output, *r2));
    loss = ad::add(loss, readout(tape, co.output, *r3));
    return ad::add(loss, readout(tape, ny.trace.mean_row, *r4));
  };
  return s;
}

Scope gtl_scope(Rng rng) {
  Scope s;
  const std::size_t rows = 5, d = 8, heads = 2;
  auto params = std::make_shared<GtlParams>(GtlParams::init(d, heads, rng.child("gtl")));
  s.owned = params;
  Tensor* x = s.store->add(uniform(rows, d, rng.child("x")));
  Tensor* r = s.store->add(uniform(rows, d, rng.child("r")));
  s.c.scope = "gtl";
  s.c.params.emplace_back("x_patch", x);
  add_visited(s.c, "", [&](const ParamVisitor& f) { params->visit("gtl", f); });
  s.c.loss = [=](ad::Tape& tape) {
    const GtlVars v = bind(tape, *params);
    return readout(tape, graph_transformer_layer(tape.parameter(*x), v, heads), *r);
  };
  return s;
}

Scope egt_scope(Rng rng) {
  Scope s;
  const std::size_t n = 12, d_in = 6, d = 16;
  EgtOptions opt;
  opt.encoder.heads = 2;
  opt.encoder.nystrom = NystromConfig{4, 6};
  opt.k_keep = 6;
  auto params = std::make_shared<EgtBranchParams>(EgtBranchParams::init(d_in, d, 2, opt, rng.child("egt")));
  s.owned = params;
  jitter([&](const ParamVisitor& f) { params->visit("", f); }, rng.child("jitter"));
  Tensor* x = s.store->add(uniform(n, d_in, rng.child("x")));
  Tensor* r = s.store->add(uniform(egt_output_tokens(n, opt.k_keep, true), d, rng.child("r")));
  s.c.scope = "egt";
  add_visited(s.c, "", [&](const ParamVisitor& f) { params->visit("egt", f); });
  s.c.loss = [=](ad::Tape& tape) {
    const EgtBranchVars v = bind(tape, *params);
    return readout(tape, egt_forward(tape.constant(*x), v, opt).tokens, *r);
  };
  return s;
}

Scope mffm_scope(Rng rng) {
  Scope s;
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.m_landmarks = 3;
  cfg.mlp_ratio = 2;
  auto params = std::make_shared<MffmBlockParams>(MffmBlockParams::init(cfg, rng.child("mffm")));
  s.owned = params;
  jitter([&](const ParamVisitor& f) { params->visit("", f); }, rng.child("jitter"));
  Tensor* low = s.store->add(uniform(5, 8, rng.child("low")));
  Tensor* high = s.store->add(uniform(9, 8, rng.child("high")));
  Tensor* rl = s.store->add(uniform(5, 8, rng.child("rl")));
  Tensor* rh = s.store->add(uniform(9, 8, rng.child("rh")));
  EncoderOptions opt;
  opt.heads = 2;
  opt.nystrom = NystromConfig{3, 6};
  s.c.scope = "mffm";
  s.c.params = {{"low_tokens", low}, {"high_tokens", high}};
  add_visited(s.c, "", [&](const ParamVisitor& f) { params->visit("mffm", f); });
  s.c.loss = [=](ad::Tape& tape) {
    const MffmBlockVars v = bind(tape, *params);
    const MffmOutput out = mffm_block(tape.parameter(*low), tape.parameter(*high), v, opt);
    return ad::add(readout(tape, out.low, *rl), readout(tape, out.high, *rh));
  };
  return s;
}

Scope model_scope(Rng rng) {
  Scope s;
  ModelConfig cfg;
  cfg.d_in = 6;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.k_keep = 5;
  cfg.m_landmarks = 4;
  cfg.mlp_ratio = 2;
  cfg.seed = rng.next_u64();
  auto model = std::make_shared<Model>(cfg);
  s.owned = model;
  jitter([&](const ParamVisitor& f) { model->visit(f); }, rng.child("jitter"));
  auto bag = std::make_shared<Bag>();
  bag->low = uniform(8, cfg.d_in, rng.child("bag/low"));
  bag->high = uniform(8, cfg.d_in, rng.child("bag/high"));
  bag->label = 1;
  s.c.scope = "model";
  add_visited(s.c, "", [&](const ParamVisitor& f) { model->visit(f); });
  s.c.loss = [model, bag](ad::Tape& tape) {
    const std::size_t label[1] = {bag->label};
    return cross_entropy_loss(model->forward(tape, *bag).probs, label);
  };
  return s;
}

}  // namespace

std::vector<std::string> gradcheck_scopes(const std::string& scope) {
  static const std::vector<std::string> all{"attention", "egt", "gtl", "mffm", "model"};
  if (scope == "all") return all;
  if (std::find(all.begin(), all.end(), scope) == all.end())
    throw ConfigError("unknown gradcheck scope '" + scope + "' (all|attention|egt|gtl|mffm|model)");
  return {scope};
}

std::vector<ScopeReport> gradcheck(const std::string& scope, std::uint64_t seed, const GradCheckOptions& opt) {
  const Rng root(seed);
  std::vector<ScopeReport> reports;
  for (const std::string& name : gradcheck_scopes(scope)) {
    const Rng rng = root.child(name);
    Scope s = name == "attention" ? attention_scope(rng)
              : name == "egt"     ? egt_scope(rng)
              : name == "gtl"     ? gtl_scope(rng)
              : name == "mffm"    ? mffm_scope(rng)
                                  : model_scope(rng);
    reports.push_back(run_gradcheck(s.c, opt, rng.child("sample")));
  }
  return reports;
}

}  // namespace megt
