#include "megt/model.hpp"

#include <algorithm>
#include <array>
#include <numeric>

#include "megt/errors.hpp"
#include "megt/numerics.hpp"

namespace megt {

using ad::Var;

namespace {

// Rows sorted lexicographically: pooling them is then exactly permutation invariant,
// not just up to summation-order rounding.
Tensor canonical_rows(const Tensor& x) {
  std::vector<std::size_t> order(x.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto row = [&](std::size_t r) { return x.values().subspan(r * x.cols(), x.cols()); };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ra = row(a), rb = row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < order.size(); ++i)
    std::copy_n(row(order[i]).begin(), x.cols(), out.values().begin() + i * x.cols());
  return out;
}

Var concat2_rows(Var a, Var b) {
  const std::array<Var, 2> parts{a, b};
  return ad::concat_rows(parts);
}

Var classify(Var z, ad::Tape& tape, ClassifierParams& head) {
  Var h = ad::add_row(ad::matmul(z, tape.parameter(head.w1)), tape.parameter(head.b1));
  if (head.linear()) return h;
  h = ad::relu(h);
  return ad::add_row(ad::matmul(h, tape.parameter(head.w2)), tape.parameter(head.b2));
}

EncoderOptions encoder_options(const ModelConfig& cfg) {
  EncoderOptions opt;
  opt.heads = cfg.n_heads;
  opt.kind = cfg.attention;
  opt.nystrom = NystromConfig{cfg.m_landmarks, cfg.pinv_iters};
  opt.ln_eps = cfg.ln_eps;
  return opt;
}

}  // namespace

// -- MFFM ---------------------------------------------------------------------------------

MffmBlockParams MffmBlockParams::init(const ModelConfig& cfg, Rng rng) {
  MffmBlockParams p;
  for (std::size_t l = 0; l < cfg.l_low; ++l)
    p.low_layers.push_back(EncoderLayerParams::init(cfg.d_model, cfg.mlp_ratio, rng.child("low").child(l)));
  for (std::size_t l = 0; l < cfg.l_high; ++l)
    p.high_layers.push_back(EncoderLayerParams::init(cfg.d_model, cfg.mlp_ratio, rng.child("high").child(l)));
  p.low_queries_high = CrossAttentionParams::init(cfg.d_model, rng.child("ca_low"));
  p.high_queries_low = CrossAttentionParams::init(cfg.d_model, rng.child("ca_high"));
  return p;
}

void MffmBlockParams::visit(const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t l = 0; l < low_layers.size(); ++l) low_layers[l].visit(prefix + "/low/" + std::to_string(l), f);
  for (std::size_t l = 0; l < high_layers.size(); ++l) high_layers[l].visit(prefix + "/high/" + std::to_string(l), f);
  f(prefix + "/ca_low/W_q", low_queries_high.w_q);
  f(prefix + "/ca_low/W_k", low_queries_high.w_k);
  f(prefix + "/ca_low/W_v", low_queries_high.w_v);
  f(prefix + "/ca_high/W_q", high_queries_low.w_q);
  f(prefix + "/ca_high/W_k", high_queries_low.w_k);
  f(prefix + "/ca_high/W_v", high_queries_low.w_v);
}

MffmBlockVars bind(ad::Tape& tape, MffmBlockParams& p) {
  MffmBlockVars v;
  for (auto& l : p.low_layers) v.low_layers.push_back(bind(tape, l));
  for (auto& l : p.high_layers) v.high_layers.push_back(bind(tape, l));
  v.low_queries_high = bind(tape, p.low_queries_high);
  v.high_queries_low = bind(tape, p.high_queries_low);
  return v;
}

MffmOutput class_token_exchange(Var low_tokens, Var high_tokens, const MffmBlockVars& p) {
  if (low_tokens.rows() < 1 || high_tokens.rows() < 1)
    throw ContractError("mffm: token sets must start with a class token row");
  const Var cls_low = ad::slice_rows(low_tokens, 0, 1);
  const Var cls_high = ad::slice_rows(high_tokens, 0, 1);
  const Var patch_low = ad::slice_rows(low_tokens, 1, low_tokens.rows() - 1);
  const Var patch_high = ad::slice_rows(high_tokens, 1, high_tokens.rows() - 1);
  const CrossAttentionOutput ca_low = cross_attention(cls_low, patch_high, p.low_queries_high);
  const CrossAttentionOutput ca_high = cross_attention(cls_high, patch_low, p.high_queries_low);
  MffmOutput out;
  out.low = concat2_rows(ad::add(cls_low, ca_low.output), patch_low);
  out.high = concat2_rows(ad::add(cls_high, ca_high.output), patch_high);
  out.trace = {ca_low.weights, ca_high.weights};
  return out;
}

MffmOutput mffm_block(Var low_tokens, Var high_tokens, const MffmBlockVars& p, const EncoderOptions& opt) {
  for (const auto& layer : p.low_layers) low_tokens = encoder_layer(low_tokens, layer, opt).tokens;
  for (const auto& layer : p.high_layers) high_tokens = encoder_layer(high_tokens, layer, opt).tokens;
  return class_token_exchange(low_tokens, high_tokens, p);
}

// -- heads ---------------------------------------------------------------------------------

ClassifierParams ClassifierParams::init(std::size_t in, std::size_t hidden, std::size_t classes, Rng rng) {
  const InitSpec xavier{InitScheme::xavier_uniform};
  ClassifierParams p;
  if (hidden == 0) {
    p.w1 = init_params(in, classes, xavier, rng.child("W1"));
    p.b1 = Tensor(1, classes);
    return p;
  }
  p.w1 = init_params(in, hidden, xavier, rng.child("W1"));
  p.b1 = Tensor(1, hidden);
  p.w2 = init_params(hidden, classes, xavier, rng.child("W2"));
  p.b2 = Tensor(1, classes);
  return p;
}

void ClassifierParams::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + "/W1", w1);
  f(prefix + "/b1", b1);
  if (linear()) return;
  f(prefix + "/W2", w2);
  f(prefix + "/b2", b2);
}

// -- model ---------------------------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const Rng root(cfg_.seed);
  const EgtOptions opt = egt_options();
  const std::size_t d = cfg_.d_model;
  switch (cfg_.arch) {
    case Arch::megt:
      low_ = EgtBranchParams::init(cfg_.d_in, d, cfg_.mlp_ratio, opt, root.child("low"));
      high_ = EgtBranchParams::init(cfg_.d_in, d, cfg_.mlp_ratio, opt, root.child("high"));
      for (std::size_t b = 0; b < cfg_.k_mffm; ++b)
        mffm_.push_back(MffmBlockParams::init(cfg_, root.child("mffm").child(b)));
      head_ = ClassifierParams::init(2 * d, d, cfg_.n_classes, root.child("head"));
      break;
    case Arch::egt_low:
      low_ = EgtBranchParams::init(cfg_.d_in, d, cfg_.mlp_ratio, opt, root.child("low"));
      head_ = ClassifierParams::init(d, d, cfg_.n_classes, root.child("head"));
      break;
    case Arch::egt_high:
      high_ = EgtBranchParams::init(cfg_.d_in, d, cfg_.mlp_ratio, opt, root.child("high"));
      head_ = ClassifierParams::init(d, d, cfg_.n_classes, root.child("head"));
      break;
    case Arch::mean_pool:
      head_ = ClassifierParams::init(2 * cfg_.d_in, 0, cfg_.n_classes, root.child("head"));
      break;
  }
}

EgtOptions Model::egt_options() const {
  EgtOptions opt;
  opt.encoder = encoder_options(cfg_);
  opt.k_keep = cfg_.k_keep;
  opt.depth = cfg_.egt_depth;
  opt.enable_tpm = cfg_.enable_tpm;
  opt.enable_gtl = cfg_.enable_gtl;
  return opt;
}

void Model::visit(const ParamVisitor& f) {
  if (low_) low_->visit("low", f);
  if (high_) high_->visit("high", f);
  for (std::size_t b = 0; b < mffm_.size(); ++b) mffm_[b].visit("mffm/" + std::to_string(b), f);
  head_.visit("head", f);
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> out;
  visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<std::string> Model::parameter_names() {
  std::vector<std::string> out;
  visit([&](const std::string& name, Tensor&) { out.push_back(name); });
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  visit([&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

void Model::check_input(const Bag& bag) const {
  if (bag.low.rows() == 0) throw DataError("bag '" + bag.id + "': empty low-resolution instance set");
  if (bag.high.rows() == 0) throw DataError("bag '" + bag.id + "': empty high-resolution instance set");
  for (const Tensor* t : {&bag.low, &bag.high})
    if (t->cols() != cfg_.d_in)
      throw DataError("feature width mismatch: model expects d_in = " + std::to_string(cfg_.d_in) +
                      ", bag '" + bag.id + "' has width " + std::to_string(t->cols()));
}

ForwardResult Model::forward(ad::Tape& tape, const Bag& bag) {
  check_input(bag);
  ForwardResult out;
  const EgtOptions opt = egt_options();
  Var z;
  switch (cfg_.arch) {
    case Arch::mean_pool: {
      const std::array<Var, 2> pooled{ad::mean_rows(tape.constant(canonical_rows(bag.low))),
                                      ad::mean_rows(tape.constant(canonical_rows(bag.high)))};
      z = ad::concat_cols(pooled);
      break;
    }
    case Arch::egt_low:
    case Arch::egt_high: {
      const bool use_low = cfg_.arch == Arch::egt_low;
      EgtBranchParams& branch = use_low ? *low_ : *high_;
      const EgtBranchVars vars = bind(tape, branch);
      EgtOutput egt = egt_forward(tape.constant(use_low ? bag.low : bag.high), vars, opt);
      z = ad::slice_rows(egt.tokens, 0, 1);
      (use_low ? out.low : out.high) = std::move(egt);
      break;
    }
    case Arch::megt: {
      const EgtBranchVars low_vars = bind(tape, *low_);
      const EgtBranchVars high_vars = bind(tape, *high_);
      out.low = egt_forward(tape.constant(bag.low), low_vars, opt);
      out.high = egt_forward(tape.constant(bag.high), high_vars, opt);
      Var low_tokens = out.low->tokens;
      Var high_tokens = out.high->tokens;
      for (auto& block : mffm_) {
        const MffmBlockVars vars = bind(tape, block);
        MffmOutput fused = mffm_block(low_tokens, high_tokens, vars, opt.encoder);
        low_tokens = fused.low;
        high_tokens = fused.high;
        out.exchanges.push_back(fused.trace);
      }
      const std::array<Var, 2> cls{ad::slice_rows(low_tokens, 0, 1), ad::slice_rows(high_tokens, 0, 1)};
      z = ad::concat_cols(cls);
      break;
    }
  }
  out.logits = classify(z, tape, head_);
  out.probs = ad::softmax_rows(out.logits);
  return out;
}

Var cross_entropy_loss(Var probs, std::span<const std::size_t> labels) {
  return ad::nll_of_probs(probs, labels);
}

Tensor predict_probs(Model& model, const Bag& bag) {
  ad::Tape tape(false);
  return model.forward(tape, bag).probs.value();
}

}  // namespace megt
