#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "megt/config.hpp"
#include "megt/data.hpp"
#include "megt/egt.hpp"

namespace megt {

// -- multi-scale feature fusion ---------------------------------------------------------

struct MffmBlockParams {
  std::vector<EncoderLayerParams> low_layers, high_layers;
  CrossAttentionParams low_queries_high, high_queries_low;

  static MffmBlockParams init(const ModelConfig& cfg, Rng rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct MffmBlockVars {
  std::vector<EncoderLayerVars> low_layers, high_layers;
  CrossAttentionVars low_queries_high, high_queries_low;
};
MffmBlockVars bind(ad::Tape& tape, MffmBlockParams& p);

/// Cross-attention rows of one exchange, column 0 being the querying class token.
struct ExchangeTrace {
  ad::Var low_queries_high;  // 1 x (1 + high patches)
  ad::Var high_queries_low;  // 1 x (1 + low patches)
};

struct MffmOutput {
  ad::Var low, high;
  ExchangeTrace trace;
};

/// Per-branch encoder layers, then a simultaneous class-token exchange:
/// y_cls = x_cls + CA(x_cls, other branch's patches), patch rows untouched.
MffmOutput mffm_block(ad::Var low_tokens, ad::Var high_tokens, const MffmBlockVars& p,
                      const EncoderOptions& opt);

/// Class-token exchange alone (both reads use the pre-exchange tokens).
MffmOutput class_token_exchange(ad::Var low_tokens, ad::Var high_tokens, const MffmBlockVars& p);

// -- heads --------------------------------------------------------------------------------

/// Two-layer MLP head (in -> hidden -> classes, ReLU) or, with hidden == 0, a linear head.
struct ClassifierParams {
  Tensor w1, b1, w2, b2;

  static ClassifierParams init(std::size_t in, std::size_t hidden, std::size_t classes, Rng rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
  bool linear() const noexcept { return w2.empty(); }
};

// -- full model ---------------------------------------------------------------------------

struct ForwardResult {
  ad::Var logits;  // 1 x C
  ad::Var probs;   // 1 x C
  std::vector<ExchangeTrace> exchanges;
  std::optional<EgtOutput> low, high;
};

/// Parameters for every architecture in Arch. Parameter layout and order are
/// deterministic functions of the config.
class Model {
public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const noexcept { return cfg_; }
  EgtOptions egt_options() const;

  /// Runs the bag through the architecture on `tape`. Checks widths first.
  ForwardResult forward(ad::Tape& tape, const Bag& bag);

  /// Visits parameters in canonical (checkpoint) order.
  void visit(const ParamVisitor& f);
  std::vector<Tensor*> parameters();
  std::vector<std::string> parameter_names();
  std::size_t parameter_count();

  void check_input(const Bag& bag) const;

private:
  ModelConfig cfg_;
  std::optional<EgtBranchParams> low_, high_;
  std::vector<MffmBlockParams> mffm_;
  ClassifierParams head_;
};

/// -(1/M) sum_i log p_i[y_i].
ad::Var cross_entropy_loss(ad::Var probs, std::span<const std::size_t> labels);

/// Plain-value forward (no gradient recording): class probabilities of one bag.
Tensor predict_probs(Model& model, const Bag& bag);

}  // namespace megt
