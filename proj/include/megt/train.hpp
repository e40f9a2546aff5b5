#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "megt/metrics.hpp"
#include "megt/model.hpp"

namespace megt {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;

  static AdamConfig from(const ModelConfig& cfg);
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update. Weight decay is classic L2: lambda * w is
/// added to the gradient before the moment updates. Missing gradients count as zero.
void adam_step(std::span<Tensor* const> params, AdamState& state, const AdamConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

/// Mini-batch of one bag, training order reshuffled each epoch from the config
/// seed, early stopping on validation loss. On return the model holds the
/// parameters of the best-validation epoch. Throws NumericError on a non-finite loss.
History fit(Model& model, std::span<const Bag> train, std::span<const Bag> val,
            const std::function<void(const EpochRecord&)>& on_epoch = {});

struct Predictions {
  std::vector<std::size_t> predicted;
  std::vector<std::size_t> labels;
  std::vector<double> positive_scores;  // P(class 1)
  std::vector<double> losses;
};

Predictions predict(Model& model, std::span<const Bag> bags);
EvalResult evaluate(Model& model, std::span<const Bag> bags);
/// Mean per-bag cross-entropy, summed in bag order.
double mean_loss(Model& model, std::span<const Bag> bags);

}  // namespace megt
