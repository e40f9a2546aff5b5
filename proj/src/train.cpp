#include "megt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "megt/errors.hpp"

namespace megt {

AdamConfig AdamConfig::from(const ModelConfig& cfg) {
  return {cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay};
}

void adam_step(std::span<Tensor* const> params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const Tensor* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
    state.step = 0;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const auto g = std::as_const(p).grad();
    auto w = p.values();
    auto m = state.m[k].values();
    auto v = state.v[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = (g.empty() ? 0.0 : g[i]) + cfg.weight_decay * w[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      w[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

Predictions predict(Model& model, std::span<const Bag> bags) {
  Predictions out;
  for (const Bag& bag : bags) {
    const Tensor probs = predict_probs(model, bag);
    const auto row = probs.values();
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    out.predicted.push_back(best);
    out.labels.push_back(bag.label);
    out.positive_scores.push_back(row.size() > 1 ? row[1] : 0.0);
    if (bag.label >= row.size())
      throw DataError("bag '" + bag.id + "': label " + std::to_string(bag.label) + " out of range for " +
                      std::to_string(row.size()) + " classes");
    out.losses.push_back(-std::log(row[bag.label]));
  }
  return out;
}

EvalResult evaluate(Model& model, std::span<const Bag> bags) {
  const Predictions p = predict(model, bags);
  EvalResult r = confusion_metrics(p.predicted, p.labels, model.config().n_classes);
  if (model.config().n_classes == 2) {
    const bool both = std::count(p.labels.begin(), p.labels.end(), 1u) > 0 &&
                      std::count(p.labels.begin(), p.labels.end(), 0u) > 0;
    if (both) r.auc = auc_rank(p.positive_scores, p.labels);
  }
  return r;
}

double mean_loss(Model& model, std::span<const Bag> bags) {
  const Predictions p = predict(model, bags);
  return std::accumulate(p.losses.begin(), p.losses.end(), 0.0) / static_cast<double>(p.losses.size());
}

History fit(Model& model, std::span<const Bag> train, std::span<const Bag> val,
            const std::function<void(const EpochRecord&)>& on_epoch) {
  if (train.empty()) throw ConfigError("fit: empty training split");
  if (val.empty()) throw ConfigError("fit: empty validation split");
  const ModelConfig& cfg = model.config();
  const AdamConfig adam = AdamConfig::from(cfg);
  const auto params = model.parameters();
  AdamState state;
  const Rng shuffle_root = Rng(cfg.seed).child("shuffle");

  History history;
  std::vector<Tensor> best = [&] {
    std::vector<Tensor> snap;
    for (const Tensor* p : params) snap.push_back(*p);
    return snap;
  }();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train.size());
  std::vector<double> bag_loss(train.size());

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = shuffle_root.child(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    for (std::size_t idx : order) {
      const Bag& bag = train[idx];
      for (Tensor* p : params) p->zero_grad();
      ad::Tape tape;
      const ForwardResult fwd = model.forward(tape, bag);
      const std::size_t label[1] = {bag.label};
      const ad::Var loss = cross_entropy_loss(fwd.probs, label);
      const double value = loss.value()[0];
      if (!std::isfinite(value))
        throw NumericError(static_cast<int>(epoch), "non-finite training loss in epoch " +
                                                        std::to_string(epoch) + " (bag '" + bag.id + "')");
      bag_loss[idx] = value;
      tape.backward(loss);
      adam_step(params, state, adam);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    // Summed in bag order, so the value does not depend on the shuffle.
    rec.train_loss = std::accumulate(bag_loss.begin(), bag_loss.end(), 0.0) / static_cast<double>(train.size());
    const Predictions vp = predict(model, val);
    rec.val_loss = std::accumulate(vp.losses.begin(), vp.losses.end(), 0.0) / static_cast<double>(val.size());
    if (!std::isfinite(rec.val_loss))
      throw NumericError(static_cast<int>(epoch), "non-finite validation loss in epoch " + std::to_string(epoch));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < vp.labels.size(); ++i) correct += vp.predicted[i] == vp.labels[i];
    rec.val_accuracy = static_cast<double>(correct) / static_cast<double>(val.size());
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (history.best_epoch == 0 || rec.val_loss < history.best_val_loss) {
      history.best_epoch = epoch;
      history.best_val_loss = rec.val_loss;
      for (std::size_t k = 0; k < params.size(); ++k) best[k] = *params[k];
      since_best = 0;
    } else if (++since_best >= std::max<std::size_t>(cfg.patience, 1)) {
      history.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    *params[k] = best[k];
    params[k]->clear_grad();
  }
  return history;
}

}  // namespace megt
