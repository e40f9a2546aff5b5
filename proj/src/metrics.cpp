#include "megt/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "megt/errors.hpp"

namespace megt {

EvalResult confusion_metrics(std::span<const std::size_t> predictions,
                             std::span<const std::size_t> labels, std::size_t classes) {
  if (predictions.size() != labels.size())
    throw DataError("confusion_metrics: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(labels.size()) + " labels");
  if (labels.empty()) throw DataError("confusion_metrics: no samples");
  EvalResult r;
  r.n = labels.size();
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predictions[i] >= classes)
      throw DataError("confusion_metrics: class index out of range for " + std::to_string(classes) +
                      " classes");
    ++r.confusion[labels[i]][predictions[i]];
  }
  std::size_t correct = 0;
  double recall_sum = 0.0, f1_sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t tp = r.confusion[c][c];
    correct += tp;
    const std::size_t support = std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t{0});
    std::size_t predicted = 0;
    for (std::size_t t = 0; t < classes; ++t) predicted += r.confusion[t][c];
    const double recall = support == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(support);
    const double precision = predicted == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(predicted);
    recall_sum += recall;
    f1_sum += (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);
  r.recall_macro = recall_sum / static_cast<double>(classes);
  r.f1_macro = f1_sum / static_cast<double>(classes);
  return r;
}

double auc_rank(std::span<const double> scores, std::span<const std::size_t> labels) {
  if (scores.size() != labels.size()) throw DataError("auc_rank: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks (1-based) over tied groups.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] > 1) throw DataError("auc_rank: labels must be binary");
    if (labels[i] == 1) {
      rank_pos += rank[i];
      ++n_pos;
    }
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("auc_rank: AUC undefined with a single class present");
  const double np = static_cast<double>(n_pos);
  return (rank_pos - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

}  // namespace megt
