#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace megt {

struct EvalResult {
  double accuracy = 0.0;
  double recall_macro = 0.0;
  double f1_macro = 0.0;
  std::optional<double> auc;  // binary tasks only
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t n = 0;
};

/// Accuracy and macro recall/F1. A class with no support contributes recall 0
/// (and F1 0) and still counts in the macro mean.
EvalResult confusion_metrics(std::span<const std::size_t> predictions,
                             std::span<const std::size_t> labels, std::size_t classes);

/// Mann-Whitney AUC with midranks for ties. labels are 0/1.
double auc_rank(std::span<const double> scores, std::span<const std::size_t> labels);

}  // namespace megt
