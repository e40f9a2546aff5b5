#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "megt/attention.hpp"

namespace megt {

enum class Arch {
  megt,       // two EGT branches + MFFM exchange
  egt_low,    // single low-resolution EGT classifier
  egt_high,   // single high-resolution EGT classifier
  mean_pool,  // per-resolution mean, concatenated, linear classifier
};

/// Architecture and training hyperparameters. Serialized as key=value text;
/// keys are the field names.
struct ModelConfig {
  std::size_t d_in = 64;
  std::size_t d_model = 128;
  std::size_t n_heads = 8;
  std::size_t k_keep = 128;
  std::size_t m_landmarks = 32;
  std::size_t pinv_iters = 6;
  std::size_t egt_depth = 1;
  std::size_t l_low = 1;
  std::size_t l_high = 2;
  std::size_t k_mffm = 2;
  std::size_t n_classes = 2;
  std::size_t mlp_ratio = 4;
  bool enable_tpm = true;
  bool enable_gtl = true;
  AttentionKind attention = AttentionKind::nystrom;
  Arch arch = Arch::megt;
  double ln_eps = 1e-5;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_epochs = 150;
  std::size_t patience = 30;
  std::uint64_t seed = 0;

  /// Throws ConfigError for an unknown key or an unparsable value.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  static const std::vector<std::string>& keys();

  /// Checks cross-field invariants (heads divide d_model, k_mffm >= 1, ...).
  void validate() const;

  /// One `key=value` line per key in canonical order; doubles round-trip exactly.
  std::string to_text() const;
  /// Parses key=value lines over the defaults. Blank and '#' lines are skipped.
  static ModelConfig from_text(std::string_view text);
  /// Applies a key=value file on top of this config.
  void apply_text(std::string_view text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_string(Arch arch);
std::string to_string(AttentionKind kind);
std::string format_double(double x);

}  // namespace megt
