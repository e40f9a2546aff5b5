#pragma once

#include <cstdint>
#include <string_view>

namespace megt {

/// Counter-based random stream: draw i is mix(key, i), so a stream's output
/// depends only on its key and how many values were drawn from it. Child
/// streams are keyed by hashing a path component into the parent key, which
/// keeps unrelated components independent of each other's draw order.
class Rng {
public:
  explicit Rng(std::uint64_t seed) noexcept;

  /// Independent stream for a named sub-component, e.g. child("high").child("gtl/W_Q").
  Rng child(std::string_view name) const noexcept;
  Rng child(std::uint64_t index) const noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (no cached spare, so every draw uses two counters).
  double normal() noexcept;
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

private:
  Rng(std::uint64_t key, int) noexcept : key_(key) {}
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace megt
