#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "megt/tensor.hpp"

namespace megt {

/// One slide: instance features at two resolutions and a bag label.
struct Bag {
  Tensor low;   // n_low x d
  Tensor high;  // n_high x d
  std::size_t label = 0;
  std::string id;

  std::size_t width() const noexcept { return low.cols(); }
  /// Throws DataError when either resolution is empty or widths differ.
  void validate() const;
};

enum class SynthTask { witness, cross_scale };

struct SynthSpec {
  SynthTask task = SynthTask::cross_scale;
  std::size_t bags = 600;
  std::size_t n_low_min = 64;
  std::size_t n_low_max = 96;
  std::size_t children_per_low = 4;
  std::size_t d = 64;
  double signal_strength = 3.0;
  double noise = 1.0;
  /// cross_scale bag-type probabilities for (11, 10, 01, 00).
  double type_probs[4] = {0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0};
  double signal_fraction = 0.25;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Bag composition of a cross_scale bag: which resolutions carry signal.
struct BagType {
  bool low_signal = false;
  bool high_signal = false;
};

struct SyntheticSet {
  std::vector<Bag> bags;
  std::vector<BagType> types;
  Tensor low_direction;   // 1 x d unit vector (scaled by s when injected)
  Tensor high_direction;  // 1 x d unit vector, orthogonal to low_direction
};

/// Deterministic in the spec (including seed). Features are rounded to float
/// precision so the on-disk format round-trips bitwise.
SyntheticSet generate_synthetic(const SynthSpec& spec);

SynthTask parse_task(std::string_view name);

/// Bag file: "MEGB", u16 version=1, u8 label, u8 reserved=0, u32 n_low, u32 n_high,
/// u32 d, then low and high features as little-endian float32, row-major.
void write_bag(const Bag& bag, const std::filesystem::path& path);
Bag read_bag(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_bag(const Bag& bag);
Bag decode_bag(std::span<const std::uint8_t> bytes, std::string id = {});

enum class Split { train, val, test };
Split parse_split(std::string_view token);
std::string to_string(Split split);

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  std::size_t label = 0;
  Split split = Split::train;
  std::size_t line = 0;
};

/// Parses `relative_path<TAB>label<TAB>split` lines; '#' lines and blank lines ignored.
std::vector<ManifestEntry> parse_manifest(std::string_view text);

struct Dataset {
  std::vector<Bag> train, val, test;
  const std::vector<Bag>& split(Split s) const;
};

/// Loads every bag of a manifest. The manifest label must match the bag file label.
Dataset load_manifest(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

}  // namespace megt
