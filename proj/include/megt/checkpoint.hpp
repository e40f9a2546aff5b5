#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "megt/model.hpp"

namespace megt {

/// Checkpoint layout: "MEGM", u16 version, u32 config length + key=value text,
/// then per parameter in canonical order: u16 name length, UTF-8 name,
/// u32 rows, u32 cols, rows*cols little-endian float64.
std::vector<std::uint8_t> encode_checkpoint(Model& model);
Model decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace megt
