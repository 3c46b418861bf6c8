#pragma once

#include <cstdint>
#include <filesystem>

#include "qfat/backbone.hpp"

namespace qfat {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Flat binary parameter file:
///   "QFAT" | version u32 | count u32 |
///   per parameter: name_len u16 | name bytes | rank u8 | dims u32[rank] | f32[prod(dims)]
/// All integers and floats little-endian.
void save_parameters(const std::filesystem::path& path, const ParameterStore<float>& store);

/// Throws ValidationError on a bad magic, unknown version or truncated file.
ParameterStore<float> load_parameters(const std::filesystem::path& path);

/// Copies values from `loaded` into `target`, requiring identical names,
/// order and shapes.
void assign_parameters(ParameterStore<float>& target, const ParameterStore<float>& loaded);

}  // namespace qfat
