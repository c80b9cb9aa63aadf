#pragma once

#include <filesystem>
#include <string>

#include "ms2tan/types.hpp"

namespace ms2tan {

/// Cube files are a JSON header `<base>.json` ({dims, dtype, kind, version}) plus a raw
/// little-endian blob `<base>.bin` in (t, c, i, j) row-major order. Values use dtype
/// "f32le", masks use "u8".
inline constexpr int kCubeFileVersion = 1;

/// Strips a trailing .json or .bin so either file (or the bare base) names the pair.
std::filesystem::path cube_basename(const std::filesystem::path& path);

void write_cube(const std::filesystem::path& path, const SequenceCube& cube);
void write_mask(const std::filesystem::path& path, const MaskCube& mask);

SequenceCube read_cube(const std::filesystem::path& path);
MaskCube read_mask(const std::filesystem::path& path);

/// Binary PGM (first band) or PPM (first three bands) render of frame t, values clamped to [0,1].
void write_frame_render(const std::filesystem::path& path, const SequenceCube& cube, Index t);

}  // namespace ms2tan
