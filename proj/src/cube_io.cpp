#include "ms2tan/cube_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"

namespace ms2tan {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

fs::path with_ext(const fs::path& base, const char* ext) {
  fs::path p = base;
  p += ext;
  return p;
}

void write_header(const fs::path& base, const Dims& d, const char* dtype, const char* kind) {
  ordered_json h;
  h["dims"] = {d.T, d.C, d.H, d.W};
  h["dtype"] = dtype;
  h["kind"] = kind;
  h["version"] = kCubeFileVersion;
  std::ofstream out(with_ext(base, ".json"), std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + with_ext(base, ".json").string() + " for writing");
  out << h.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + with_ext(base, ".json").string());
}

void write_blob(const fs::path& base, const std::vector<unsigned char>& bytes) {
  std::ofstream out(with_ext(base, ".bin"), std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + with_ext(base, ".bin").string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + with_ext(base, ".bin").string());
}

struct Header {
  Dims dims;
  std::string dtype;
  std::string kind;
};

Header read_header(const fs::path& base) {
  const fs::path path = with_ext(base, ".json");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  ordered_json h;
  try {
    h = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  Header out;
  try {
    if (h.at("version").get<int>() != kCubeFileVersion)
      throw FormatError(path.string() + ": unsupported version " + h.at("version").dump());
    const auto& dims = h.at("dims");
    if (!dims.is_array() || dims.size() != 4) throw FormatError(path.string() + ": dims must have 4 entries");
    for (const auto& v : dims)
      if (!v.is_number_integer() || v.get<long long>() < 1) throw FormatError(path.string() + ": dims must be >= 1");
    out.dims = {dims[0].get<Index>(), dims[1].get<Index>(), dims[2].get<Index>(), dims[3].get<Index>()};
    out.dtype = h.at("dtype").get<std::string>();
    out.kind = h.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  return out;
}

std::vector<unsigned char> read_blob(const fs::path& base, std::size_t expected) {
  const fs::path path = with_ext(base, ".bin");
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != expected)
    throw FormatError(path.string() + ": blob holds " + std::to_string(size) + " bytes, header implies " +
                      std::to_string(expected));
  in.seekg(0);
  std::vector<unsigned char> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("failed reading " + path.string());
  return bytes;
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  return v;
}

}  // namespace

fs::path cube_basename(const fs::path& path) {
  if (path.extension() == ".json" || path.extension() == ".bin") {
    fs::path p = path;
    return p.replace_extension();
  }
  return path;
}

void write_cube(const fs::path& path, const SequenceCube& cube) {
  const fs::path base = cube_basename(path);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(cube.size()) * 4);
  for (Index k = 0; k < cube.size(); ++k) {
    const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(cube.data()[k]));
    std::memcpy(bytes.data() + 4 * k, &bits, 4);
  }
  write_header(base, cube.dims(), "f32le", "values");
  write_blob(base, bytes);
}

void write_mask(const fs::path& path, const MaskCube& mask) {
  const fs::path base = cube_basename(path);
  std::vector<unsigned char> bytes(mask.flags().begin(), mask.flags().end());
  write_header(base, mask.dims(), "u8", "mask");
  write_blob(base, bytes);
}

SequenceCube read_cube(const fs::path& path) {
  const fs::path base = cube_basename(path);
  const Header h = read_header(base);
  if (h.dtype != "f32le" || h.kind != "values")
    throw FormatError(base.string() + ": expected dtype f32le / kind values, got " + h.dtype + " / " + h.kind);
  const auto bytes = read_blob(base, static_cast<std::size_t>(h.dims.size()) * 4);
  SequenceCube cube(h.dims);
  for (Index k = 0; k < cube.size(); ++k) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * k, 4);
    cube.data()[k] = std::bit_cast<float>(to_little(bits));
  }
  return cube;
}

MaskCube read_mask(const fs::path& path) {
  const fs::path base = cube_basename(path);
  const Header h = read_header(base);
  if (h.dtype != "u8" || h.kind != "mask")
    throw FormatError(base.string() + ": expected dtype u8 / kind mask, got " + h.dtype + " / " + h.kind);
  const auto bytes = read_blob(base, static_cast<std::size_t>(h.dims.size()));
  MaskCube mask(h.dims, 0);
  for (std::size_t k = 0; k < bytes.size(); ++k) {
    if (bytes[k] > 1) throw FormatError(base.string() + ": mask byte " + std::to_string(bytes[k]) + " is not 0/1");
    mask.flags()[k] = bytes[k];
  }
  return mask;
}

void write_frame_render(const fs::path& path, const SequenceCube& cube, Index t) {
  const Dims& d = cube.dims();
  const Index channels = d.C >= 3 ? 3 : 1;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << (channels == 3 ? "P6" : "P5") << '\n' << d.W << ' ' << d.H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(d.W * channels));
  for (Index i = 0; i < d.H; ++i) {
    for (Index j = 0; j < d.W; ++j)
      for (Index c = 0; c < channels; ++c) {
        const double v = std::clamp(static_cast<double>(cube(t, c, i, j)), 0.0, 1.0);
        row[static_cast<std::size_t>(j * channels + c)] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace ms2tan
