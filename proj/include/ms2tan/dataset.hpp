#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ms2tan/gaps.hpp"
#include "ms2tan/types.hpp"

namespace ms2tan {

enum class Split { Train, Valid, Test };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct DatasetSpec {
  Index samples = 100;
  Dims dims{4, 2, 24, 24};
  std::vector<GapSpec> gaps{GapSpec{}};  // sample i uses gaps[i % gaps.size()]
  std::array<double, 3> split_ratios{0.64, 0.16, 0.20};
  std::uint64_t seed = 0;

  void validate() const;
};

struct SampleEntry {
  std::string clean;   // basenames relative to the dataset directory
  std::string gapped;
  std::string mask;
  Split split = Split::Train;
  double coverage = 0;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t seed = 0;
  Dims dims;
  std::vector<SampleEntry> samples;

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
  Index count(Split split) const;
};

/// Train / valid / test sizes: round(r0 * n), round(r1 * n), remainder.
std::array<Index, 3> split_counts(Index n, const std::array<double, 3>& ratios);

/// Writes every sample triple (clean, gapped, mask) plus `manifest.json` into `out_dir`.
DatasetManifest make_dataset(const std::filesystem::path& out_dir, const DatasetSpec& spec);

DatasetManifest load_manifest(const std::filesystem::path& dir);

struct Sample {
  SequenceCube clean;
  SequenceCube gapped;
  MaskCube mask;
};

std::vector<Sample> load_split(const std::filesystem::path& dir, const DatasetManifest& manifest, Split split);

}  // namespace ms2tan
