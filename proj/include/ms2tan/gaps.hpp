#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ms2tan/types.hpp"

namespace ms2tan {

enum class GapKind { SlcStripes, CloudBlobs };

std::string to_string(GapKind kind);
GapKind parse_gap_kind(const std::string& text);

/// Synthetic gap generator settings. Targets below kMinCoverage produce an
/// all-observed mask.
struct GapSpec {
  static constexpr double kMinCoverage = 0.01;
  static constexpr double kTolerance = 0.05;

  GapKind kind = GapKind::CloudBlobs;
  double target_coverage = 0.3;
  std::uint64_t seed = 0;

  // Stripes: scan-line gaps tilted by `stripe_angle_deg`, repeating every `stripe_period`
  // pixels; width is zero on the image center line and grows linearly to at most
  // `stripe_max_width` (0 means one period) at the image edge.
  double stripe_angle_deg = 8.0;
  double stripe_period = 8.0;
  double stripe_max_width = 0.0;

  // Clouds: thresholded value noise on a lattice with `cloud_cell` pixel spacing; the
  // number of 4-connected blobs per frame must lie in [cloud_min_blobs, cloud_max_blobs].
  double cloud_cell = 6.0;
  Index cloud_min_blobs = 1;
  Index cloud_max_blobs = 12;

  void validate() const;
};

/// Diagonal SLC-off style stripes; identical across bands within a frame.
MaskCube synth_slc_mask(Dims dims, const GapSpec& spec);

/// Smoothed value-noise cloud blobs; identical across bands within a frame.
MaskCube synth_cloud_mask(Dims dims, const GapSpec& spec);

MaskCube synth_mask(Dims dims, const GapSpec& spec);

/// Smooth value-noise field in [0,1] for one frame.
std::vector<double> cloud_noise_field(Index H, Index W, double cell, std::uint64_t seed);

/// Observed flags for a field: an entry is missing (0) iff field > threshold.
std::vector<std::uint8_t> threshold_field(const std::vector<double>& field, double threshold);

/// Number of 4-connected components of missing (0) entries in an H x W plane.
Index count_missing_components(const std::vector<std::uint8_t>& observed, Index H, Index W);

/// Fraction of missing entries in frame t.
double frame_coverage(const MaskCube& m, Index t);

/// Smooth synthetic multi-band scene: sinusoidal terrain, drifting elliptical features and
/// slow per-band brightness trends, clamped to [0,1].
SequenceCube synth_scene(Dims dims, std::uint64_t seed);

/// Clamp raw integer reflectance to [lo, hi] and divide by hi.
SequenceCube normalize(const Cube<std::int32_t>& raw, std::int32_t lo = 0, std::int32_t hi = 10000);

/// Clean cube with missing entries set to 0.
SequenceCube apply_gaps(const SequenceCube& clean, const MaskCube& m);

}  // namespace ms2tan
