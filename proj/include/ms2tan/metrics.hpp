#pragma once

#include <limits>
#include <string>

#include "ms2tan/types.hpp"

namespace ms2tan {

enum class RegionKind { GapOnly, Full };

std::string to_string(RegionKind region);
RegionKind parse_region(const std::string& text);

/// Evaluation region flags (1 = included): missing entries for GapOnly, everything for Full.
MaskCube make_region(const MaskCube& m, RegionKind region);

double mae(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& region);

/// Per-frame 10*log10(peak^2 / MSE) over region entries, averaged over frames that
/// contain region entries. Any zero-error frame makes the result +infinity.
double psnr(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& region, double peak = 1.0);

/// Mean spectral angle in degrees over pixels (t, i, j) with at least one region band.
/// Pixels where either spectrum has zero norm are skipped.
double sam(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& region);

/// Windowed SSIM (11x11 Gaussian, sigma 1.5, valid windows) averaged over frames and bands.
double ssim_metric(const SequenceCube& pred, const SequenceCube& truth);

/// Windowed SSIM of one H x W plane.
double ssim_plane(const float* a, const float* b, Index H, Index W);

enum class BaselineMethod { Last, Nearest, Linear };

std::string to_string(BaselineMethod method);
BaselineMethod parse_baseline(const std::string& text);

/// Temporal gap filling per (c, i, j) series; observed entries are copied unchanged and
/// series without observations are filled with 0.5.
SequenceCube baseline_impute(const SequenceCube& x, const MaskCube& m, BaselineMethod method);

struct EvalReport {
  double mae = 0;
  double sam_degrees = 0;
  double psnr_db = 0;
  double ssim = 0;
  Index pixel_count = 0;
  RegionKind region = RegionKind::GapOnly;

  std::string to_json() const;
  std::string to_csv_row() const;
  static std::string csv_header();
};

EvalReport evaluate(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& m,
                    RegionKind region = RegionKind::GapOnly);

}  // namespace ms2tan
