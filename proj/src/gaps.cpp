#include "ms2tan/gaps.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ms2tan/random.hpp"

namespace ms2tan {

namespace {

constexpr double kPi = 3.14159265358979323846;

void fill_frame(MaskCube& m, Index t, const std::vector<std::uint8_t>& plane) {
  const Dims& d = m.dims();
  for (Index c = 0; c < d.C; ++c)
    for (Index p = 0; p < d.plane_size(); ++p) m[(t * d.C + c) * d.plane_size() + p] = plane[p];
}

double plane_coverage(const std::vector<std::uint8_t>& plane) {
  const auto missing = std::count(plane.begin(), plane.end(), std::uint8_t{0});
  return static_cast<double>(missing) / static_cast<double>(plane.size());
}

std::vector<std::uint8_t> stripe_plane(Index H, Index W, const GapSpec& spec, double phase, double edge_width) {
  const double theta = spec.stripe_angle_deg * kPi / 180.0;
  const double ci = 0.5 * static_cast<double>(H - 1), cj = 0.5 * static_cast<double>(W - 1);
  // Distance from the center line along the scan direction, normalized to [0,1].
  double max_along = 0;
  for (double u : {-ci, ci})
    for (double v : {-cj, cj}) max_along = std::max(max_along, std::abs(-u * std::sin(theta) + v * std::cos(theta)));
  std::vector<std::uint8_t> plane(static_cast<std::size_t>(H * W), 1);
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) {
      const double u = static_cast<double>(i) - ci, v = static_cast<double>(j) - cj;
      const double across = u * std::cos(theta) + v * std::sin(theta) + phase;
      const double along = std::abs(-u * std::sin(theta) + v * std::cos(theta));
      const double width = edge_width * (max_along > 0 ? along / max_along : 0.0);
      double pos = std::fmod(across, spec.stripe_period);
      if (pos < 0) pos += spec.stripe_period;
      if (pos < width) plane[static_cast<std::size_t>(i * W + j)] = 0;
    }
  return plane;
}

}  // namespace

std::string to_string(GapKind kind) { return kind == GapKind::SlcStripes ? "slc" : "cloud"; }

GapKind parse_gap_kind(const std::string& text) {
  if (text == "slc" || text == "slc_stripes") return GapKind::SlcStripes;
  if (text == "cloud" || text == "cloud_blobs") return GapKind::CloudBlobs;
  throw ConfigError("unknown gap kind '" + text + "' (expected slc|cloud)");
}

void GapSpec::validate() const {
  if (!(target_coverage >= 0.0 && target_coverage <= 1.0)) throw ConfigError("target coverage must lie in [0,1]");
  if (!(stripe_period > 0)) throw ConfigError("stripe period must be positive");
  if (stripe_max_width < 0) throw ConfigError("stripe max width must be nonnegative");
  if (!(cloud_cell > 0)) throw ConfigError("cloud cell size must be positive");
  if (cloud_min_blobs < 1 || cloud_max_blobs < cloud_min_blobs) throw ConfigError("invalid cloud blob count range");
}

double frame_coverage(const MaskCube& m, Index t) {
  const auto f = m.frame(t);
  const auto missing = std::count(f.begin(), f.end(), std::uint8_t{0});
  return static_cast<double>(missing) / static_cast<double>(f.size());
}

MaskCube synth_slc_mask(Dims dims, const GapSpec& spec) {
  spec.validate();
  MaskCube m(dims, 1);
  if (spec.target_coverage < GapSpec::kMinCoverage) return m;
  const double max_width =
      spec.stripe_max_width > 0 ? std::min(spec.stripe_max_width, spec.stripe_period) : spec.stripe_period;
  for (Index t = 0; t < dims.T; ++t) {
    Rng rng(derive_seed(spec.seed, "slc.phase", static_cast<std::uint64_t>(t)));
    const double phase = rng.uniform(0.0, spec.stripe_period);
    double lo = 0, hi = max_width;
    std::vector<std::uint8_t> best = stripe_plane(dims.H, dims.W, spec, phase, hi);
    double best_err = std::abs(plane_coverage(best) - spec.target_coverage);
    for (int iter = 0; iter < 40; ++iter) {
      const double mid = 0.5 * (lo + hi);
      auto plane = stripe_plane(dims.H, dims.W, spec, phase, mid);
      const double cov = plane_coverage(plane);
      const double err = std::abs(cov - spec.target_coverage);
      if (err < best_err) {
        best_err = err;
        best = std::move(plane);
      }
      (cov < spec.target_coverage ? lo : hi) = mid;
    }
    if (best_err > GapSpec::kTolerance)
      throw UnreachableCoverage("stripe geometry reaches coverage " +
                                std::to_string(plane_coverage(best)) + " for target " +
                                std::to_string(spec.target_coverage));
    fill_frame(m, t, best);
  }
  return m;
}

std::vector<double> cloud_noise_field(Index H, Index W, double cell, std::uint64_t seed) {
  Rng rng(seed);
  const Index gh = static_cast<Index>(std::ceil(static_cast<double>(H) / cell)) + 2;
  const Index gw = static_cast<Index>(std::ceil(static_cast<double>(W) / cell)) + 2;
  std::vector<double> lattice(static_cast<std::size_t>(gh * gw));
  for (auto& v : lattice) v = rng.uniform();
  const double oi = rng.uniform(0.0, cell), oj = rng.uniform(0.0, cell);
  auto smooth = [](double s) { return s * s * (3.0 - 2.0 * s); };
  std::vector<double> field(static_cast<std::size_t>(H * W));
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) {
      const double fi = (static_cast<double>(i) + oi) / cell, fj = (static_cast<double>(j) + oj) / cell;
      const Index i0 = static_cast<Index>(fi), j0 = static_cast<Index>(fj);
      const double si = smooth(fi - static_cast<double>(i0)), sj = smooth(fj - static_cast<double>(j0));
      auto at = [&](Index a, Index b) { return lattice[static_cast<std::size_t>(a * gw + b)]; };
      const double top = at(i0, j0) * (1 - sj) + at(i0, j0 + 1) * sj;
      const double bottom = at(i0 + 1, j0) * (1 - sj) + at(i0 + 1, j0 + 1) * sj;
      field[static_cast<std::size_t>(i * W + j)] = top * (1 - si) + bottom * si;
    }
  return field;
}

std::vector<std::uint8_t> threshold_field(const std::vector<double>& field, double threshold) {
  std::vector<std::uint8_t> observed(field.size());
  for (std::size_t k = 0; k < field.size(); ++k) observed[k] = field[k] > threshold ? 0 : 1;
  return observed;
}

Index count_missing_components(const std::vector<std::uint8_t>& observed, Index H, Index W) {
  std::vector<std::uint8_t> seen(observed.size(), 0);
  std::vector<Index> stack;
  Index components = 0;
  for (Index start = 0; start < H * W; ++start) {
    if (observed[start] || seen[start]) continue;
    ++components;
    stack.push_back(start);
    seen[start] = 1;
    while (!stack.empty()) {
      const Index p = stack.back();
      stack.pop_back();
      const Index i = p / W, j = p % W;
      const Index nbrs[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[0] >= H || nb[1] < 0 || nb[1] >= W) continue;
        const Index q = nb[0] * W + nb[1];
        if (observed[q] || seen[q]) continue;
        seen[q] = 1;
        stack.push_back(q);
      }
    }
  }
  return components;
}

MaskCube synth_cloud_mask(Dims dims, const GapSpec& spec) {
  spec.validate();
  MaskCube m(dims, 1);
  if (spec.target_coverage < GapSpec::kMinCoverage) return m;
  const Index plane = dims.plane_size();
  const auto missing = static_cast<Index>(std::llround(spec.target_coverage * static_cast<double>(plane)));
  constexpr int kAttempts = 64;
  for (Index t = 0; t < dims.T; ++t) {
    bool placed = false;
    for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
      const auto seed = derive_seed(spec.seed, "cloud.frame", static_cast<std::uint64_t>(t) * kAttempts + attempt);
      const auto field = cloud_noise_field(dims.H, dims.W, spec.cloud_cell, seed);
      std::vector<std::uint8_t> observed;
      if (missing >= plane) {
        observed = threshold_field(field, -std::numeric_limits<double>::infinity());
      } else {
        // The `missing` highest field values become the cloud.
        std::vector<Index> order(static_cast<std::size_t>(plane));
        std::iota(order.begin(), order.end(), Index{0});
        std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return field[a] > field[b]; });
        observed.assign(static_cast<std::size_t>(plane), 1);
        for (Index k = 0; k < missing; ++k) observed[static_cast<std::size_t>(order[k])] = 0;
      }
      const Index blobs = count_missing_components(observed, dims.H, dims.W);
      if (missing > 0 && (blobs < spec.cloud_min_blobs || blobs > spec.cloud_max_blobs)) continue;
      fill_frame(m, t, observed);
      placed = true;
    }
    if (!placed)
      throw UnreachableCoverage("no cloud field with blob count in [" + std::to_string(spec.cloud_min_blobs) + ", " +
                                std::to_string(spec.cloud_max_blobs) + "] after " + std::to_string(kAttempts) +
                                " attempts");
  }
  return m;
}

MaskCube synth_mask(Dims dims, const GapSpec& spec) {
  return spec.kind == GapKind::SlcStripes ? synth_slc_mask(dims, spec) : synth_cloud_mask(dims, spec);
}

SequenceCube synth_scene(Dims dims, std::uint64_t seed) {
  SequenceCube cube(dims);
  Rng rng(derive_seed(seed, "scene"));
  const double H = static_cast<double>(dims.H), W = static_cast<double>(dims.W);

  struct Wave {
    double fi, fj, phase, amp;
  };
  struct Feature {
    double ci, cj, ri, rj, vi, vj;
    std::vector<double> contrast;
  };

  std::vector<double> base(static_cast<std::size_t>(dims.C)), trend(static_cast<std::size_t>(dims.C));
  std::vector<std::vector<Wave>> waves(static_cast<std::size_t>(dims.C));
  for (Index c = 0; c < dims.C; ++c) {
    base[c] = rng.uniform(0.25, 0.55);
    trend[c] = rng.uniform(-0.015, 0.015);
    for (int k = 0; k < 4; ++k)
      waves[c].push_back({rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(0.0, 2 * kPi),
                          rng.uniform(0.03, 0.09)});
  }
  std::vector<Feature> features(3);
  for (auto& f : features) {
    f.ci = rng.uniform(0.0, H);
    f.cj = rng.uniform(0.0, W);
    f.ri = rng.uniform(H / 8.0, H / 4.0);
    f.rj = rng.uniform(W / 8.0, W / 4.0);
    f.vi = rng.uniform(-1.0, 1.0);
    f.vj = rng.uniform(-1.0, 1.0);
    for (Index c = 0; c < dims.C; ++c) f.contrast.push_back(rng.uniform(-0.25, 0.25));
  }
  for (Index t = 0; t < dims.T; ++t)
    for (Index c = 0; c < dims.C; ++c)
      for (Index i = 0; i < dims.H; ++i)
        for (Index j = 0; j < dims.W; ++j) {
          double v = base[c] + trend[c] * static_cast<double>(t);
          for (const auto& w : waves[c])
            v += w.amp * std::sin(2 * kPi * (w.fi * static_cast<double>(i) / H + w.fj * static_cast<double>(j) / W) +
                                  w.phase);
          for (const auto& f : features) {
            const double di = (static_cast<double>(i) - f.ci - f.vi * static_cast<double>(t)) / f.ri;
            const double dj = (static_cast<double>(j) - f.cj - f.vj * static_cast<double>(t)) / f.rj;
            v += f.contrast[c] * std::exp(-(di * di + dj * dj));
          }
          cube(t, c, i, j) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
  return cube;
}

SequenceCube normalize(const Cube<std::int32_t>& raw, std::int32_t lo, std::int32_t hi) {
  if (hi <= 0 || lo > hi) throw ConfigError("normalize: need 0 < hi and lo <= hi");
  SequenceCube out(raw.dims());
  for (Index k = 0; k < raw.size(); ++k) {
    const std::int32_t v = std::clamp(raw.data()[k], lo, hi);
    out.data()[k] = static_cast<float>(static_cast<double>(v) / static_cast<double>(hi));
  }
  return out;
}

SequenceCube apply_gaps(const SequenceCube& clean, const MaskCube& m) {
  validate_pair(clean, m);
  SequenceCube out(clean.dims());
  for (Index k = 0; k < clean.size(); ++k) out.data()[k] = m[k] ? clean.data()[k] : 0.0f;
  return out;
}

}  // namespace ms2tan
