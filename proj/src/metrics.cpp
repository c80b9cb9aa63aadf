#include "ms2tan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <vector>

#include "json.hpp"

namespace ms2tan {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_inputs(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& region) {
  require_same_dims(pred, truth, "metric");
  if (!(region.dims() == pred.dims())) throw DimMismatch("metric: region dims " + region.dims().str());
  for (Index k = 0; k < region.size(); ++k)
    if (region[k]) return;
  throw EmptyRegion("evaluation region contains no entries");
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

std::string to_string(RegionKind region) { return region == RegionKind::GapOnly ? "gap" : "full"; }

RegionKind parse_region(const std::string& text) {
  if (text == "gap" || text == "gap-only") return RegionKind::GapOnly;
  if (text == "full") return RegionKind::Full;
  throw ConfigError("unknown region '" + text + "' (expected gap|full)");
}

MaskCube make_region(const MaskCube& m, RegionKind region) {
  MaskCube r(m.dims(), 1);
  if (region == RegionKind::GapOnly)
    for (Index k = 0; k < m.size(); ++k) r[k] = m[k] ? 0 : 1;
  return r;
}

double mae(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& region) {
  check_inputs(pred, truth, region);
  double sum = 0;
  Index count = 0;
  for (Index k = 0; k < pred.size(); ++k) {
    if (!region[k]) continue;
    sum += std::abs(static_cast<double>(pred.data()[k]) - static_cast<double>(truth.data()[k]));
    ++count;
  }
  return sum / static_cast<double>(count);
}

double psnr(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& region, double peak) {
  check_inputs(pred, truth, region);
  const Dims& d = pred.dims();
  const Index fs = d.frame_size();
  double total = 0;
  Index frames = 0;
  for (Index t = 0; t < d.T; ++t) {
    double se = 0;
    Index count = 0;
    for (Index k = t * fs; k < (t + 1) * fs; ++k) {
      if (!region[k]) continue;
      const double e = static_cast<double>(pred.data()[k]) - static_cast<double>(truth.data()[k]);
      se += e * e;
      ++count;
    }
    if (count == 0) continue;
    const double mse = se / static_cast<double>(count);
    if (mse == 0) return std::numeric_limits<double>::infinity();
    total += 10.0 * std::log10(peak * peak / mse);
    ++frames;
  }
  return total / static_cast<double>(frames);
}

double sam(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& region) {
  check_inputs(pred, truth, region);
  const Dims& d = pred.dims();
  double total = 0;
  Index count = 0;
  for (Index t = 0; t < d.T; ++t)
    for (Index i = 0; i < d.H; ++i)
      for (Index j = 0; j < d.W; ++j) {
        bool any = false;
        double na = 0, nb = 0;
        for (Index c = 0; c < d.C; ++c) {
          any = any || region(t, c, i, j);
          const double a = pred(t, c, i, j), b = truth(t, c, i, j);
          na += a * a;
          nb += b * b;
        }
        if (!any || na == 0 || nb == 0) continue;
        // 2 atan2(|u - v|, |u + v|) for unit u, v; exact for identical directions.
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        double diff = 0, sum = 0;
        for (Index c = 0; c < d.C; ++c) {
          const double u = pred(t, c, i, j) / na, v = truth(t, c, i, j) / nb;
          diff += (u - v) * (u - v);
          sum += (u + v) * (u + v);
        }
        total += 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum)) * 180.0 / kPi;
        ++count;
      }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

double ssim_plane(const float* a, const float* b, Index H, Index W) {
  constexpr Index kWin = 11;
  constexpr double kSigma = 1.5;
  constexpr double C1 = 1e-4, C2 = 9e-4;
  if (H < kWin || W < kWin) throw TooSmall("windowed SSIM needs H, W >= 11");
  std::vector<double> g(kWin);
  double gsum = 0;
  for (Index k = 0; k < kWin; ++k) {
    const double x = static_cast<double>(k - kWin / 2);
    g[k] = std::exp(-x * x / (2 * kSigma * kSigma));
    gsum += g[k];
  }
  for (auto& v : g) v /= gsum;
  double total = 0;
  Index windows = 0;
  for (Index i0 = 0; i0 + kWin <= H; ++i0)
    for (Index j0 = 0; j0 + kWin <= W; ++j0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (Index di = 0; di < kWin; ++di)
        for (Index dj = 0; dj < kWin; ++dj) {
          const double w = g[di] * g[dj];
          const double va = a[(i0 + di) * W + j0 + dj], vb = b[(i0 + di) * W + j0 + dj];
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * va * vb;
        }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
      ++windows;
    }
  return total / static_cast<double>(windows);
}

double ssim_metric(const SequenceCube& pred, const SequenceCube& truth) {
  require_same_dims(pred, truth, "ssim_metric");
  const Dims& d = pred.dims();
  const Index plane = d.plane_size();
  double total = 0;
  for (Index s = 0; s < d.T * d.C; ++s)
    total += ssim_plane(pred.data().data() + s * plane, truth.data().data() + s * plane, d.H, d.W);
  return total / static_cast<double>(d.T * d.C);
}

std::string to_string(BaselineMethod method) {
  switch (method) {
    case BaselineMethod::Last: return "last";
    case BaselineMethod::Nearest: return "nearest";
    case BaselineMethod::Linear: return "linear";
  }
  return "?";
}

BaselineMethod parse_baseline(const std::string& text) {
  if (text == "last") return BaselineMethod::Last;
  if (text == "nearest") return BaselineMethod::Nearest;
  if (text == "linear") return BaselineMethod::Linear;
  throw ConfigError("unknown baseline '" + text + "'");
}

SequenceCube baseline_impute(const SequenceCube& x, const MaskCube& m, BaselineMethod method) {
  validate_pair(x, m);
  const Dims& d = x.dims();
  SequenceCube out = x;
  std::vector<Index> observed;
  for (Index c = 0; c < d.C; ++c)
    for (Index i = 0; i < d.H; ++i)
      for (Index j = 0; j < d.W; ++j) {
        observed.clear();
        for (Index t = 0; t < d.T; ++t)
          if (m(t, c, i, j)) observed.push_back(t);
        if (observed.empty()) {
          for (Index t = 0; t < d.T; ++t) out(t, c, i, j) = 0.5f;
          continue;
        }
        std::size_t next = 0;  // first observed index >= t
        for (Index t = 0; t < d.T; ++t) {
          while (next < observed.size() && observed[next] < t) ++next;
          if (next < observed.size() && observed[next] == t) continue;
          const bool has_before = next > 0;
          const bool has_after = next < observed.size();
          const Index before = has_before ? observed[next - 1] : -1;
          const Index after = has_after ? observed[next] : -1;
          float value = 0;
          switch (method) {
            case BaselineMethod::Last:
              value = has_before ? x(before, c, i, j) : x(after, c, i, j);
              break;
            case BaselineMethod::Nearest:
              if (has_before && (!has_after || t - before <= after - t))
                value = x(before, c, i, j);
              else
                value = x(after, c, i, j);
              break;
            case BaselineMethod::Linear:
              if (has_before && has_after) {
                const double w = static_cast<double>(t - before) / static_cast<double>(after - before);
                value = static_cast<float>((1.0 - w) * x(before, c, i, j) + w * x(after, c, i, j));
              } else {
                value = has_before ? x(before, c, i, j) : x(after, c, i, j);
              }
              break;
          }
          out(t, c, i, j) = value;
        }
      }
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  auto num = [](double v) -> nlohmann::ordered_json {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
  };
  j["mae"] = num(mae);
  j["sam_degrees"] = num(sam_degrees);
  j["psnr_db"] = num(psnr_db);
  j["ssim"] = num(ssim);
  j["pixel_count"] = pixel_count;
  j["region"] = to_string(region);
  return j.dump();
}

std::string EvalReport::csv_header() { return "mae,sam_degrees,psnr_db,ssim,pixel_count,region"; }

std::string EvalReport::to_csv_row() const {
  return format_double(mae) + "," + format_double(sam_degrees) + "," + format_double(psnr_db) + "," +
         format_double(ssim) + "," + std::to_string(pixel_count) + "," + to_string(region);
}

EvalReport evaluate(const SequenceCube& pred, const SequenceCube& truth, const MaskCube& m, RegionKind region) {
  const MaskCube r = make_region(m, region);
  EvalReport report;
  report.region = region;
  report.mae = mae(pred, truth, r);
  report.psnr_db = psnr(pred, truth, r);
  report.sam_degrees = sam(pred, truth, r);
  report.ssim = ssim_metric(pred, truth);
  report.pixel_count = 0;
  for (Index k = 0; k < r.size(); ++k) report.pixel_count += r[k];
  return report;
}

}  // namespace ms2tan
