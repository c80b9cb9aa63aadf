#include "doctest.h"

#include <cmath>
#include <limits>

#include "json.hpp"
#include "ms2tan/metrics.hpp"
#include "ms2tan/random.hpp"

using namespace ms2tan;

namespace {

SequenceCube random_cube(Dims d, std::uint64_t seed) {
  Rng rng(seed);
  SequenceCube x(d);
  for (Index k = 0; k < x.size(); ++k) x.data()[k] = static_cast<float>(rng.uniform());
  return x;
}

SequenceCube series(std::initializer_list<float> values) {
  SequenceCube x({static_cast<Index>(values.size()), 1, 1, 1});
  Index k = 0;
  for (float v : values) x.data()[k++] = v;
  return x;
}

MaskCube series_mask(std::initializer_list<int> flags) {
  MaskCube m({static_cast<Index>(flags.size()), 1, 1, 1});
  Index k = 0;
  for (int f : flags) m[k++] = static_cast<std::uint8_t>(f);
  return m;
}

// Direct 11x11 Gaussian-window SSIM over valid windows.
double ref_ssim_plane(const std::vector<double>& a, const std::vector<double>& b, int H, int W) {
  double w[11][11];
  double z = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) z += (w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5)));
  double total = 0;
  int count = 0;
  for (int r = 0; r + 11 <= H; ++r)
    for (int c = 0; c + 11 <= W; ++c) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double g = w[i][j] / z, x = a[(r + i) * W + c + j], y = b[(r + i) * W + c + j];
          ma += g * x;
          mb += g * y;
          saa += g * x * x;
          sbb += g * y * y;
          sab += g * x * y;
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      total += (2 * ma * mb + 1e-4) * (2 * cov + 9e-4) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
      ++count;
    }
  return total / count;
}

}  // namespace

TEST_CASE("mae") {
  const auto t = random_cube({2, 2, 4, 4}, 1);
  const MaskCube all(t.dims());
  CHECK(mae(t, t, all) == 0.0);
  SequenceCube shifted = t;
  shifted.data() += 0.0074f;
  CHECK(mae(shifted, t, all) == doctest::Approx(0.0074).epsilon(1e-4));

  SequenceCube p({1, 1, 1, 2}), q({1, 1, 1, 2}, 1.0f);
  p.data() << 0.0f, 1.0f;
  CHECK(mae(p, q, MaskCube(p.dims())) == 0.5);
  CHECK_THROWS_AS(mae(p, q, MaskCube(p.dims(), 0)), EmptyRegion);
  CHECK_THROWS_AS(mae(p, SequenceCube({1, 1, 2, 1}), MaskCube(p.dims())), DimMismatch);
}

TEST_CASE("mae restricted to gaps") {
  const auto t = random_cube({1, 1, 2, 2}, 2);
  SequenceCube p = t;
  p.data()[0] += 0.5f;
  p.data()[3] += 0.25f;
  MaskCube m(t.dims());
  m[3] = 0;
  CHECK(mae(p, t, make_region(m, RegionKind::GapOnly)) == doctest::Approx(0.25));
  CHECK(mae(p, t, make_region(m, RegionKind::Full)) == doctest::Approx(0.1875));
}

TEST_CASE("psnr closed forms") {
  const auto t = random_cube({3, 2, 5, 5}, 3);
  const MaskCube all(t.dims());
  CHECK(std::isinf(psnr(t, t, all)));
  CHECK(psnr(t, t, all) > 0);
  SequenceCube p({1, 1, 1, 1}, 0.1f), q({1, 1, 1, 1}, 0.0f);
  const double mse = static_cast<double>(0.1f) * static_cast<double>(0.1f);
  CHECK(psnr(p, q, MaskCube(p.dims())) == doctest::Approx(10 * std::log10(1.0 / mse)).epsilon(1e-12));
  CHECK(psnr(p, q, MaskCube(p.dims())) == doctest::Approx(20.0).epsilon(1e-6));
  SequenceCube r({1, 1, 1, 1}, 0.01f);
  CHECK(psnr(r, q, MaskCube(r.dims())) == doctest::Approx(40.0).epsilon(1e-6));
}

TEST_CASE("psnr agrees with the mse closed form per frame") {
  const auto t = random_cube({4, 2, 6, 6}, 4);
  const auto p = random_cube({4, 2, 6, 6}, 5);
  double expect = 0;
  const Index fs = t.dims().frame_size();
  for (Index f = 0; f < 4; ++f) {
    double se = 0;
    for (Index k = 0; k < fs; ++k) {
      const double e = static_cast<double>(p.data()[f * fs + k]) - static_cast<double>(t.data()[f * fs + k]);
      se += e * e;
    }
    expect += 10 * std::log10(1.0 / (se / fs)) / 4;
  }
  CHECK(std::abs(psnr(p, t, MaskCube(t.dims())) - expect) < 1e-9);
}

TEST_CASE("sam") {
  SequenceCube a({1, 2, 1, 1}), b({1, 2, 1, 1});
  a.data() << 1.0f, 0.0f;
  b.data() << 0.0f, 1.0f;
  const MaskCube all(a.dims());
  CHECK(sam(a, a, all) == doctest::Approx(0.0));
  CHECK(sam(a, b, all) == doctest::Approx(90.0));
  SequenceCube c({1, 2, 1, 1}, 1.0f);
  CHECK(sam(c, a, all) == doctest::Approx(45.0));
  const auto r = random_cube({3, 4, 5, 5}, 11);
  CHECK(sam(r, r, MaskCube(r.dims())) == 0.0);
}

TEST_CASE("ssim metric") {
  const auto t = random_cube({2, 2, 16, 16}, 6);
  CHECK(ssim_metric(t, t) == doctest::Approx(1.0));
  SequenceCube inv = t;
  inv.data() = 1.0f - inv.data();
  CHECK(ssim_metric(inv, t) < 1.0);

  const auto a = random_cube({1, 1, 14, 13}, 7);
  const auto b = random_cube({1, 1, 14, 13}, 8);
  std::vector<double> va(a.data().begin(), a.data().end()), vb(b.data().begin(), b.data().end());
  CHECK(ssim_plane(a.data().data(), b.data().data(), 14, 13) == doctest::Approx(ref_ssim_plane(va, vb, 14, 13)).epsilon(1e-6));
}

TEST_CASE("baselines") {
  SUBCASE("linear interpolation") {
    const auto out = baseline_impute(series({0.2f, 0.0f, 0.4f}), series_mask({1, 0, 1}), BaselineMethod::Linear);
    CHECK(out.data()[1] == doctest::Approx(0.3));
  }
  SUBCASE("leading gap uses backward fill") {
    const auto out = baseline_impute(series({0.0f, 0.7f, 0.1f}), series_mask({0, 1, 1}), BaselineMethod::Last);
    CHECK(out.data()[0] == doctest::Approx(0.7));
  }
  SUBCASE("last carries forward") {
    const auto out = baseline_impute(series({0.3f, 0.0f, 0.0f, 0.9f}), series_mask({1, 0, 0, 1}), BaselineMethod::Last);
    CHECK(out.data()[2] == doctest::Approx(0.3));
  }
  SUBCASE("nearest breaks ties toward earlier") {
    const auto out = baseline_impute(series({0.1f, 0.0f, 0.5f, 0.0f, 0.0f, 0.8f}), series_mask({1, 0, 1, 0, 0, 1}),
                                     BaselineMethod::Nearest);
    CHECK(out.data()[1] == doctest::Approx(0.1));
    CHECK(out.data()[3] == doctest::Approx(0.5));
    CHECK(out.data()[4] == doctest::Approx(0.8));
  }
  SUBCASE("all missing") {
    for (auto method : {BaselineMethod::Last, BaselineMethod::Nearest, BaselineMethod::Linear}) {
      const auto out = baseline_impute(series({0.0f, 0.0f}), series_mask({0, 0}), method);
      CHECK(out.data()[0] == 0.5f);
      CHECK(out.data()[1] == 0.5f);
    }
  }
  SUBCASE("observed entries are copied") {
    const auto x = random_cube({4, 2, 3, 3}, 9);
    MaskCube m(x.dims());
    for (Index k = 0; k < m.size(); k += 3) m[k] = 0;
    const auto out = baseline_impute(x, m, BaselineMethod::Linear);
    for (Index k = 0; k < m.size(); ++k)
      if (m[k]) CHECK(out.data()[k] == x.data()[k]);
  }
  CHECK(parse_baseline("linear") == BaselineMethod::Linear);
  CHECK_THROWS_AS(parse_baseline("cubic"), ConfigError);
}

TEST_CASE("eval report serialization") {
  const auto t = random_cube({2, 1, 12, 12}, 10);
  const auto r = evaluate(t, t, MaskCube(t.dims()), RegionKind::Full);
  CHECK(r.mae == 0.0);
  CHECK(r.ssim == doctest::Approx(1.0));
  CHECK(std::isinf(r.psnr_db));
  CHECK(r.pixel_count == t.size());
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["psnr_db"] == "inf");
  CHECK(j["region"] == "full");
  CHECK(EvalReport::csv_header() == "mae,sam_degrees,psnr_db,ssim,pixel_count,region");
  CHECK(r.to_csv_row().find(",inf,") != std::string::npos);
  CHECK_THROWS_AS(evaluate(t, t, MaskCube(t.dims()), RegionKind::GapOnly), EmptyRegion);
  CHECK_THROWS_AS(parse_region("edge"), ConfigError);
}
