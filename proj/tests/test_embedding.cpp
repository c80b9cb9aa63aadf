#include "doctest.h"

#include <cmath>

#include "ms2tan/embedding.hpp"
#include "ms2tan/parameters.hpp"
#include "ms2tan/random.hpp"

using namespace ms2tan;

namespace {

Cube<double> random_cube(Dims d, std::uint64_t seed) {
  Rng rng(seed);
  Cube<double> x(d);
  for (Index k = 0; k < x.size(); ++k) x.data()[k] = rng.uniform();
  return x;
}

ModelConfig single_scale(Index P, Index d_emb, Index C) {
  ModelConfig c;
  c.scales = {{P, d_emb, 2, 4, 1}};
  c.bands = C;
  return c;
}

}  // namespace

TEST_CASE("patchify groups pixels by patch") {
  std::vector<int> frame(16);
  for (int k = 0; k < 16; ++k) frame[k] = k;
  const Mat<int> p = patchify<int>(frame, 1, 4, 4, 2);
  REQUIRE(p.rows() == 4);
  REQUIRE(p.cols() == 4);
  CHECK(p.row(0) == (Eigen::RowVector4i() << 0, 1, 4, 5).finished());
  CHECK(p.row(1) == (Eigen::RowVector4i() << 2, 3, 6, 7).finished());
  CHECK(p.row(3) == (Eigen::RowVector4i() << 10, 11, 14, 15).finished());
}

TEST_CASE("patch counts") {
  CHECK(patches_per_frame(120, 120, 8) == 225);
  CHECK(patches_per_frame(120, 120, 10) == 144);
  CHECK(patches_per_frame(120, 120, 12) == 100);
  CHECK_THROWS_AS(patches_per_frame(5, 5, 2), IndivisibleSize);
  std::vector<float> frame(25);
  CHECK_THROWS_AS(patchify<float>(frame, 1, 5, 5, 2), IndivisibleSize);
}

TEST_CASE("unpatchify inverts patchify") {
  const Cube<double> x = random_cube({1, 2, 8, 8}, 4);
  const Mat<double> p = patchify<double>(x.frame(0), 2, 8, 8, 4);
  const std::vector<double> back = unpatchify(p, 4, 2, 8, 8);
  for (Index k = 0; k < x.size(); ++k) CHECK(back[k] == x.data()[k]);

  const std::vector<double> zero = unpatchify(Mat<double>::Zero(4, 32).eval(), 4, 2, 8, 8);
  for (double v : zero) CHECK(v == 0.0);

  CHECK_THROWS_AS(unpatchify(Mat<double>::Zero(3, 32).eval(), 4, 2, 8, 8), ShapeMismatch);
}

TEST_CASE("patch missing rates") {
  SUBCASE("three of four missing") {
    MaskCube m({1, 1, 2, 2});
    m[0] = m[1] = m[2] = 0;
    CHECK(patch_missing_rates(m, 2)[0] == doctest::Approx(0.75));
  }
  SUBCASE("all observed") {
    for (double r : patch_missing_rates(MaskCube({3, 2, 8, 8}), 4)) CHECK(r == 0.0);
  }
  SUBCASE("one band missing of two") {
    MaskCube m({1, 2, 2, 2});
    for (Index k = 0; k < 4; ++k) m[k] = 0;
    CHECK(patch_missing_rates(m, 2)[0] == doctest::Approx(0.5));
  }
  SUBCASE("ordering is t * N + n") {
    MaskCube m({2, 1, 4, 4});
    m(1, 0, 0, 3) = 0;  // frame 1, patch 1
    const auto r = patch_missing_rates(m, 2);
    REQUIRE(r.size() == 8);
    for (std::size_t k = 0; k < r.size(); ++k) CHECK(r[k] == (k == 5 ? 0.25 : 0.0));
  }
}

TEST_CASE("positional encoding") {
  const Mat<double> pe = positional_encoding<double>(2, 3, 8);
  REQUIRE(pe.rows() == 6);
  for (Index k = 0; k < 8; ++k) CHECK(pe(0, k) == (k % 2 == 0 ? 0.0 : 1.0));
  CHECK(pe(1, 0) == doctest::Approx(0.841471).epsilon(1e-6));
  CHECK(pe(1, 1) == doctest::Approx(std::cos(1.0)));
  CHECK(pe(5, 2) == doctest::Approx(std::sin(5.0 * std::pow(10000.0, -2.0 / 8.0))));
  CHECK_THROWS_AS(positional_encoding<double>(1, 1, 7), OddDimension);
}

TEST_CASE("embed projects values and mask together") {
  const ModelConfig c = single_scale(2, 6, 1);
  auto params = init_parameters<double>(c, 1);
  const Cube<double> x = random_cube({2, 1, 4, 4}, 9);
  MaskCube m({2, 1, 4, 4});
  m(0, 0, 0, 0) = 0;
  const auto seq = embed(x, m, c.scales[0], params, 0);
  CHECK(seq.T == 2);
  CHECK(seq.N == 4);
  CHECK(seq.tokens.rows() == 8);
  CHECK(seq.tokens.cols() == 6);
  CHECK(seq.missing_rate[0] == doctest::Approx(0.25));

  // Oracle: token (t=1, n=2) from a hand-built feature row.
  const auto& w = params.at("scale0.embed.weight").value;
  Eigen::RowVectorXd feat(8);
  feat << x(1, 0, 2, 0), x(1, 0, 2, 1), x(1, 0, 3, 0), x(1, 0, 3, 1), 1, 1, 1, 1;
  const Eigen::RowVectorXd expect = feat * w;
  for (Index k = 0; k < 6; ++k) CHECK(seq.tokens(6, k) == doctest::Approx(expect[k]));

  CHECK_THROWS_AS(embed(x, MaskCube({2, 1, 4, 2}), c.scales[0], params, 0), DimMismatch);
}

TEST_CASE("unembed shapes and zero projection") {
  const ModelConfig c = single_scale(8, 4, 2);
  const auto params = init_parameters<float>(c, 0);
  const Dims d{4, 2, 120, 120};
  const Mat<float> tokens = Mat<float>::Ones(4 * 225, 4);
  const Cube<float> y = unembed(tokens, c.scales[0], params, 0, d);
  CHECK(y.dims() == d);
  CHECK(y.data().isZero());
  CHECK_THROWS_AS(unembed(Mat<float>::Ones(10, 4).eval(), c.scales[0], params, 0, d), ShapeMismatch);
}
