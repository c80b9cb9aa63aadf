#include "doctest.h"

#include <cmath>
#include <limits>

#include "ms2tan/attention.hpp"
#include "ms2tan/random.hpp"

using namespace ms2tan;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

AttentionMaskFlags flags_of(std::vector<std::uint8_t> masked, MaskMode mode = MaskMode::Key) {
  AttentionMaskFlags f;
  f.masked = std::move(masked);
  f.mode = mode;
  return f;
}

Mat<double> random_mat(Index r, Index c, Rng& rng, double sd = 1.0) {
  Mat<double> m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.normal(0.0, sd);
  return m;
}

void add_attention(ParameterStore<double>& s, const std::string& prefix, Index d, AttentionShape shape, Rng& rng) {
  s.add(prefix + ".qkv.weight", d, 3 * shape.inner(), InitKind::Zero).value = random_mat(d, 3 * shape.inner(), rng, 0.5);
  s.add(prefix + ".proj.weight", shape.inner(), d, InitKind::Zero).value = random_mat(shape.inner(), d, rng, 0.5);
  s.add(prefix + ".proj.bias", 1, d, InitKind::Zero).value = random_mat(1, d, rng, 0.1);
}

// Straight-line reference implementations with explicit loops.
Mat<double> ref_layer_norm(const Mat<double>& x, const Mat<double>& g, const Mat<double>& b) {
  Mat<double> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mean = 0;
    for (Index c = 0; c < x.cols(); ++c) mean += x(r, c);
    mean /= x.cols();
    double var = 0;
    for (Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= x.cols();
    for (Index c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-5) * g(0, c) + b(0, c);
  }
  return y;
}

Mat<double> ref_attention(const Mat<double>& x, const std::vector<std::vector<Index>>& groups,
                          const std::vector<std::uint8_t>& masked, const ParameterStore<double>& p,
                          const std::string& prefix, Index heads, Index dk) {
  const Mat<double>& wqkv = p.at(prefix + ".qkv.weight").value;
  const Mat<double>& wp = p.at(prefix + ".proj.weight").value;
  const Mat<double>& bp = p.at(prefix + ".proj.bias").value;
  const Index d = x.cols();
  const Index inner = heads * dk;
  auto proj = [&](Index row, Index col) {
    double s = 0;
    for (Index k = 0; k < d; ++k) s += x(row, k) * wqkv(k, col);
    return s;
  };
  Mat<double> concat = Mat<double>::Zero(x.rows(), inner);
  for (const auto& g : groups) {
    for (Index h = 0; h < heads; ++h) {
      for (Index qi : g) {
        std::vector<double> w;
        std::vector<Index> keys;
        for (Index kj : g) {
          if (kj == qi || masked[kj]) continue;
          double s = 0;
          for (Index e = 0; e < dk; ++e) s += proj(qi, h * dk + e) * proj(kj, inner + h * dk + e);
          w.push_back(s / std::sqrt(static_cast<double>(dk)));
          keys.push_back(kj);
        }
        if (keys.empty()) continue;
        double mx = w[0];
        for (double v : w) mx = std::max(mx, v);
        double z = 0;
        for (double& v : w) z += (v = std::exp(v - mx));
        for (std::size_t a = 0; a < keys.size(); ++a)
          for (Index e = 0; e < dk; ++e) concat(qi, h * dk + e) += w[a] / z * proj(keys[a], 2 * inner + h * dk + e);
      }
    }
  }
  Mat<double> out(x.rows(), d);
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < d; ++c) {
      double s = bp(0, c) + x(r, c);
      for (Index k = 0; k < inner; ++k) s += concat(r, k) * wp(k, c);
      out(r, c) = s;
    }
  return out;
}

Mat<double> ref_ffn(const Mat<double>& x, const ParameterStore<double>& p, const std::string& prefix) {
  const Mat<double>& w1 = p.at(prefix + ".fc1.weight").value;
  const Mat<double>& b1 = p.at(prefix + ".fc1.bias").value;
  const Mat<double>& w2 = p.at(prefix + ".fc2.weight").value;
  const Mat<double>& b2 = p.at(prefix + ".fc2.bias").value;
  Mat<double> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    std::vector<double> hidden(static_cast<std::size_t>(w1.cols()));
    for (Index j = 0; j < w1.cols(); ++j) {
      double s = b1(0, j);
      for (Index k = 0; k < x.cols(); ++k) s += x(r, k) * w1(k, j);
      hidden[j] = std::max(0.0, s);
    }
    for (Index c = 0; c < x.cols(); ++c) {
      double s = b2(0, c) + x(r, c);
      for (Index j = 0; j < w1.cols(); ++j) s += hidden[j] * w2(j, c);
      out(r, c) = s;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("apply_mask") {
  SUBCASE("n=2 without key masking") {
    const Mat<double> s = Mat<double>::Constant(2, 2, 0.3);
    const Mat<double> masked = apply_mask(s, flags_of({0, 0}));
    CHECK(masked(0, 0) == kNegInf);
    CHECK(masked(1, 1) == kNegInf);
    CHECK(masked(0, 1) == 0.3);
    const Mat<double> a = masked_softmax(masked);
    CHECK(a(0, 0) == 0.0);
    CHECK(a(0, 1) == 1.0);
    CHECK(a(1, 0) == 1.0);
    CHECK(a(1, 1) == 0.0);
  }
  SUBCASE("n=3 with token 2 key-masked") {
    const Mat<double> masked = apply_mask(Mat<double>::Zero(3, 3).eval(), flags_of({0, 0, 1}));
    for (Index i = 0; i < 3; ++i) {
      CHECK(masked(i, 2) == kNegInf);
      CHECK(masked(i, i) == kNegInf);
    }
    CHECK(masked(0, 1) == 0.0);
    CHECK(masked(1, 0) == 0.0);
    CHECK(masked(2, 0) == 0.0);
  }
  SUBCASE("n=1 is fully masked") {
    const Mat<double> masked = apply_mask(Mat<double>::Constant(1, 1, 5.0).eval(), flags_of({0}));
    CHECK(masked(0, 0) == kNegInf);
    CHECK(masked_softmax(masked).isZero());
  }
  SUBCASE("query mode masks rows") {
    const Mat<double> masked = apply_mask(Mat<double>::Zero(3, 3).eval(), flags_of({0, 1, 0}, MaskMode::Query));
    for (Index j = 0; j < 3; ++j) CHECK(masked(1, j) == kNegInf);
    CHECK(masked(0, 1) == 0.0);
  }
  SUBCASE("flag count mismatch") {
    CHECK_THROWS_AS(apply_mask(Mat<double>::Zero(3, 3).eval(), flags_of({0, 0})), ShapeMismatch);
  }
}

TEST_CASE("flags follow the missing-rate threshold strictly") {
  const auto f = AttentionMaskFlags::from_missing_rates({0.0, 0.5, 0.51, 1.0}, 0.5);
  CHECK(f.masked == std::vector<std::uint8_t>{0, 0, 1, 1});
}

TEST_CASE("masked_softmax rows sum to one over finite entries") {
  Rng rng(3);
  Mat<double> s = random_mat(5, 5, rng, 3.0);
  s(1, 3) = kNegInf;
  s(1, 1) = kNegInf;
  const Mat<double> a = masked_softmax(s);
  for (Index i = 0; i < 5; ++i) CHECK(a.row(i).sum() == doctest::Approx(1.0));
  CHECK(a(1, 3) == 0.0);
  CHECK((a.array() >= 0).all());
}

TEST_CASE("masked_attention degenerate cases") {
  Rng rng(5);
  const Index d = 4;
  const AttentionShape shape{2, 2};
  ParameterStore<double> p;
  add_attention(p, "att", d, shape, rng);

  SUBCASE("identical values give v for every row") {
    Mat<double> x = random_mat(3, d, rng);
    x.col(0).setOnes();
    auto& w = p.at("att.qkv.weight").value;
    w.middleCols(2 * shape.inner(), shape.inner()).setZero();
    const Eigen::RowVector4d v(0.3, -0.7, 1.1, 0.2);
    w.block(0, 2 * shape.inner(), 1, shape.inner()) = v;
    p.at("att.proj.weight").value = Mat<double>::Identity(d, d);
    p.at("att.proj.bias").value.setZero();
    const Mat<double> out = masked_attention(x, flags_of({0, 0, 0}), p, "att", shape);
    for (Index r = 0; r < 3; ++r)
      for (Index c = 0; c < d; ++c) CHECK(out(r, c) - x(r, c) == doctest::Approx(v[c]));
  }
  SUBCASE("single token passes through") {
    p.at("att.proj.bias").value.setZero();
    const Mat<double> x = random_mat(1, d, rng);
    CHECK(masked_attention(x, flags_of({0}), p, "att", shape).isApprox(x));
  }
  SUBCASE("n=2 with token 1 masked leaves token 0 unchanged") {
    p.at("att.proj.bias").value.setZero();
    const Mat<double> x = random_mat(2, d, rng);
    const Mat<double> out = masked_attention(x, flags_of({0, 1}), p, "att", shape);
    for (Index c = 0; c < d; ++c) CHECK(out(0, c) == x(0, c));
    CHECK_FALSE(out.row(1).isApprox(x.row(1)));
  }
  SUBCASE("matches the loop reference") {
    const Mat<double> x = random_mat(5, d, rng);
    const std::vector<std::uint8_t> masked{0, 1, 0, 0, 1};
    const Mat<double> out = masked_attention(x, flags_of(masked), p, "att", shape);
    const Mat<double> ref = ref_attention(x, {{0, 1, 2, 3, 4}}, masked, p, "att", 2, 2);
    CHECK((out - ref).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("attention groups") {
  const auto temporal = attention_groups(3, 2, AttentionAxis::Temporal);
  REQUIRE(temporal.size() == 2);
  CHECK(temporal[0] == std::vector<Index>{0, 2, 4});
  CHECK(temporal[1] == std::vector<Index>{1, 3, 5});
  const auto spatial = attention_groups(3, 2, AttentionAxis::Spatial);
  REQUIRE(spatial.size() == 3);
  CHECK(spatial[1] == std::vector<Index>{2, 3});
}

TEST_CASE("axis attention degenerate lengths pass through") {
  Rng rng(8);
  const AttentionShape shape{1, 3};
  ParameterStore<double> p;
  add_attention(p, "att", 4, shape, rng);
  p.at("att.proj.bias").value.setZero();
  const Mat<double> one_frame = random_mat(5, 4, rng);
  CHECK(masked_temporal_attention(one_frame, 1, 5, flags_of(std::vector<std::uint8_t>(5, 0)), p, "att", shape)
            .isApprox(one_frame));
  const Mat<double> one_patch = random_mat(4, 4, rng);
  CHECK(masked_spatial_attention(one_patch, 4, 1, flags_of(std::vector<std::uint8_t>(4, 0)), p, "att", shape)
            .isApprox(one_patch));
}

TEST_CASE("temporal attention never mixes patches") {
  Rng rng(9);
  const AttentionShape shape{2, 2};
  ParameterStore<double> p;
  add_attention(p, "att", 4, shape, rng);
  const Index T = 3, N = 4;
  Mat<double> x = random_mat(T * N, 4, rng);
  const auto flags = flags_of(std::vector<std::uint8_t>(T * N, 0));
  const Mat<double> before = masked_temporal_attention(x, T, N, flags, p, "att", shape);
  for (Index t = 0; t < T; ++t) x.row(t * N + 2) += Eigen::RowVector4d(1, 2, 3, 4);
  const Mat<double> after = masked_temporal_attention(x, T, N, flags, p, "att", shape);
  for (Index t = 0; t < T; ++t)
    for (Index n = 0; n < N; ++n)
      if (n != 2) CHECK(after.row(t * N + n) == before.row(t * N + n));
}

TEST_CASE("ffn") {
  ParameterStore<double> p;
  p.add("f.fc1.weight", 1, 1, InitKind::One).value.setOnes();
  p.add("f.fc1.bias", 1, 1, InitKind::Zero);
  p.add("f.fc2.weight", 1, 1, InitKind::One).value.setConstant(2.0);
  p.add("f.fc2.bias", 1, 1, InitKind::Zero);
  CHECK(ffn(Mat<double>::Constant(1, 1, 3.0).eval(), p, "f")(0, 0) == 9.0);
  CHECK(ffn(Mat<double>::Constant(1, 1, -3.0).eval(), p, "f")(0, 0) == -3.0);

  ParameterStore<double> z;
  z.add("f.fc1.weight", 3, 12, InitKind::Zero);
  z.add("f.fc1.bias", 1, 12, InitKind::Zero);
  z.add("f.fc2.weight", 12, 3, InitKind::Zero);
  z.add("f.fc2.bias", 1, 3, InitKind::Zero);
  Rng rng(1);
  const Mat<double> x = random_mat(4, 3, rng);
  CHECK(ffn(x, z, "f") == x);
}

TEST_CASE("layer norm rows have zero mean and unit variance") {
  Rng rng(2);
  ParameterStore<double> p;
  p.add("ln.gain", 1, 6, InitKind::One).value.setOnes();
  p.add("ln.bias", 1, 6, InitKind::Zero);
  const Mat<double> y = layer_norm(random_mat(4, 6, rng, 5.0), p, "ln");
  for (Index r = 0; r < 4; ++r) {
    CHECK(std::abs(y.row(r).mean()) < 1e-12);
    CHECK(y.row(r).squaredNorm() / 6.0 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("msta unit matches a straight-line oracle on a 2x2 token grid") {
  const Index T = 2, N = 2, d = 4;
  const AttentionShape shape{2, 2};
  const std::vector<std::uint8_t> masked{0, 0, 1, 0};
  for (bool zero_weights : {true, false}) {
    CAPTURE(zero_weights);
    Rng rng(zero_weights ? 21 : 22);
    ParameterStore<double> p;
    for (const char* ln : {"u.ln1", "u.ln2", "u.ln3"}) {
      p.add(std::string(ln) + ".gain", 1, d, InitKind::One).value.setOnes();
      p.add(std::string(ln) + ".bias", 1, d, InitKind::Zero);
    }
    add_attention(p, "u.mta", d, shape, rng);
    add_attention(p, "u.msa", d, shape, rng);
    p.add("u.ffn.fc1.weight", d, 8, InitKind::Zero).value = random_mat(d, 8, rng, 0.5);
    p.add("u.ffn.fc1.bias", 1, 8, InitKind::Zero);
    p.add("u.ffn.fc2.weight", 8, d, InitKind::Zero).value = random_mat(8, d, rng, 0.5);
    p.add("u.ffn.fc2.bias", 1, d, InitKind::Zero);
    if (zero_weights) {
      for (auto& e : p)
        if (!e.name.ends_with(".gain")) e.value.setZero();
    } else {
      for (const char* ln : {"u.ln1", "u.ln2", "u.ln3"}) {
        p.at(std::string(ln) + ".gain").value = Mat<double>::Ones(1, d) + random_mat(1, d, rng, 0.2);
        p.at(std::string(ln) + ".bias").value = random_mat(1, d, rng, 0.2);
      }
    }
    const Mat<double> e = random_mat(T * N, d, rng);
    const Mat<double> out = msta_unit(e, T, N, flags_of(masked), p, "u.", shape);

    auto ln = [&](const Mat<double>& x, const char* name) {
      return ref_layer_norm(x, p.at(std::string(name) + ".gain").value, p.at(std::string(name) + ".bias").value);
    };
    const Mat<double> u = ref_attention(ln(e, "u.ln1"), {{0, 2}, {1, 3}}, masked, p, "u.mta", 2, 2);
    const Mat<double> v = ref_attention(ln(u, "u.ln2"), {{0, 1}, {2, 3}}, masked, p, "u.msa", 2, 2);
    const Mat<double> ref = ref_ffn(ln(v, "u.ln3"), p, "u.ffn");
    CHECK((out - ref).cwiseAbs().maxCoeff() < 1e-12);
    if (zero_weights) CHECK((out - ln(ln(ln(e, "u.ln1"), "u.ln2"), "u.ln3")).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("mfe with no layers adds the positional encoding") {
  ModelConfig c;
  c.scales = {{2, 6, 2, 3, 0}};
  const auto p = init_parameters<double>(c, 0);
  Rng rng(4);
  TokenSequence<double> seq;
  seq.T = 2;
  seq.N = 3;
  seq.tokens = random_mat(6, 6, rng);
  seq.missing_rate.assign(6, 0.0);
  const Mat<double> out = mfe(seq, flags_of(std::vector<std::uint8_t>(6, 0)), c.scales[0], p, 0);
  CHECK(out.isApprox(seq.tokens + positional_encoding<double>(2, 3, 6)));
}

TEST_CASE("mac counter sees every head") {
  Rng rng(6);
  const AttentionShape shape{3, 2};
  ParameterStore<double> p;
  add_attention(p, "att", 6, shape, rng);
  const Index T = 4, N = 5;
  const Mat<double> x = random_mat(T * N, 6, rng);
  const auto flags = flags_of(std::vector<std::uint8_t>(T * N, 0));
  MacCounter counter;
  {
    MacCountingScope scope(counter);
    masked_temporal_attention(x, T, N, flags, p, "att", shape);
  }
  CHECK(counter.score_macs == static_cast<std::uint64_t>(3 * 2 * N * T * T));
  CHECK(counter.attention_calls == static_cast<std::uint64_t>(N));
  masked_spatial_attention(x, T, N, flags, p, "att", shape);
  CHECK(counter.attention_calls == static_cast<std::uint64_t>(N));
}
