#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "ms2tan/cube_io.hpp"
#include "ms2tan/dataset.hpp"
#include "ms2tan/gaps.hpp"
#include "ms2tan/random.hpp"

using namespace ms2tan;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ms2tan_test_gaps_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool bands_agree(const MaskCube& m) {
  const Dims& d = m.dims();
  for (Index t = 0; t < d.T; ++t)
    for (Index c = 1; c < d.C; ++c)
      for (Index i = 0; i < d.H; ++i)
        for (Index j = 0; j < d.W; ++j)
          if (m(t, c, i, j) != m(t, 0, i, j)) return false;
  return true;
}

}  // namespace

TEST_CASE("slc stripes") {
  const Dims d{4, 2, 48, 48};
  for (std::uint64_t seed : {0ull, 1ull, 7ull}) {
    GapSpec spec;
    spec.kind = GapKind::SlcStripes;
    spec.target_coverage = 0.22;
    spec.seed = seed;
    const MaskCube m = synth_slc_mask(d, spec);
    CHECK(m.coverage() >= 0.17);
    CHECK(m.coverage() <= 0.27);
    for (Index t = 0; t < d.T; ++t) CHECK(std::abs(frame_coverage(m, t) - 0.22) <= 0.05);
    CHECK(bands_agree(m));
    CHECK(synth_slc_mask(d, spec).flags() == m.flags());
  }
  GapSpec tiny;
  tiny.kind = GapKind::SlcStripes;
  tiny.target_coverage = 0.005;
  CHECK(synth_slc_mask(d, tiny).missing_count() == 0);
}

TEST_CASE("cloud blobs") {
  const Dims d{4, 2, 24, 24};
  GapSpec spec;
  spec.target_coverage = 0.3;
  for (std::uint64_t seed : {0ull, 3ull, 11ull}) {
    spec.seed = seed;
    const MaskCube m = synth_cloud_mask(d, spec);
    CHECK(m.coverage() >= 0.25);
    CHECK(m.coverage() <= 0.35);
    CHECK(bands_agree(m));
    for (Index t = 0; t < d.T; ++t) {
      std::vector<std::uint8_t> plane(m.frame(t).begin(), m.frame(t).begin() + d.plane_size());
      const Index blobs = count_missing_components(plane, d.H, d.W);
      CHECK(blobs >= spec.cloud_min_blobs);
      CHECK(blobs <= spec.cloud_max_blobs);
    }
    CHECK(synth_mask(d, spec).flags() == m.flags());
  }
  spec.cloud_max_blobs = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("threshold and component helpers") {
  const auto field = cloud_noise_field(10, 10, 4.0, 5);
  for (double v : field) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (auto f : threshold_field(field, -std::numeric_limits<double>::infinity())) CHECK(f == 0);
  for (auto f : threshold_field(field, 2.0)) CHECK(f == 1);

  // 0 = missing; two separate blobs plus a diagonal neighbour that is not 4-connected.
  const std::vector<std::uint8_t> plane{0, 0, 1, 1,
                                        1, 1, 1, 0,
                                        1, 1, 0, 1,
                                        1, 1, 1, 1};
  CHECK(count_missing_components(plane, 4, 4) == 3);
}

TEST_CASE("synthetic scenes") {
  const Dims d{6, 3, 24, 24};
  const SequenceCube a = synth_scene(d, 42);
  CHECK((a.data() == synth_scene(d, 42).data()).all());
  CHECK_FALSE((a.data() == synth_scene(d, 43).data()).all());
  CHECK(a.data().minCoeff() >= 0.0f);
  CHECK(a.data().maxCoeff() <= 1.0f);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SequenceCube s = synth_scene(d, seed);
    const Index fs = d.frame_size();
    for (Index t = 0; t + 1 < d.T; ++t) {
      double diff = 0;
      for (Index k = 0; k < fs; ++k) diff += std::abs(s.data()[(t + 1) * fs + k] - s.data()[t * fs + k]);
      CHECK(diff / fs < 0.1);
    }
  }
}

TEST_CASE("normalize") {
  Cube<std::int32_t> raw({1, 1, 1, 5});
  raw.data() << 10000, 0, 12000, 5000, -3;
  const SequenceCube n = normalize(raw);
  CHECK(n.data()[0] == 1.0f);
  CHECK(n.data()[1] == 0.0f);
  CHECK(n.data()[2] == 1.0f);
  CHECK(n.data()[3] == 0.5f);
  CHECK(n.data()[4] == 0.0f);
}

TEST_CASE("apply_gaps zeroes missing entries") {
  const SequenceCube clean = synth_scene({2, 1, 8, 8}, 1);
  MaskCube m(clean.dims());
  m[3] = 0;
  const SequenceCube g = apply_gaps(clean, m);
  for (Index k = 0; k < g.size(); ++k) CHECK(g.data()[k] == (k == 3 ? 0.0f : clean.data()[k]));
}

TEST_CASE("cube files round-trip bit-exactly") {
  const fs::path dir = scratch("roundtrip");
  Rng rng(3);
  SequenceCube x({3, 2, 5, 7});
  for (Index k = 0; k < x.size(); ++k) x.data()[k] = static_cast<float>(rng.normal(0, 10));
  x.data()[4] = std::numeric_limits<float>::denorm_min();
  write_cube(dir / "x", x);
  const SequenceCube y = read_cube(dir / "x.json");
  CHECK(y.dims() == x.dims());
  CHECK(std::memcmp(y.data().data(), x.data().data(), sizeof(float) * x.size()) == 0);
  CHECK((read_cube(dir / "x.bin").data() == x.data()).all());

  MaskCube m({3, 2, 5, 7});
  for (Index k = 0; k < m.size(); k += 4) m[k] = 0;
  write_mask(dir / "m", m);
  CHECK(read_mask(dir / "m").flags() == m.flags());
  CHECK_THROWS_AS(read_mask(dir / "x"), FormatError);
  CHECK_THROWS_AS(read_cube(dir / "m"), FormatError);
}

TEST_CASE("corrupted cube files") {
  const fs::path dir = scratch("corrupt");
  const SequenceCube x({2, 1, 4, 4}, 0.25f);
  write_cube(dir / "x", x);
  SUBCASE("truncated blob") {
    fs::resize_file(dir / "x.bin", fs::file_size(dir / "x.bin") - 3);
    CHECK_THROWS_AS(read_cube(dir / "x"), FormatError);
  }
  SUBCASE("header dims disagree with blob") {
    auto h = nlohmann::json::parse(slurp(dir / "x.json"));
    h["dims"][3] = 5;
    std::ofstream(dir / "x.json", std::ios::binary) << h.dump();
    CHECK_THROWS_AS(read_cube(dir / "x"), FormatError);
  }
  SUBCASE("unknown version") {
    auto h = nlohmann::json::parse(slurp(dir / "x.json"));
    h["version"] = 9;
    std::ofstream(dir / "x.json", std::ios::binary) << h.dump();
    CHECK_THROWS_AS(read_cube(dir / "x"), FormatError);
  }
  SUBCASE("garbage header") {
    std::ofstream(dir / "x.json", std::ios::binary) << "{not json";
    CHECK_THROWS_AS(read_cube(dir / "x"), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_cube(dir / "nope"), IoError); }
}

TEST_CASE("dataset splits and determinism") {
  CHECK(split_counts(100, {0.64, 0.16, 0.20}) == std::array<Index, 3>{64, 16, 20});
  CHECK(split_counts(10, {0.5, 0.5, 0.0}) == std::array<Index, 3>{5, 5, 0});

  DatasetSpec spec;
  spec.samples = 10;
  spec.dims = {3, 2, 12, 12};
  GapSpec slc;
  slc.kind = GapKind::SlcStripes;
  slc.target_coverage = 0.2;
  spec.gaps = {GapSpec{}, slc};
  spec.seed = 5;
  const fs::path a = scratch("ds_a"), b = scratch("ds_b");
  const DatasetManifest ma = make_dataset(a, spec);
  make_dataset(b, spec);
  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK(ma.samples.size() == 10);
  CHECK(ma.count(Split::Train) + ma.count(Split::Valid) + ma.count(Split::Test) == 10);

  const DatasetManifest loaded = load_manifest(a);
  CHECK(loaded.to_json() == ma.to_json());
  for (Split split : {Split::Train, Split::Valid, Split::Test}) {
    for (const Sample& s : load_split(a, loaded, split)) {
      for (Index k = 0; k < s.mask.size(); ++k)
        CHECK(s.gapped.data()[k] == (s.mask[k] ? s.clean.data()[k] : 0.0f));
    }
  }
  CHECK(slurp(a / (ma.samples[3].mask + ".bin")) == slurp(b / (ma.samples[3].mask + ".bin")));

  spec.split_ratios = {0.5, 0.4, 0.2};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  CHECK_THROWS_AS(load_manifest(scratch("empty")), IoError);
}
