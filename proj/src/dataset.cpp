#include "ms2tan/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "ms2tan/cube_io.hpp"
#include "ms2tan/random.hpp"

namespace ms2tan {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::Train;
  if (text == "valid") return Split::Valid;
  if (text == "test") return Split::Test;
  throw FormatError("unknown split '" + text + "'");
}

void DatasetSpec::validate() const {
  if (samples < 1) throw ConfigError("dataset needs at least one sample");
  if (dims.T < 1 || dims.C < 1 || dims.H < 1 || dims.W < 1) throw ConfigError("dataset dims must be >= 1");
  if (gaps.empty()) throw ConfigError("dataset needs at least one gap spec");
  double sum = 0;
  for (double r : split_ratios) {
    if (r < 0) throw ConfigError("split ratios must be nonnegative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  for (const auto& g : gaps) g.validate();
}

std::array<Index, 3> split_counts(Index n, const std::array<double, 3>& ratios) {
  const auto train = static_cast<Index>(std::llround(ratios[0] * static_cast<double>(n)));
  const auto valid = std::min(n - train, static_cast<Index>(std::llround(ratios[1] * static_cast<double>(n))));
  return {train, valid, n - train - valid};
}

std::string DatasetManifest::to_json() const {
  ordered_json j;
  j["version"] = version;
  j["seed"] = seed;
  j["dims"] = {dims.T, dims.C, dims.H, dims.W};
  j["samples"] = ordered_json::array();
  for (const auto& s : samples) {
    ordered_json e;
    e["clean"] = s.clean;
    e["gapped"] = s.gapped;
    e["mask"] = s.mask;
    e["split"] = to_string(s.split);
    e["coverage"] = s.coverage;
    j["samples"].push_back(e);
  }
  return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  DatasetManifest m;
  try {
    const auto j = ordered_json::parse(text);
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw FormatError("unsupported manifest version " + std::to_string(m.version));
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& d = j.at("dims");
    if (!d.is_array() || d.size() != 4) throw FormatError("manifest dims must have 4 entries");
    m.dims = {d[0].get<Index>(), d[1].get<Index>(), d[2].get<Index>(), d[3].get<Index>()};
    for (const auto& e : j.at("samples")) {
      SampleEntry s;
      s.clean = e.at("clean").get<std::string>();
      s.gapped = e.at("gapped").get<std::string>();
      s.mask = e.at("mask").get<std::string>();
      s.split = parse_split(e.at("split").get<std::string>());
      s.coverage = e.value("coverage", 0.0);
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset manifest: ") + e.what());
  }
  return m;
}

Index DatasetManifest::count(Split split) const {
  return static_cast<Index>(
      std::count_if(samples.begin(), samples.end(), [&](const SampleEntry& s) { return s.split == split; }));
}

DatasetManifest make_dataset(const fs::path& out_dir, const DatasetSpec& spec) {
  spec.validate();
  std::error_code ec;
  for (const char* sub : {"train", "valid", "test"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }
  const auto counts = split_counts(spec.samples, spec.split_ratios);
  std::vector<Index> order(static_cast<std::size_t>(spec.samples));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(derive_seed(spec.seed, "dataset.split"));
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<Split> split_of(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto rank = static_cast<Index>(r);
    split_of[static_cast<std::size_t>(order[r])] =
        rank < counts[0] ? Split::Train : (rank < counts[0] + counts[1] ? Split::Valid : Split::Test);
  }

  DatasetManifest manifest;
  manifest.seed = spec.seed;
  manifest.dims = spec.dims;
  for (Index i = 0; i < spec.samples; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    const SequenceCube clean = synth_scene(spec.dims, derive_seed(spec.seed, "dataset.scene", idx));
    GapSpec gap = spec.gaps[static_cast<std::size_t>(i) % spec.gaps.size()];
    gap.seed = derive_seed(spec.seed ^ gap.seed, "dataset.mask", idx);
    const MaskCube mask = synth_mask(spec.dims, gap);
    const SequenceCube gapped = apply_gaps(clean, mask);

    SampleEntry e;
    e.split = split_of[static_cast<std::size_t>(i)];
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05lld", static_cast<long long>(i));
    const std::string stem = to_string(e.split) + "/" + name;
    e.clean = stem + "_clean";
    e.gapped = stem + "_gapped";
    e.mask = stem + "_mask";
    e.coverage = mask.coverage();
    write_cube(out_dir / e.clean, clean);
    write_cube(out_dir / e.gapped, gapped);
    write_mask(out_dir / e.mask, mask);
    manifest.samples.push_back(std::move(e));
  }
  std::ofstream out(out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  out << manifest.to_json() << '\n';
  if (!out) throw IoError("failed writing manifest");
  return manifest;
}

DatasetManifest load_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  std::stringstream ss;
  ss << in.rdbuf();
  return DatasetManifest::from_json(ss.str());
}

std::vector<Sample> load_split(const fs::path& dir, const DatasetManifest& manifest, Split split) {
  std::vector<Sample> out;
  for (const auto& e : manifest.samples) {
    if (e.split != split) continue;
    Sample s{read_cube(dir / e.clean), read_cube(dir / e.gapped), read_mask(dir / e.mask)};
    validate_pair(s.gapped, s.mask);
    require_same_dims(s.clean, s.gapped, "dataset sample");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace ms2tan
