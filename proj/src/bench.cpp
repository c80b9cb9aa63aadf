#include "ms2tan/bench.hpp"

#include <chrono>

#include "json.hpp"
#include "ms2tan/attention.hpp"
#include "ms2tan/random.hpp"

namespace ms2tan {

std::uint64_t joint_score_macs(Index T, Index N, Index heads, Index d_qkv) {
  const auto n = static_cast<std::uint64_t>(T * N);
  return n * n * static_cast<std::uint64_t>(heads * d_qkv);
}

std::uint64_t separated_score_macs(Index T, Index N, Index heads, Index d_qkv) {
  const auto t = static_cast<std::uint64_t>(T), n = static_cast<std::uint64_t>(N);
  return static_cast<std::uint64_t>(heads * d_qkv) * (t * n * n + n * t * t);
}

std::string AttentionBenchResult::to_json() const {
  nlohmann::ordered_json j;
  j["T"] = T;
  j["N"] = N;
  j["h"] = heads;
  j["d_qkv"] = d_qkv;
  j["repeat"] = repeat;
  j["joint_score_macs"] = joint_counted;
  j["separated_score_macs"] = separated_counted;
  j["joint_closed_form"] = joint_closed_form;
  j["separated_closed_form"] = separated_closed_form;
  j["ratio"] = ratio;
  j["closed_form_ratio"] = closed_form_ratio;
  j["counts_exact"] = counts_exact;
  j["ratio_exact"] = ratio_exact;
  j["joint_seconds"] = joint_seconds;
  j["separated_seconds"] = separated_seconds;
  return j.dump(2);
}

AttentionBenchResult bench_attention(Index T, Index N, Index d_qkv, Index heads, Index repeat, std::uint64_t seed) {
  if (T < 1 || N < 1 || d_qkv < 1 || heads < 1 || repeat < 0)
    throw ConfigError("bench_attention: T, N, d, h must be >= 1 and repeat >= 0");
  const AttentionShape shape{heads, d_qkv};
  const Index d = shape.inner();
  ParameterStore<float> params(seed);
  for (const char* prefix : {"joint", "sep"}) {
    params.add(std::string(prefix) + ".qkv.weight", d, 3 * d, InitKind::Normal);
    params.add(std::string(prefix) + ".proj.weight", d, d, InitKind::Normal);
    params.add(std::string(prefix) + ".proj.bias", 1, d, InitKind::Zero);
  }
  for (auto& p : params) initialize_parameter(p, seed);
  Rng rng(derive_seed(seed, "bench.tokens"));
  Mat<float> tokens(T * N, d);
  for (Index k = 0; k < tokens.size(); ++k) tokens.data()[k] = static_cast<float>(rng.normal(0.0, 1.0));
  const auto flags = AttentionMaskFlags::from_missing_rates(std::vector<double>(static_cast<std::size_t>(T * N), 0.0), 0.5);

  auto run_joint = [&] { return masked_attention(tokens, flags, params, "joint", shape); };
  auto run_separated = [&] {
    const Mat<float> u = masked_temporal_attention(tokens, T, N, flags, params, "sep", shape);
    return masked_spatial_attention(u, T, N, flags, params, "sep", shape);
  };

  AttentionBenchResult r;
  r.T = T;
  r.N = N;
  r.heads = heads;
  r.d_qkv = d_qkv;
  r.repeat = repeat;
  {
    MacCounter c;
    MacCountingScope scope(c);
    run_joint();
    r.joint_counted = c.score_macs;
  }
  {
    MacCounter c;
    MacCountingScope scope(c);
    run_separated();
    r.separated_counted = c.score_macs;
  }
  r.joint_closed_form = joint_score_macs(T, N, heads, d_qkv);
  r.separated_closed_form = separated_score_macs(T, N, heads, d_qkv);
  r.counts_exact = r.joint_counted == r.joint_closed_form && r.separated_counted == r.separated_closed_form;
  r.ratio = static_cast<double>(r.separated_counted) / static_cast<double>(r.joint_counted);
  r.closed_form_ratio = 1.0 / static_cast<double>(T) + 1.0 / static_cast<double>(N);
  r.ratio_exact = r.separated_counted * static_cast<std::uint64_t>(T * N) ==
                  r.joint_counted * static_cast<std::uint64_t>(T + N);

  using clock = std::chrono::steady_clock;
  float sink = 0;
  if (repeat > 0) {
    auto t0 = clock::now();
    for (Index k = 0; k < repeat; ++k) sink += run_joint()(0, 0);
    auto t1 = clock::now();
    for (Index k = 0; k < repeat; ++k) sink += run_separated()(0, 0);
    auto t2 = clock::now();
    r.joint_seconds = std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(repeat);
    r.separated_seconds = std::chrono::duration<double>(t2 - t1).count() / static_cast<double>(repeat);
  }
  [[maybe_unused]] static volatile float keep;
  keep = sink;
  return r;
}

}  // namespace ms2tan
