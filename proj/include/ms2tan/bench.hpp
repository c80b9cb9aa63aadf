#pragma once

#include <cstdint>
#include <string>

#include "ms2tan/types.hpp"

namespace ms2tan {

/// Score MACs of one joint attention over all T*N tokens: (T*N)^2 * h * d_qkv.
std::uint64_t joint_score_macs(Index T, Index N, Index heads, Index d_qkv);

/// Score MACs of MTA followed by MSA: h * d_qkv * (T*N^2 + N*T^2).
std::uint64_t separated_score_macs(Index T, Index N, Index heads, Index d_qkv);

struct AttentionBenchResult {
  Index T = 0, N = 0, heads = 0, d_qkv = 0, repeat = 0;
  std::uint64_t joint_counted = 0;
  std::uint64_t separated_counted = 0;
  std::uint64_t joint_closed_form = 0;
  std::uint64_t separated_closed_form = 0;
  double ratio = 0;              // separated / joint, counted
  double closed_form_ratio = 0;  // 1/T + 1/N
  bool counts_exact = false;     // counted == closed form for both
  bool ratio_exact = false;      // separated * T * N == joint * (T + N), in integers
  double joint_seconds = 0;      // mean wall clock per repetition
  double separated_seconds = 0;

  std::string to_json() const;
};

/// Runs joint and separated masked attention (d_emb = h * d_qkv, no masked tokens) under a
/// MAC counter. With `repeat` = 0 only the counting pass runs.
AttentionBenchResult bench_attention(Index T, Index N, Index d_qkv, Index heads, Index repeat,
                                     std::uint64_t seed = 0);

}  // namespace ms2tan
