#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ms2tan/embedding.hpp"
#include "ms2tan/linear.hpp"
#include "ms2tan/parameters.hpp"
#include "ms2tan/types.hpp"

namespace ms2tan {

/// Per-token flag: true iff the token's patch missing rate exceeds C_max.
struct AttentionMaskFlags {
  std::vector<std::uint8_t> masked;
  MaskMode mode = MaskMode::Key;

  Index size() const { return static_cast<Index>(masked.size()); }

  static AttentionMaskFlags from_missing_rates(const std::vector<double>& rates, double c_max,
                                               MaskMode mode = MaskMode::Key) {
    AttentionMaskFlags f;
    f.mode = mode;
    f.masked.reserve(rates.size());
    for (double r : rates) f.masked.push_back(r > c_max ? 1 : 0);
    return f;
  }

  AttentionMaskFlags gather(const std::vector<Index>& rows) const {
    AttentionMaskFlags g;
    g.mode = mode;
    g.masked.reserve(rows.size());
    for (Index r : rows) g.masked.push_back(masked[static_cast<std::size_t>(r)]);
    return g;
  }
};

/// Score multiply-accumulate counter; active for the lifetime of a MacCountingScope.
struct MacCounter {
  std::uint64_t score_macs = 0;  // QK^T products
  std::uint64_t value_macs = 0;  // A V products
  std::uint64_t attention_calls = 0;
};

namespace detail {
inline MacCounter*& active_mac_counter() {
  thread_local MacCounter* counter = nullptr;
  return counter;
}
inline std::atomic<bool>& ffn_sign_fault() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace detail

class MacCountingScope {
 public:
  explicit MacCountingScope(MacCounter& counter) : previous_(detail::active_mac_counter()) {
    detail::active_mac_counter() = &counter;
  }
  ~MacCountingScope() { detail::active_mac_counter() = previous_; }
  MacCountingScope(const MacCountingScope&) = delete;
  MacCountingScope& operator=(const MacCountingScope&) = delete;

 private:
  MacCounter* previous_;
};

/// Flips the sign of the FFN output-weight gradient while alive. Test fixture only.
class FfnSignFaultScope {
 public:
  FfnSignFaultScope() { detail::ffn_sign_fault() = true; }
  ~FfnSignFaultScope() { detail::ffn_sign_fault() = false; }
  FfnSignFaultScope(const FfnSignFaultScope&) = delete;
  FfnSignFaultScope& operator=(const FfnSignFaultScope&) = delete;
};

/// Sets (i, j) to -inf when i == j, or when the flagged index (key j, or query i
/// in MaskMode::Query) has too high a missing rate.
template <typename Scalar>
Mat<Scalar> apply_mask(const Mat<Scalar>& scores, const AttentionMaskFlags& flags) {
  const Index n = scores.rows();
  if (scores.cols() != n || flags.size() != n)
    throw ShapeMismatch("apply_mask: scores " + std::to_string(scores.rows()) + "x" + std::to_string(scores.cols()) +
                        " with " + std::to_string(flags.size()) + " flags");
  constexpr Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  Mat<Scalar> out = scores;
  for (Index i = 0; i < n; ++i) {
    if (flags.mode == MaskMode::Query && flags.masked[i]) {
      out.row(i).setConstant(neg_inf);
      continue;
    }
    for (Index j = 0; j < n; ++j)
      if (i == j || (flags.mode == MaskMode::Key && flags.masked[j])) out(i, j) = neg_inf;
  }
  return out;
}

/// Row softmax; a row with no finite entry yields all zeros.
template <typename Scalar>
Mat<Scalar> masked_softmax(const Mat<Scalar>& scores) {
  Mat<Scalar> out = Mat<Scalar>::Zero(scores.rows(), scores.cols());
  for (Index i = 0; i < scores.rows(); ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < scores.cols(); ++j) mx = std::max(mx, scores(i, j));
    if (!std::isfinite(static_cast<double>(mx))) continue;
    Scalar sum = 0;
    for (Index j = 0; j < scores.cols(); ++j) {
      const Scalar e = std::isinf(static_cast<double>(scores(i, j))) ? Scalar(0) : std::exp(scores(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    out.row(i) /= sum;
  }
  return out;
}

struct AttentionShape {
  Index heads = 1;
  Index d_qkv = 1;
  Index inner() const { return heads * d_qkv; }
};

template <typename Scalar>
struct MaskedAttentionCache {
  Mat<Scalar> x;
  Mat<Scalar> qkv;
  std::vector<Mat<Scalar>> weights;  // A' per head
  Mat<Scalar> heads;                 // concatenated head outputs
};

/// Proj([A'_1 V_1, ..., A'_h V_h]) + x with A' = softmax(ApplyMask(Q K^T / sqrt(d_qkv))).
/// `prefix` names the parameters `<prefix>.qkv.weight`, `<prefix>.proj.weight`, `<prefix>.proj.bias`.
template <typename Scalar>
Mat<Scalar> masked_attention(const Mat<Scalar>& x, const AttentionMaskFlags& flags,
                             const ParameterStore<Scalar>& params, const std::string& prefix, AttentionShape shape,
                             MaskedAttentionCache<Scalar>* cache = nullptr) {
  const Index n = x.rows();
  const Index dk = shape.d_qkv;
  const Index inner = shape.inner();
  if (flags.size() != n) throw ShapeMismatch("masked_attention: flag count does not match token count");
  const auto& w_qkv = params.at(prefix + ".qkv.weight");
  if (w_qkv.cols() != 3 * inner) throw ShapeMismatch(prefix + ": qkv width does not match 3*h*d_qkv");
  const Mat<Scalar> qkv = linear_forward(x, w_qkv);
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));

  MacCounter* counter = detail::active_mac_counter();
  if (counter) counter->attention_calls += 1;

  Mat<Scalar> heads(n, inner);
  std::vector<Mat<Scalar>> weights;
  weights.reserve(static_cast<std::size_t>(shape.heads));
  for (Index hd = 0; hd < shape.heads; ++hd) {
    const auto q = qkv.middleCols(hd * dk, dk);
    const auto k = qkv.middleCols(inner + hd * dk, dk);
    const auto v = qkv.middleCols(2 * inner + hd * dk, dk);
    const Mat<Scalar> scores = (q * k.transpose()) * inv_sqrt;
    Mat<Scalar> a = masked_softmax<Scalar>(apply_mask<Scalar>(scores, flags));
    heads.middleCols(hd * dk, dk).noalias() = a * v;
    if (counter) {
      counter->score_macs += static_cast<std::uint64_t>(q.rows() * k.rows() * q.cols());
      counter->value_macs += static_cast<std::uint64_t>(a.rows() * a.cols() * v.cols());
    }
    weights.push_back(std::move(a));
  }
  Mat<Scalar> out =
      linear_forward(heads, params.at(prefix + ".proj.weight"), &params.at(prefix + ".proj.bias"));
  out += x;
  if (cache) {
    cache->x = x;
    cache->qkv = qkv;
    cache->weights = std::move(weights);
    cache->heads = std::move(heads);
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> masked_attention_backward(const MaskedAttentionCache<Scalar>& cache, const Mat<Scalar>& dout,
                                      ParameterStore<Scalar>& params, const std::string& prefix,
                                      AttentionShape shape) {
  const Index dk = shape.d_qkv;
  const Index inner = shape.inner();
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));
  const Mat<Scalar> dheads =
      linear_backward(cache.heads, dout, params.at(prefix + ".proj.weight"), &params.at(prefix + ".proj.bias"));
  Mat<Scalar> dqkv(cache.qkv.rows(), cache.qkv.cols());
  for (Index hd = 0; hd < shape.heads; ++hd) {
    const auto q = cache.qkv.middleCols(hd * dk, dk);
    const auto k = cache.qkv.middleCols(inner + hd * dk, dk);
    const auto v = cache.qkv.middleCols(2 * inner + hd * dk, dk);
    const Mat<Scalar>& a = cache.weights[static_cast<std::size_t>(hd)];
    const auto dh = dheads.middleCols(hd * dk, dk);
    const Mat<Scalar> da = dh * v.transpose();
    dqkv.middleCols(2 * inner + hd * dk, dk).noalias() = a.transpose() * dh;
    // Softmax Jacobian; masked entries have a = 0 and receive no gradient.
    const Vec<Scalar> row_dot = (da.array() * a.array()).rowwise().sum();
    Mat<Scalar> ds = a.array() * (da.colwise() - row_dot).array();
    ds *= inv_sqrt;
    dqkv.middleCols(hd * dk, dk).noalias() = ds * k;
    dqkv.middleCols(inner + hd * dk, dk).noalias() = ds.transpose() * q;
  }
  Mat<Scalar> dx = linear_backward(cache.x, dqkv, params.at(prefix + ".qkv.weight"));
  dx += dout;
  return dx;
}

enum class AttentionAxis { Temporal, Spatial };

/// Token rows of each independent attention group: temporal groups fix n and vary t,
/// spatial groups fix t and vary n.
inline std::vector<std::vector<Index>> attention_groups(Index T, Index N, AttentionAxis axis) {
  std::vector<std::vector<Index>> groups;
  if (axis == AttentionAxis::Temporal) {
    groups.resize(static_cast<std::size_t>(N));
    for (Index n = 0; n < N; ++n)
      for (Index t = 0; t < T; ++t) groups[static_cast<std::size_t>(n)].push_back(t * N + n);
  } else {
    groups.resize(static_cast<std::size_t>(T));
    for (Index t = 0; t < T; ++t)
      for (Index n = 0; n < N; ++n) groups[static_cast<std::size_t>(t)].push_back(t * N + n);
  }
  return groups;
}

template <typename Scalar>
struct GroupedAttentionCache {
  std::vector<MaskedAttentionCache<Scalar>> groups;
};

template <typename Scalar>
Mat<Scalar> gather_rows(const Mat<Scalar>& x, const std::vector<Index>& rows) {
  Mat<Scalar> out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = x.row(rows[r]);
  return out;
}

template <typename Scalar>
void scatter_rows(const Mat<Scalar>& src, const std::vector<Index>& rows, Mat<Scalar>& dst) {
  for (std::size_t r = 0; r < rows.size(); ++r) dst.row(rows[r]) = src.row(static_cast<Index>(r));
}

/// Masked attention applied independently along one axis of the (t, n) token grid.
template <typename Scalar>
Mat<Scalar> axis_attention(const Mat<Scalar>& tokens, Index T, Index N, AttentionAxis axis,
                           const AttentionMaskFlags& flags, const ParameterStore<Scalar>& params,
                           const std::string& prefix, AttentionShape shape,
                           GroupedAttentionCache<Scalar>* cache = nullptr) {
  if (tokens.rows() != T * N || flags.size() != T * N)
    throw ShapeMismatch("axis_attention: expected " + std::to_string(T * N) + " tokens and flags");
  const auto groups = attention_groups(T, N, axis);
  Mat<Scalar> out(tokens.rows(), tokens.cols());
  if (cache) cache->groups.assign(groups.size(), {});
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const Mat<Scalar> xg = gather_rows(tokens, groups[g]);
    const Mat<Scalar> yg = masked_attention(xg, flags.gather(groups[g]), params, prefix, shape,
                                            cache ? &cache->groups[g] : nullptr);
    scatter_rows(yg, groups[g], out);
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> axis_attention_backward(const GroupedAttentionCache<Scalar>& cache, const Mat<Scalar>& dout, Index T,
                                    Index N, AttentionAxis axis, ParameterStore<Scalar>& params,
                                    const std::string& prefix, AttentionShape shape) {
  const auto groups = attention_groups(T, N, axis);
  Mat<Scalar> dx(dout.rows(), dout.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const Mat<Scalar> dyg = gather_rows(dout, groups[g]);
    scatter_rows(masked_attention_backward(cache.groups[g], dyg, params, prefix, shape), groups[g], dx);
  }
  return dx;
}

/// Masked temporal attention: N sequences of length T.
template <typename Scalar>
Mat<Scalar> masked_temporal_attention(const Mat<Scalar>& tokens, Index T, Index N, const AttentionMaskFlags& flags,
                                      const ParameterStore<Scalar>& params, const std::string& prefix,
                                      AttentionShape shape, GroupedAttentionCache<Scalar>* cache = nullptr) {
  return axis_attention(tokens, T, N, AttentionAxis::Temporal, flags, params, prefix, shape, cache);
}

/// Masked spatial attention: T sequences of length N.
template <typename Scalar>
Mat<Scalar> masked_spatial_attention(const Mat<Scalar>& tokens, Index T, Index N, const AttentionMaskFlags& flags,
                                     const ParameterStore<Scalar>& params, const std::string& prefix,
                                     AttentionShape shape, GroupedAttentionCache<Scalar>* cache = nullptr) {
  return axis_attention(tokens, T, N, AttentionAxis::Spatial, flags, params, prefix, shape, cache);
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> normalized;
  Vec<Scalar> inv_std;
};

template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, const ParameterStore<Scalar>& params, const std::string& prefix,
                       LayerNormCache<Scalar>* cache = nullptr) {
  const auto& gain = params.at(prefix + ".gain");
  const auto& bias = params.at(prefix + ".bias");
  if (gain.cols() != x.cols()) throw ShapeMismatch(prefix + ": layer norm width mismatch");
  const Index d = x.cols();
  Mat<Scalar> xhat(x.rows(), d);
  Vec<Scalar> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mean).square().sum() / static_cast<Scalar>(d);
    inv_std[r] = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLayerNormEps));
    xhat.row(r) = (x.row(r).array() - mean) * inv_std[r];
  }
  Mat<Scalar> y = xhat.array().rowwise() * gain.value.row(0).array();
  y.rowwise() += bias.value.row(0);
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename Scalar>
Mat<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache, const Mat<Scalar>& dy,
                                ParameterStore<Scalar>& params, const std::string& prefix) {
  auto& gain = params.at(prefix + ".gain");
  auto& bias = params.at(prefix + ".bias");
  const Mat<Scalar>& xhat = cache.normalized;
  gain.grad.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  bias.grad.row(0) += dy.colwise().sum();
  const Mat<Scalar> dxhat = dy.array().rowwise() * gain.value.row(0).array();
  const Scalar d = static_cast<Scalar>(dy.cols());
  Mat<Scalar> dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_d = dxhat.row(r).sum() / d;
    const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) / d;
    dx.row(r) = (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx) * cache.inv_std[r];
  }
  return dx;
}

template <typename Scalar>
struct FfnCache {
  Mat<Scalar> x;
  Mat<Scalar> pre_activation;
  Mat<Scalar> hidden;
};

/// Linear(ReLU(Linear(x))) + x; parameters `<prefix>.fc1.*`, `<prefix>.fc2.*`.
template <typename Scalar>
Mat<Scalar> ffn(const Mat<Scalar>& x, const ParameterStore<Scalar>& params, const std::string& prefix,
                FfnCache<Scalar>* cache = nullptr) {
  Mat<Scalar> pre = linear_forward(x, params.at(prefix + ".fc1.weight"), &params.at(prefix + ".fc1.bias"));
  Mat<Scalar> hidden = pre.cwiseMax(Scalar(0));
  Mat<Scalar> y = linear_forward(hidden, params.at(prefix + ".fc2.weight"), &params.at(prefix + ".fc2.bias"));
  if (y.cols() != x.cols()) throw ShapeMismatch(prefix + ": ffn output width does not match input");
  y += x;
  if (cache) {
    cache->x = x;
    cache->pre_activation = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return y;
}

template <typename Scalar>
Mat<Scalar> ffn_backward(const FfnCache<Scalar>& cache, const Mat<Scalar>& dy, ParameterStore<Scalar>& params,
                         const std::string& prefix) {
  auto& fc2 = params.at(prefix + ".fc2.weight");
  const bool fault = detail::ffn_sign_fault();
  const Mat<Scalar> before = fault ? fc2.grad : Mat<Scalar>();
  Mat<Scalar> dhidden = linear_backward(cache.hidden, dy, fc2, &params.at(prefix + ".fc2.bias"));
  if (fault) fc2.grad = before - (fc2.grad - before);
  dhidden = (cache.pre_activation.array() > Scalar(0)).select(dhidden, Scalar(0));
  Mat<Scalar> dx =
      linear_backward(cache.x, dhidden, params.at(prefix + ".fc1.weight"), &params.at(prefix + ".fc1.bias"));
  dx += dy;
  return dx;
}

template <typename Scalar>
struct MstaCache {
  LayerNormCache<Scalar> ln1, ln2, ln3;
  GroupedAttentionCache<Scalar> mta, msa;
  FfnCache<Scalar> ffn;
};

/// U = MTA(LN(E)); V = MSA(LN(U)); out = FFN(LN(V)).
template <typename Scalar>
Mat<Scalar> msta_unit(const Mat<Scalar>& tokens, Index T, Index N, const AttentionMaskFlags& flags,
                      const ParameterStore<Scalar>& params, const std::string& prefix, AttentionShape shape,
                      MstaCache<Scalar>* cache = nullptr) {
  const Mat<Scalar> e1 = layer_norm(tokens, params, prefix + "ln1", cache ? &cache->ln1 : nullptr);
  const Mat<Scalar> u =
      masked_temporal_attention(e1, T, N, flags, params, prefix + "mta", shape, cache ? &cache->mta : nullptr);
  const Mat<Scalar> u1 = layer_norm(u, params, prefix + "ln2", cache ? &cache->ln2 : nullptr);
  const Mat<Scalar> v =
      masked_spatial_attention(u1, T, N, flags, params, prefix + "msa", shape, cache ? &cache->msa : nullptr);
  const Mat<Scalar> v1 = layer_norm(v, params, prefix + "ln3", cache ? &cache->ln3 : nullptr);
  return ffn(v1, params, prefix + "ffn", cache ? &cache->ffn : nullptr);
}

template <typename Scalar>
Mat<Scalar> msta_unit_backward(const MstaCache<Scalar>& cache, const Mat<Scalar>& dout, Index T, Index N,
                               ParameterStore<Scalar>& params, const std::string& prefix, AttentionShape shape) {
  Mat<Scalar> d = ffn_backward(cache.ffn, dout, params, prefix + "ffn");
  d = layer_norm_backward(cache.ln3, d, params, prefix + "ln3");
  d = axis_attention_backward(cache.msa, d, T, N, AttentionAxis::Spatial, params, prefix + "msa", shape);
  d = layer_norm_backward(cache.ln2, d, params, prefix + "ln2");
  d = axis_attention_backward(cache.mta, d, T, N, AttentionAxis::Temporal, params, prefix + "mta", shape);
  return layer_norm_backward(cache.ln1, d, params, prefix + "ln1");
}

template <typename Scalar>
struct MfeCache {
  std::vector<MstaCache<Scalar>> layers;
};

/// Adds the positional encoding once, then applies `scale.layers` MSTA units.
template <typename Scalar>
Mat<Scalar> mfe(const TokenSequence<Scalar>& seq, const AttentionMaskFlags& flags, const ScaleConfig& scale,
                const ParameterStore<Scalar>& params, Index scale_index, MfeCache<Scalar>* cache = nullptr) {
  if (seq.tokens.cols() != scale.d_emb) throw ShapeMismatch("mfe: token width does not match d_emb");
  Mat<Scalar> z = seq.tokens + positional_encoding<Scalar>(seq.T, seq.N, scale.d_emb);
  const AttentionShape shape{scale.heads, scale.d_qkv};
  if (cache) cache->layers.assign(static_cast<std::size_t>(scale.layers), {});
  for (Index l = 0; l < scale.layers; ++l)
    z = msta_unit(z, seq.T, seq.N, flags, params, pname::layer(scale_index, l), shape,
                  cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr);
  return z;
}

/// Returns the gradient w.r.t. the incoming tokens (positional encoding is constant).
template <typename Scalar>
Mat<Scalar> mfe_backward(const MfeCache<Scalar>& cache, const Mat<Scalar>& dout, Index T, Index N,
                         const ScaleConfig& scale, ParameterStore<Scalar>& params, Index scale_index) {
  const AttentionShape shape{scale.heads, scale.d_qkv};
  Mat<Scalar> d = dout;
  for (Index l = scale.layers - 1; l >= 0; --l)
    d = msta_unit_backward(cache.layers[static_cast<std::size_t>(l)], d, T, N, params, pname::layer(scale_index, l),
                           shape);
  return d;
}

}  // namespace ms2tan
