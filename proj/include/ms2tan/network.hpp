#pragma once

#include <string>
#include <vector>

#include "ms2tan/attention.hpp"
#include "ms2tan/embedding.hpp"
#include "ms2tan/parameters.hpp"
#include "ms2tan/types.hpp"

namespace ms2tan {

/// Outputs of every restoration scale plus the observed-value-replaced result.
template <typename Scalar>
struct RestorationTrace {
  std::vector<Cube<Scalar>> intermediates;
  Cube<Scalar> final;
};

template <typename Scalar>
struct ScaleCache {
  EmbedCache<Scalar> embed;
  MfeCache<Scalar> mfe;
  UnembedCache<Scalar> unembed;
  Index T = 0;
  Index N = 0;
};

/// Unembedding(MFE(Embedding(prev), M)) + prev for one scale.
template <typename Scalar>
Cube<Scalar> scale_forward(const Cube<Scalar>& prev, const MaskCube& m, const ModelConfig& config, Index scale_index,
                           const ParameterStore<Scalar>& params, ScaleCache<Scalar>* cache = nullptr) {
  const ScaleConfig& scale = config.scales[static_cast<std::size_t>(scale_index)];
  const TokenSequence<Scalar> seq = embed(prev, m, scale, params, scale_index, cache ? &cache->embed : nullptr);
  // Flags come from the original mask and stay fixed through all layers of the scale.
  const auto flags = AttentionMaskFlags::from_missing_rates(seq.missing_rate, config.c_max, config.mask_mode);
  const Mat<Scalar> features = mfe(seq, flags, scale, params, scale_index, cache ? &cache->mfe : nullptr);
  Cube<Scalar> out = unembed(features, scale, params, scale_index, prev.dims(), cache ? &cache->unembed : nullptr);
  out.data() += prev.data();
  if (cache) {
    cache->T = seq.T;
    cache->N = seq.N;
  }
  return out;
}

/// Returns dL/dprev given dL/dout.
template <typename Scalar>
Cube<Scalar> scale_backward(const ScaleCache<Scalar>& cache, const Cube<Scalar>& dout, const ModelConfig& config,
                            Index scale_index, ParameterStore<Scalar>& params) {
  const ScaleConfig& scale = config.scales[static_cast<std::size_t>(scale_index)];
  const Mat<Scalar> dfeatures = unembed_backward(cache.unembed, dout, params, scale_index);
  const Mat<Scalar> dtokens = mfe_backward(cache.mfe, dfeatures, cache.T, cache.N, scale, params, scale_index);
  Cube<Scalar> dprev = embed_backward(cache.embed, dtokens, params, scale_index);
  dprev.data() += dout.data();
  return dprev;
}

/// out = y_hat * (1 - m) + x * m.
template <typename Scalar>
Cube<Scalar> replace_observed(const Cube<Scalar>& y_hat, const Cube<Scalar>& x, const MaskCube& m) {
  require_same_dims(y_hat, x, "replace_observed");
  if (!(x.dims() == m.dims())) throw DimMismatch("replace_observed: mask dims " + m.dims().str());
  Cube<Scalar> out(x.dims());
  for (Index k = 0; k < x.size(); ++k) out.data()[k] = m[k] ? x.data()[k] : y_hat.data()[k];
  return out;
}

/// Gradient w.r.t. y_hat; observed entries receive none (x is treated as constant).
template <typename Scalar>
Cube<Scalar> replace_observed_backward(const Cube<Scalar>& dout, const MaskCube& m) {
  Cube<Scalar> d(dout.dims());
  for (Index k = 0; k < dout.size(); ++k) d.data()[k] = m[k] ? Scalar(0) : dout.data()[k];
  return d;
}

/// True when patch sizes are non-increasing from input to output.
inline bool scales_coarse_to_fine(const ModelConfig& config) {
  for (std::size_t s = 1; s < config.scales.size(); ++s)
    if (config.scales[s].patch > config.scales[s - 1].patch) return false;
  return true;
}

/// Forward record needed by network_backward.
template <typename Scalar>
struct ForwardTape {
  std::vector<ScaleCache<Scalar>> scales;
  MaskCube mask;
  bool recorded = false;
};

template <typename Scalar>
RestorationTrace<Scalar> ms2tan_forward(const Cube<Scalar>& x, const MaskCube& m, const ModelConfig& config,
                                        const ParameterStore<Scalar>& params, ForwardTape<Scalar>* tape = nullptr) {
  validate_pair(x, m);
  if (config.strict_scale_order && !scales_coarse_to_fine(config))
    throw NonMonotonicScales("scale patch sizes must be non-increasing from input to output");
  for (const auto& s : config.scales) require_divisible(x.dims().H, x.dims().W, s.patch);
  if (x.dims().C != config.bands)
    throw DimMismatch("model expects " + std::to_string(config.bands) + " bands, cube has " +
                      std::to_string(x.dims().C));
  if (tape) {
    tape->recorded = false;
    tape->scales.assign(config.scales.size(), {});
  }
  RestorationTrace<Scalar> trace;
  trace.intermediates.reserve(config.scales.size());
  const Cube<Scalar>* prev = &x;
  for (Index s = 0; s < config.num_scales(); ++s) {
    trace.intermediates.push_back(
        scale_forward(*prev, m, config, s, params, tape ? &tape->scales[static_cast<std::size_t>(s)] : nullptr));
    prev = &trace.intermediates.back();
  }
  trace.final = replace_observed(trace.intermediates.back(), x, m);
  if (tape) {
    tape->mask = m;
    tape->recorded = true;
  }
  return trace;
}

/// Reverse pass over a recorded forward. `d_intermediates[s]` is dL/dY^(s+1); `d_final`
/// (optional) is dL/dY_out. Accumulates parameter gradients and returns dL/dx through
/// the network path.
template <typename Scalar>
Cube<Scalar> network_backward(const ForwardTape<Scalar>& tape, const std::vector<Cube<Scalar>>& d_intermediates,
                              const ModelConfig& config, ParameterStore<Scalar>& params,
                              const Cube<Scalar>* d_final = nullptr) {
  if (!tape.recorded) throw GraphError("backward called without a recorded forward pass");
  if (d_intermediates.size() != config.scales.size() || tape.scales.size() != config.scales.size())
    throw GraphError("backward: expected one gradient per scale");
  Cube<Scalar> d = d_intermediates.back();
  if (d_final) d.data() += replace_observed_backward(*d_final, tape.mask).data();
  for (Index s = config.num_scales() - 1; s >= 0; --s) {
    d = scale_backward(tape.scales[static_cast<std::size_t>(s)], d, config, s, params);
    if (s > 0) d.data() += d_intermediates[static_cast<std::size_t>(s - 1)].data();
  }
  return d;
}

}  // namespace ms2tan
