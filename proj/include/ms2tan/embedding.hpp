#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ms2tan/linear.hpp"
#include "ms2tan/parameters.hpp"
#include "ms2tan/types.hpp"

namespace ms2tan {

/// TN tokens ordered pos = t * N + n.
template <typename Scalar>
struct TokenSequence {
  Mat<Scalar> tokens;
  std::vector<double> missing_rate;  // per token, in [0,1]
  Index T = 0;
  Index N = 0;
  Index P = 0;

  Index size() const { return T * N; }
  Index frame_of(Index pos) const { return pos / N; }
  Index patch_of(Index pos) const { return pos % N; }
  static Index position(Index t, Index n, Index N) { return t * N + n; }
};

inline void require_divisible(Index H, Index W, Index P) {
  if (P < 1 || H % P != 0 || W % P != 0)
    throw IndivisibleSize("patch size " + std::to_string(P) + " does not divide " + std::to_string(H) + "x" +
                          std::to_string(W));
}

inline Index patches_per_frame(Index H, Index W, Index P) {
  require_divisible(H, W, P);
  return (H / P) * (W / P);
}

/// Splits one C x H x W frame into N = HW/P^2 patch vectors flattened (c, i, j).
/// Patch n covers rows [(n / (W/P)) * P, +P) and cols [(n % (W/P)) * P, +P).
template <typename T>
Mat<T> patchify(std::span<const T> frame, Index C, Index H, Index W, Index P) {
  require_divisible(H, W, P);
  if (static_cast<Index>(frame.size()) != C * H * W) throw ShapeMismatch("frame length does not match C*H*W");
  const Index grid_w = W / P;
  const Index n_patches = (H / P) * grid_w;
  Mat<T> out(n_patches, C * P * P);
  for (Index n = 0; n < n_patches; ++n) {
    const Index r0 = (n / grid_w) * P;
    const Index c0 = (n % grid_w) * P;
    Index k = 0;
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < P; ++i)
        for (Index j = 0; j < P; ++j) out(n, k++) = frame[(c * H + r0 + i) * W + c0 + j];
  }
  return out;
}

/// Inverse of patchify, written into `frame`.
template <typename T, typename Derived>
void unpatchify_into(const Eigen::MatrixBase<Derived>& patches, Index P, Index C, Index H, Index W,
                     std::span<T> frame) {
  if (P < 1 || H % P != 0 || W % P != 0 || patches.rows() * P * P != H * W || patches.cols() != C * P * P ||
      static_cast<Index>(frame.size()) != C * H * W)
    throw ShapeMismatch("patch matrix " + std::to_string(patches.rows()) + "x" + std::to_string(patches.cols()) +
                        " incompatible with C=" + std::to_string(C) + " H=" + std::to_string(H) +
                        " W=" + std::to_string(W) + " P=" + std::to_string(P));
  const Index grid_w = W / P;
  for (Index n = 0; n < patches.rows(); ++n) {
    const Index r0 = (n / grid_w) * P;
    const Index c0 = (n % grid_w) * P;
    Index k = 0;
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < P; ++i)
        for (Index j = 0; j < P; ++j) frame[(c * H + r0 + i) * W + c0 + j] = patches(n, k++);
  }
}

template <typename T>
std::vector<T> unpatchify(const Mat<T>& patches, Index P, Index C, Index H, Index W) {
  std::vector<T> frame(static_cast<std::size_t>(C * H * W));
  unpatchify_into(patches, P, C, H, W, std::span<T>(frame));
  return frame;
}

/// Fraction of zero entries among the C*P^2 mask values of each patch, pos = t*N + n.
inline std::vector<double> patch_missing_rates(const MaskCube& m, Index P) {
  const Dims& d = m.dims();
  const Index N = patches_per_frame(d.H, d.W, P);
  std::vector<double> rates(static_cast<std::size_t>(d.T * N));
  const double denom = static_cast<double>(d.C * P * P);
  for (Index t = 0; t < d.T; ++t) {
    const Mat<std::uint8_t> patches = patchify<std::uint8_t>(m.frame(t), d.C, d.H, d.W, P);
    for (Index n = 0; n < N; ++n) {
      Index missing = 0;
      for (Index k = 0; k < patches.cols(); ++k) missing += (patches(n, k) == 0);
      rates[static_cast<std::size_t>(t * N + n)] = static_cast<double>(missing) / denom;
    }
  }
  return rates;
}

/// Sinusoidal encoding: (pos, 2i) -> sin(pos * 10000^(-2i/d)), (pos, 2i+1) -> cos(...).
template <typename Scalar>
Mat<Scalar> positional_encoding(Index T, Index N, Index d_emb) {
  if (d_emb % 2 != 0) throw OddDimension("positional encoding needs an even width, got " + std::to_string(d_emb));
  Mat<Scalar> pe(T * N, d_emb);
  for (Index pos = 0; pos < T * N; ++pos) {
    for (Index i = 0; i < d_emb / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d_emb));
      const double angle = static_cast<double>(pos) * freq;
      pe(pos, 2 * i) = static_cast<Scalar>(std::sin(angle));
      pe(pos, 2 * i + 1) = static_cast<Scalar>(std::cos(angle));
    }
  }
  return pe;
}

template <typename Scalar>
struct EmbedCache {
  Mat<Scalar> inputs;  // TN x 2CP^2: patch values then patch mask values
  Dims dims;
  Index P = 0;
};

/// Projects [patch values, patch mask] (2CP^2 features) to d_emb for every token.
template <typename Scalar>
TokenSequence<Scalar> embed(const Cube<Scalar>& x, const MaskCube& m, const ScaleConfig& scale,
                            const ParameterStore<Scalar>& params, Index scale_index,
                            EmbedCache<Scalar>* cache = nullptr) {
  if (!(x.dims() == m.dims())) throw DimMismatch("embed: cube " + x.dims().str() + " vs mask " + m.dims().str());
  const Dims& d = x.dims();
  const Index P = scale.patch;
  const Index N = patches_per_frame(d.H, d.W, P);
  const Index len = d.C * P * P;
  Mat<Scalar> inputs(d.T * N, 2 * len);
  for (Index t = 0; t < d.T; ++t) {
    inputs.block(t * N, 0, N, len) = patchify<Scalar>(x.frame(t), d.C, d.H, d.W, P);
    inputs.block(t * N, len, N, len) = patchify<std::uint8_t>(m.frame(t), d.C, d.H, d.W, P).template cast<Scalar>();
  }
  const std::string sp = pname::scale(scale_index);
  TokenSequence<Scalar> seq;
  seq.tokens = linear_forward(inputs, params.at(sp + "embed.weight"), &params.at(sp + "embed.bias"));
  seq.missing_rate = patch_missing_rates(m, P);
  seq.T = d.T;
  seq.N = N;
  seq.P = P;
  if (cache) {
    cache->inputs = std::move(inputs);
    cache->dims = d;
    cache->P = P;
  }
  return seq;
}

/// Accumulates embedding gradients and returns dL/dx (the mask carries no gradient).
template <typename Scalar>
Cube<Scalar> embed_backward(const EmbedCache<Scalar>& cache, const Mat<Scalar>& dtokens,
                            ParameterStore<Scalar>& params, Index scale_index) {
  const std::string sp = pname::scale(scale_index);
  const Mat<Scalar> dinputs =
      linear_backward(cache.inputs, dtokens, params.at(sp + "embed.weight"), &params.at(sp + "embed.bias"));
  const Dims& d = cache.dims;
  const Index P = cache.P;
  const Index N = (d.H / P) * (d.W / P);
  const Index len = d.C * P * P;
  Cube<Scalar> dx(d);
  for (Index t = 0; t < d.T; ++t)
    unpatchify_into(dinputs.block(t * N, 0, N, len), P, d.C, d.H, d.W, dx.frame(t));
  return dx;
}

template <typename Scalar>
struct UnembedCache {
  Mat<Scalar> tokens;
  Dims dims;
  Index P = 0;
};

/// Projects tokens d_emb -> CP^2 and reassembles each frame.
template <typename Scalar>
Cube<Scalar> unembed(const Mat<Scalar>& tokens, const ScaleConfig& scale, const ParameterStore<Scalar>& params,
                     Index scale_index, Dims dims, UnembedCache<Scalar>* cache = nullptr) {
  const Index P = scale.patch;
  const Index N = patches_per_frame(dims.H, dims.W, P);
  if (tokens.rows() != dims.T * N)
    throw ShapeMismatch("unembed: " + std::to_string(tokens.rows()) + " tokens for T*N=" + std::to_string(dims.T * N));
  const std::string sp = pname::scale(scale_index);
  const Mat<Scalar> patches =
      linear_forward(tokens, params.at(sp + "unembed.weight"), &params.at(sp + "unembed.bias"));
  if (patches.cols() != dims.C * P * P) throw ShapeMismatch("unembed: projection width does not match C*P^2");
  Cube<Scalar> out(dims);
  for (Index t = 0; t < dims.T; ++t) unpatchify_into(patches.middleRows(t * N, N), P, dims.C, dims.H, dims.W, out.frame(t));
  if (cache) {
    cache->tokens = tokens;
    cache->dims = dims;
    cache->P = P;
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> unembed_backward(const UnembedCache<Scalar>& cache, const Cube<Scalar>& dout,
                             ParameterStore<Scalar>& params, Index scale_index) {
  const Dims& d = cache.dims;
  const Index P = cache.P;
  const Index N = (d.H / P) * (d.W / P);
  Mat<Scalar> dpatches(d.T * N, d.C * P * P);
  for (Index t = 0; t < d.T; ++t) dpatches.middleRows(t * N, N) = patchify<Scalar>(dout.frame(t), d.C, d.H, d.W, P);
  const std::string sp = pname::scale(scale_index);
  return linear_backward(cache.tokens, dpatches, params.at(sp + "unembed.weight"), &params.at(sp + "unembed.bias"));
}

}  // namespace ms2tan
