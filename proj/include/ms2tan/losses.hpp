#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ms2tan/network.hpp"
#include "ms2tan/random.hpp"
#include "ms2tan/types.hpp"

namespace ms2tan {

inline constexpr double kSsimC1 = 1e-4;  // (0.01 * 1)^2
inline constexpr double kSsimC2 = 9e-4;  // (0.03 * 1)^2

/// (1 / TCHW) * ||eta - y||^2 over every entry.
template <typename Scalar>
Scalar pixel_loss(const Cube<Scalar>& eta, const Cube<Scalar>& y, Cube<Scalar>* grad = nullptr) {
  require_same_dims(eta, y, "pixel_loss");
  const auto diff = (eta.data() - y.data()).eval();
  const Scalar n = static_cast<Scalar>(eta.size());
  if (grad) {
    *grad = Cube<Scalar>(eta.dims());
    grad->data() = diff * (Scalar(2) / n);
  }
  return diff.square().sum() / n;
}

/// Global-statistics SSIM of two equally sized slices.
template <typename Scalar>
Scalar global_ssim(const Scalar* a, const Scalar* b, Index n, Scalar* grad_a = nullptr) {
  double mu_a = 0, mu_b = 0;
  for (Index k = 0; k < n; ++k) {
    mu_a += a[k];
    mu_b += b[k];
  }
  mu_a /= static_cast<double>(n);
  mu_b /= static_cast<double>(n);
  double var_a = 0, var_b = 0, cov = 0;
  for (Index k = 0; k < n; ++k) {
    const double da = a[k] - mu_a, db = b[k] - mu_b;
    var_a += da * da;
    var_b += db * db;
    cov += da * db;
  }
  var_a /= static_cast<double>(n);
  var_b /= static_cast<double>(n);
  cov /= static_cast<double>(n);
  const double A = 2 * mu_a * mu_b + kSsimC1;
  const double B = 2 * cov + kSsimC2;
  const double Cl = mu_a * mu_a + mu_b * mu_b + kSsimC1;
  const double D = var_a + var_b + kSsimC2;
  const double ssim = (A * B) / (Cl * D);
  if (grad_a) {
    const double inv_n = 1.0 / static_cast<double>(n);
    for (Index k = 0; k < n; ++k) {
      const double dA = 2 * mu_b * inv_n;
      const double dB = 2 * (b[k] - mu_b) * inv_n;
      const double dC = 2 * mu_a * inv_n;
      const double dD = 2 * (a[k] - mu_a) * inv_n;
      grad_a[k] = static_cast<Scalar>((dA * B + A * dB) / (Cl * D) - ssim * (dC / Cl + dD / D));
    }
  }
  return static_cast<Scalar>(ssim);
}

/// 1 - mean over (t, c) slices of whole-slice SSIM.
template <typename Scalar>
Scalar structural_loss(const Cube<Scalar>& eta, const Cube<Scalar>& y, Cube<Scalar>* grad = nullptr) {
  require_same_dims(eta, y, "structural_loss");
  const Dims& d = eta.dims();
  const Index plane = d.plane_size();
  const Index slices = d.T * d.C;
  if (grad) *grad = Cube<Scalar>(d);
  double sum = 0;
  for (Index s = 0; s < slices; ++s) {
    Scalar* g = grad ? grad->data().data() + s * plane : nullptr;
    sum += global_ssim(eta.data().data() + s * plane, y.data().data() + s * plane, plane, g);
  }
  if (grad) grad->data() *= Scalar(-1) / static_cast<Scalar>(slices);
  return static_cast<Scalar>(1.0 - sum / static_cast<double>(slices));
}

/// Fixed random convolutional feature extractor standing in for a pretrained backbone:
/// three 3x3 stride-2 convolutions (padding 1) with widths 16, 32, 64 and ReLU between layers.
template <typename Scalar>
class FeatureNetwork {
 public:
  static constexpr std::array<Index, 3> kWidths{16, 32, 64};

  struct Cache {
    std::vector<Mat<Scalar>> inputs;  // per layer, (H*W) x C
    std::vector<Mat<Scalar>> pre;     // per layer pre-activation
    std::vector<std::array<Index, 2>> sizes;
  };

  FeatureNetwork(Index in_channels, std::uint64_t seed) : in_channels_(in_channels), seed_(seed) {
    Index c_in = in_channels;
    for (std::size_t l = 0; l < kWidths.size(); ++l) {
      Rng rng(derive_seed(seed, "feature.conv", l));
      const Index fan_in = c_in * 9;
      Mat<Scalar> w(kWidths[l], fan_in);
      const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (Index r = 0; r < w.rows(); ++r)
        for (Index c = 0; c < w.cols(); ++c) w(r, c) = static_cast<Scalar>(rng.normal(0.0, scale));
      weights_.push_back(std::move(w));
      c_in = kWidths[l];
    }
  }

  Index in_channels() const { return in_channels_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Mat<Scalar>>& weights() const { return weights_; }

  static Index out_size(Index n) { return (n - 1) / 2 + 1; }

  /// d_f for an H x W input.
  Index feature_count(Index H, Index W) const {
    for (std::size_t l = 0; l < kWidths.size(); ++l) {
      H = out_size(H);
      W = out_size(W);
    }
    return H * W * kWidths.back();
  }

  /// Features of one C x H x W frame, flattened.
  Vec<Scalar> forward(std::span<const Scalar> frame, Index H, Index W, Cache* cache = nullptr) const {
    Mat<Scalar> x(H * W, in_channels_);
    for (Index c = 0; c < in_channels_; ++c)
      for (Index p = 0; p < H * W; ++p) x(p, c) = frame[c * H * W + p];
    if (cache) *cache = Cache{};
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const Index Ho = out_size(H), Wo = out_size(W);
      Mat<Scalar> y = im2col(x, H, W) * weights_[l].transpose();
      if (cache) {
        cache->inputs.push_back(x);
        cache->pre.push_back(y);
        cache->sizes.push_back({H, W});
      }
      if (l + 1 < weights_.size()) y = y.cwiseMax(Scalar(0));
      x = std::move(y);
      H = Ho;
      W = Wo;
    }
    return Eigen::Map<const Vec<Scalar>>(x.data(), x.size());
  }

  /// Gradient w.r.t. the input frame, laid out C x H x W.
  std::vector<Scalar> backward(const Cache& cache, const Vec<Scalar>& dfeatures) const {
    const std::size_t L = weights_.size();
    Mat<Scalar> d = Eigen::Map<const Mat<Scalar>>(dfeatures.data(), cache.pre.back().rows(), cache.pre.back().cols());
    for (std::size_t l = L; l-- > 0;) {
      if (l + 1 < L) d = (cache.pre[l].array() > Scalar(0)).select(d, Scalar(0));
      const Mat<Scalar> dcols = d * weights_[l];
      d = col2im(dcols, cache.sizes[l][0], cache.sizes[l][1], cache.inputs[l].cols());
    }
    const Index H = cache.sizes[0][0], W = cache.sizes[0][1];
    std::vector<Scalar> out(static_cast<std::size_t>(in_channels_ * H * W));
    for (Index c = 0; c < in_channels_; ++c)
      for (Index p = 0; p < H * W; ++p) out[static_cast<std::size_t>(c * H * W + p)] = d(p, c);
    return out;
  }

 private:
  // x: (H*W) x C -> (Ho*Wo) x (C*9), column order (c, ki, kj).
  static Mat<Scalar> im2col(const Mat<Scalar>& x, Index H, Index W) {
    const Index C = x.cols();
    const Index Ho = out_size(H), Wo = out_size(W);
    Mat<Scalar> cols = Mat<Scalar>::Zero(Ho * Wo, C * 9);
    for (Index oi = 0; oi < Ho; ++oi)
      for (Index oj = 0; oj < Wo; ++oj)
        for (Index ki = 0; ki < 3; ++ki)
          for (Index kj = 0; kj < 3; ++kj) {
            const Index i = oi * 2 - 1 + ki, j = oj * 2 - 1 + kj;
            if (i < 0 || i >= H || j < 0 || j >= W) continue;
            for (Index c = 0; c < C; ++c) cols(oi * Wo + oj, c * 9 + ki * 3 + kj) = x(i * W + j, c);
          }
    return cols;
  }

  static Mat<Scalar> col2im(const Mat<Scalar>& dcols, Index H, Index W, Index C) {
    const Index Ho = out_size(H), Wo = out_size(W);
    Mat<Scalar> dx = Mat<Scalar>::Zero(H * W, C);
    for (Index oi = 0; oi < Ho; ++oi)
      for (Index oj = 0; oj < Wo; ++oj)
        for (Index ki = 0; ki < 3; ++ki)
          for (Index kj = 0; kj < 3; ++kj) {
            const Index i = oi * 2 - 1 + ki, j = oj * 2 - 1 + kj;
            if (i < 0 || i >= H || j < 0 || j >= W) continue;
            for (Index c = 0; c < C; ++c) dx(i * W + j, c) += dcols(oi * Wo + oj, c * 9 + ki * 3 + kj);
          }
    return dx;
  }

  Index in_channels_;
  std::uint64_t seed_;
  std::vector<Mat<Scalar>> weights_;
};

/// Per-frame features of a whole cube.
template <typename Scalar>
std::vector<Vec<Scalar>> cube_features(const Cube<Scalar>& y, const FeatureNetwork<Scalar>& feat) {
  std::vector<Vec<Scalar>> out;
  for (Index t = 0; t < y.dims().T; ++t) out.push_back(feat.forward(y.frame(t), y.dims().H, y.dims().W));
  return out;
}

/// Mean over frames of (1/d_f) * ||psi(eta_t) - psi(y_t)||^2, with precomputed target features.
template <typename Scalar>
Scalar perceptual_loss(const Cube<Scalar>& eta, const std::vector<Vec<Scalar>>& target_features,
                       const FeatureNetwork<Scalar>& feat, Cube<Scalar>* grad = nullptr) {
  const Dims& d = eta.dims();
  if (d.C != feat.in_channels()) throw DimMismatch("perceptual_loss: band count does not match feature network");
  if (static_cast<Index>(target_features.size()) != d.T) throw DimMismatch("perceptual_loss: frame count mismatch");
  if (grad) *grad = Cube<Scalar>(d);
  const Scalar d_f = static_cast<Scalar>(feat.feature_count(d.H, d.W));
  Scalar total = 0;
  typename FeatureNetwork<Scalar>::Cache cache;
  for (Index t = 0; t < d.T; ++t) {
    const Vec<Scalar> f = feat.forward(eta.frame(t), d.H, d.W, grad ? &cache : nullptr);
    if (f.size() != target_features[static_cast<std::size_t>(t)].size())
      throw DimMismatch("perceptual_loss: feature size mismatch");
    const Vec<Scalar> diff = f - target_features[static_cast<std::size_t>(t)];
    total += diff.squaredNorm() / d_f;
    if (grad) {
      const Vec<Scalar> df = diff * (Scalar(2) / (d_f * static_cast<Scalar>(d.T)));
      const auto dframe = feat.backward(cache, df);
      std::copy(dframe.begin(), dframe.end(), grad->frame(t).begin());
    }
  }
  return total / static_cast<Scalar>(d.T);
}

template <typename Scalar>
Scalar perceptual_loss(const Cube<Scalar>& eta, const Cube<Scalar>& y, const FeatureNetwork<Scalar>& feat,
                       Cube<Scalar>* grad = nullptr) {
  require_same_dims(eta, y, "perceptual_loss");
  return perceptual_loss(eta, cube_features(y, feat), feat, grad);
}

struct ScaleLoss {
  double pixel = 0;
  double structural = 0;
  double perceptual = 0;
  double combined = 0;
};

/// Per-scale and overall joint loss. `pixel`, `structural` and `perceptual` are
/// means over scales of the unweighted components.
struct LossBreakdown {
  double pixel = 0;
  double structural = 0;
  double perceptual = 0;
  std::vector<ScaleLoss> per_scale;
  double total = 0;
};

/// L^(i) = l1 * pixel + l2 * structural + l3 * perceptual; total = mean_i L^(i).
inline LossBreakdown combine_losses(std::vector<ScaleLoss> per_scale, const LossWeights& w) {
  LossBreakdown b;
  if (per_scale.empty()) throw GraphError("combine_losses: no scales");
  double sum = 0;
  for (auto& s : per_scale) {
    s.combined = w.pixel * s.pixel + w.structural * s.structural + w.perceptual * s.perceptual;
    sum += s.combined;
    b.pixel += s.pixel;
    b.structural += s.structural;
    b.perceptual += s.perceptual;
  }
  const double S = static_cast<double>(per_scale.size());
  b.pixel /= S;
  b.structural /= S;
  b.perceptual /= S;
  b.total = sum / S;
  b.per_scale = std::move(per_scale);
  return b;
}

/// Joint loss over all intermediates. When `grads` is given it receives dL/dY^(i) per scale;
/// gradients of zero-weighted terms are not computed.
template <typename Scalar>
LossBreakdown joint_loss(const RestorationTrace<Scalar>& trace, const Cube<Scalar>& y, const LossWeights& weights,
                         const FeatureNetwork<Scalar>& feat, std::vector<Cube<Scalar>>* grads = nullptr) {
  const std::size_t S = trace.intermediates.size();
  if (S == 0) throw GraphError("joint_loss: trace has no intermediates");
  const std::vector<Vec<Scalar>> target_features = cube_features(y, feat);
  std::vector<ScaleLoss> per_scale(S);
  if (grads) grads->assign(S, Cube<Scalar>(y.dims()));
  const Scalar inv_s = Scalar(1) / static_cast<Scalar>(S);
  for (std::size_t s = 0; s < S; ++s) {
    const Cube<Scalar>& eta = trace.intermediates[s];
    auto term = [&](double weight, auto&& fn) {
      Cube<Scalar> g;
      const bool want = grads && weight != 0;
      const double value = static_cast<double>(fn(want ? &g : nullptr));
      if (want) (*grads)[s].data() += g.data() * (static_cast<Scalar>(weight) * inv_s);
      return value;
    };
    per_scale[s].pixel = term(weights.pixel, [&](Cube<Scalar>* g) { return pixel_loss(eta, y, g); });
    per_scale[s].structural = term(weights.structural, [&](Cube<Scalar>* g) { return structural_loss(eta, y, g); });
    per_scale[s].perceptual =
        term(weights.perceptual, [&](Cube<Scalar>* g) { return perceptual_loss(eta, target_features, feat, g); });
  }
  return combine_losses(std::move(per_scale), weights);
}

}  // namespace ms2tan
