#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ms2tan/errors.hpp"

namespace ms2tan {

using Index = Eigen::Index;

// Token-major dense matrices: one token per row.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct Dims {
  Index T = 0;
  Index C = 0;
  Index H = 0;
  Index W = 0;

  Index size() const { return T * C * H * W; }
  Index frame_size() const { return C * H * W; }
  Index plane_size() const { return H * W; }
  bool operator==(const Dims&) const = default;
  std::string str() const;
  std::array<Index, 4> as_array() const { return {T, C, H, W}; }
};

inline std::string Dims::str() const {
  return "(" + std::to_string(T) + "," + std::to_string(C) + "," + std::to_string(H) + "," +
         std::to_string(W) + ")";
}

/// Dense T x C x H x W cube stored (t, c, i, j) row-major.
template <typename Scalar>
class Cube {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Cube() = default;
  explicit Cube(Dims dims) : dims_(dims), data_(Storage::Zero(dims.size())) {
    if (dims.T < 1 || dims.C < 1 || dims.H < 1 || dims.W < 1)
      throw DimMismatch("cube dims must all be >= 1, got " + dims.str());
  }
  Cube(Dims dims, Scalar fill) : Cube(dims) { data_.setConstant(fill); }

  const Dims& dims() const { return dims_; }
  Index size() const { return data_.size(); }

  Index offset(Index t, Index c, Index i, Index j) const {
    return ((t * dims_.C + c) * dims_.H + i) * dims_.W + j;
  }
  Scalar& operator()(Index t, Index c, Index i, Index j) { return data_[offset(t, c, i, j)]; }
  Scalar operator()(Index t, Index c, Index i, Index j) const { return data_[offset(t, c, i, j)]; }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  std::span<Scalar> frame(Index t) {
    return {data_.data() + t * dims_.frame_size(), static_cast<std::size_t>(dims_.frame_size())};
  }
  std::span<const Scalar> frame(Index t) const {
    return {data_.data() + t * dims_.frame_size(), static_cast<std::size_t>(dims_.frame_size())};
  }

  template <typename Other>
  Cube<Other> cast() const {
    Cube<Other> out(dims_);
    out.data() = data_.template cast<Other>();
    return out;
  }

 private:
  Dims dims_;
  Storage data_;
};

using SequenceCube = Cube<float>;

/// Binary observation mask: 1 = observed, 0 = missing.
class MaskCube {
 public:
  MaskCube() = default;
  explicit MaskCube(Dims dims, std::uint8_t fill = 1)
      : dims_(dims), flags_(static_cast<std::size_t>(dims.size()), fill) {}

  /// Builds a mask from real values; throws NonBinaryMask unless every value is 0 or 1.
  template <typename Scalar>
  static MaskCube from_values(const Cube<Scalar>& values) {
    MaskCube m(values.dims(), 0);
    for (Index k = 0; k < values.size(); ++k) {
      const Scalar v = values.data()[k];
      if (v == Scalar(1))
        m.flags_[k] = 1;
      else if (v != Scalar(0))
        throw NonBinaryMask("mask value " + std::to_string(static_cast<double>(v)) +
                            " at flat index " + std::to_string(k));
    }
    return m;
  }

  const Dims& dims() const { return dims_; }
  Index size() const { return static_cast<Index>(flags_.size()); }
  Index offset(Index t, Index c, Index i, Index j) const {
    return ((t * dims_.C + c) * dims_.H + i) * dims_.W + j;
  }
  std::uint8_t& operator()(Index t, Index c, Index i, Index j) { return flags_[offset(t, c, i, j)]; }
  std::uint8_t operator()(Index t, Index c, Index i, Index j) const {
    return flags_[offset(t, c, i, j)];
  }
  std::uint8_t& operator[](Index k) { return flags_[static_cast<std::size_t>(k)]; }
  std::uint8_t operator[](Index k) const { return flags_[static_cast<std::size_t>(k)]; }
  std::vector<std::uint8_t>& flags() { return flags_; }
  const std::vector<std::uint8_t>& flags() const { return flags_; }

  std::span<const std::uint8_t> frame(Index t) const {
    return {flags_.data() + t * dims_.frame_size(), static_cast<std::size_t>(dims_.frame_size())};
  }

  Index missing_count() const;
  double coverage() const { return static_cast<double>(missing_count()) / static_cast<double>(size()); }

  template <typename Scalar>
  Cube<Scalar> as_cube() const {
    Cube<Scalar> out(dims_);
    for (Index k = 0; k < size(); ++k) out.data()[k] = Scalar(flags_[k]);
    return out;
  }

 private:
  Dims dims_;
  std::vector<std::uint8_t> flags_;
};

inline Index MaskCube::missing_count() const {
  Index n = 0;
  for (auto f : flags_) n += (f == 0);
  return n;
}

/// Throws DimMismatch or NonBinaryMask; returns normally iff the pair is usable downstream.
template <typename Scalar>
void validate_pair(const Cube<Scalar>& x, const MaskCube& m) {
  if (!(x.dims() == m.dims()))
    throw DimMismatch("cube dims " + x.dims().str() + " vs mask dims " + m.dims().str());
  for (Index k = 0; k < m.size(); ++k)
    if (m[k] > 1) throw NonBinaryMask("mask value " + std::to_string(m[k]) + " at flat index " + std::to_string(k));
  for (Index k = 0; k < x.size(); ++k)
    if (!std::isfinite(static_cast<double>(x.data()[k])))
      throw DimMismatch("non-finite cube value at flat index " + std::to_string(k));
}

template <typename Scalar>
void require_same_dims(const Cube<Scalar>& a, const Cube<Scalar>& b, const char* what) {
  if (!(a.dims() == b.dims()))
    throw DimMismatch(std::string(what) + ": dims " + a.dims().str() + " vs " + b.dims().str());
}

struct ScaleConfig {
  Index patch = 1;   // P
  Index d_emb = 1;
  Index heads = 1;   // h
  Index d_qkv = 1;
  Index layers = 1;  // L; zero is accepted for ablations
  bool operator==(const ScaleConfig&) const = default;
};

/// Which index of the score matrix the missing-rate rule applies to.
enum class MaskMode { Key, Query };

struct LossWeights {
  double pixel = 0.9;
  double structural = 0.05;
  double perceptual = 0.05;
  bool operator==(const LossWeights&) const = default;
};

struct ModelConfig {
  std::vector<ScaleConfig> scales;
  Index bands = 1;  // C of the cubes the model consumes
  double c_max = 0.5;
  LossWeights loss_weights;
  MaskMode mask_mode = MaskMode::Key;
  Index ffn_multiplier = 4;
  std::uint64_t seed = 0;          // parameter initialization
  std::uint64_t feature_seed = 7;  // perceptual feature network
  bool strict_scale_order = false;

  Index num_scales() const { return static_cast<Index>(scales.size()); }
  void validate() const;
};

inline void ModelConfig::validate() const {
  if (scales.empty()) throw ConfigError("model config needs at least one scale");
  if (bands < 1) throw ConfigError("bands must be >= 1");
  for (const auto& s : scales) {
    if (s.patch < 1 || s.d_emb < 1 || s.heads < 1 || s.d_qkv < 1 || s.layers < 0)
      throw ConfigError("scale hyperparameters must be >= 1");
    if (s.d_emb % 2 != 0) throw OddDimension("d_emb must be even for sinusoidal positional encoding");
  }
  if (!(c_max >= 0.0 && c_max <= 1.0)) throw ConfigError("c_max must lie in [0,1]");
  const auto& w = loss_weights;
  if (w.pixel < 0 || w.structural < 0 || w.perceptual < 0 || w.pixel + w.structural + w.perceptual <= 0)
    throw ConfigError("loss weights must be nonnegative with a positive sum");
  if (ffn_multiplier < 1) throw ConfigError("ffn_multiplier must be >= 1");
}

namespace presets {

// Rows of the published hyperparameter table.
inline ModelConfig ms2tan() {
  ModelConfig c;
  c.scales = {{12, 256, 8, 32, 2}, {10, 192, 6, 32, 2}, {8, 128, 4, 32, 2}};
  return c;
}

inline ModelConfig ms2tan_l() {
  ModelConfig c;
  c.scales = {{12, 384, 8, 48, 4}, {10, 256, 6, 48, 4}, {8, 192, 4, 48, 4}};
  return c;
}

inline ModelConfig ms2tan_s() {
  ModelConfig c;
  c.scales = {{12, 192, 8, 24, 2}, {10, 128, 6, 24, 2}};
  return c;
}

/// Desk-scale configuration for 24x24 toy scenes.
inline ModelConfig toy() {
  ModelConfig c;
  c.scales = {{4, 64, 2, 16, 1}, {2, 64, 2, 16, 1}};
  return c;
}

}  // namespace presets

}  // namespace ms2tan
