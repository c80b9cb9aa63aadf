#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ms2tan/errors.hpp"
#include "ms2tan/random.hpp"
#include "ms2tan/types.hpp"

namespace ms2tan {

enum class InitKind { Normal, Zero, One };

template <typename Scalar>
struct Parameter {
  std::string name;
  InitKind init = InitKind::Normal;
  Mat<Scalar> value;
  Mat<Scalar> grad;

  Index rows() const { return value.rows(); }
  Index cols() const { return value.cols(); }
};

/// Named learnable arrays with paired gradient buffers, kept in registration order.
template <typename Scalar>
class ParameterStore {
 public:
  ParameterStore() = default;
  explicit ParameterStore(std::uint64_t seed) : seed_(seed) {}

  Parameter<Scalar>& add(const std::string& name, Index rows, Index cols, InitKind init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    Parameter<Scalar> p;
    p.name = name;
    p.init = init;
    p.value = Mat<Scalar>::Zero(rows, cols);
    p.grad = Mat<Scalar>::Zero(rows, cols);
    entries_.push_back(std::move(p));
    return entries_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter<Scalar>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second];
  }
  const Parameter<Scalar>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second];
  }

  void zero_grad() {
    for (auto& p : entries_) p.grad.setZero();
  }

  Index value_count() const {
    Index n = 0;
    for (const auto& p : entries_) n += p.value.size();
    return n;
  }

  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::vector<Parameter<Scalar>>& entries() { return entries_; }
  const std::vector<Parameter<Scalar>>& entries() const { return entries_; }

  template <typename Other>
  ParameterStore<Other> cast() const {
    ParameterStore<Other> out(seed_);
    for (const auto& p : entries_) {
      auto& q = out.add(p.name, p.rows(), p.cols(), p.init);
      q.value = p.value.template cast<Other>();
    }
    return out;
  }

 private:
  std::vector<Parameter<Scalar>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t seed_ = 0;
};

/// Parameter naming shared by every module.
namespace pname {
inline std::string scale(Index s) { return "scale" + std::to_string(s) + "."; }
inline std::string layer(Index s, Index l) { return scale(s) + "layer" + std::to_string(l) + "."; }
}  // namespace pname

/// Fills a parameter from (seed, name, shape): weights ~ N(0, 1/fan_in), biases 0, gains 1.
template <typename Scalar>
void initialize_parameter(Parameter<Scalar>& p, std::uint64_t seed) {
  switch (p.init) {
    case InitKind::Zero:
      p.value.setZero();
      break;
    case InitKind::One:
      p.value.setOnes();
      break;
    case InitKind::Normal: {
      const auto shape_salt = static_cast<std::uint64_t>(p.rows()) * 1000003ull + static_cast<std::uint64_t>(p.cols());
      Rng rng(derive_seed(seed, p.name, shape_salt));
      const double scale = 1.0 / std::sqrt(static_cast<double>(p.rows()));
      for (Index r = 0; r < p.rows(); ++r)
        for (Index c = 0; c < p.cols(); ++c) p.value(r, c) = static_cast<Scalar>(rng.normal(0.0, scale));
      break;
    }
  }
  p.grad.setZero();
}

struct InitOptions {
  // When set, each scale's unembedding weight starts at zero so the untrained
  // network is the identity map.
  bool zero_final_projection = true;
};

/// Registers every learnable array of the network for `config`.
template <typename Scalar>
ParameterStore<Scalar> init_parameters(const ModelConfig& config, std::uint64_t seed, InitOptions opts = {}) {
  config.validate();
  ParameterStore<Scalar> store(seed);
  const Index C = config.bands;
  for (Index s = 0; s < config.num_scales(); ++s) {
    const auto& sc = config.scales[s];
    const Index patch_len = C * sc.patch * sc.patch;
    const Index d = sc.d_emb;
    const Index inner = sc.heads * sc.d_qkv;
    const Index hidden = config.ffn_multiplier * d;
    const std::string sp = pname::scale(s);
    store.add(sp + "embed.weight", 2 * patch_len, d, InitKind::Normal);
    store.add(sp + "embed.bias", 1, d, InitKind::Zero);
    for (Index l = 0; l < sc.layers; ++l) {
      const std::string lp = pname::layer(s, l);
      for (const char* ln : {"ln1", "ln2", "ln3"}) {
        store.add(lp + ln + ".gain", 1, d, InitKind::One);
        store.add(lp + ln + ".bias", 1, d, InitKind::Zero);
      }
      for (const char* att : {"mta", "msa"}) {
        store.add(lp + att + ".qkv.weight", d, 3 * inner, InitKind::Normal);
        store.add(lp + att + ".proj.weight", inner, d, InitKind::Normal);
        store.add(lp + att + ".proj.bias", 1, d, InitKind::Zero);
      }
      store.add(lp + "ffn.fc1.weight", d, hidden, InitKind::Normal);
      store.add(lp + "ffn.fc1.bias", 1, hidden, InitKind::Zero);
      store.add(lp + "ffn.fc2.weight", hidden, d, InitKind::Normal);
      store.add(lp + "ffn.fc2.bias", 1, d, InitKind::Zero);
    }
    store.add(sp + "unembed.weight", d, patch_len,
              opts.zero_final_projection ? InitKind::Zero : InitKind::Normal);
    store.add(sp + "unembed.bias", 1, patch_len, InitKind::Zero);
  }
  for (auto& p : store) initialize_parameter(p, seed);
  return store;
}

}  // namespace ms2tan
