#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ms2tan/dataset.hpp"
#include "ms2tan/gaps.hpp"
#include "ms2tan/parameters.hpp"
#include "ms2tan/types.hpp"

namespace ms2tan {

struct TrainConfig {
  Index batch_size = 8;
  double lr0 = 4e-4;
  Index decay_period_epochs = 100;
  double decay_factor = 0.5;
  Index early_stop_patience = 30;
  Index max_epochs = 200;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json(int indent = 2) const;
};

/// Flat key/value text: either a JSON object or `key = value` lines (# comments allowed).
/// Keys: batch_size, lr0, decay_period_epochs, decay_factor, early_stop_patience, max_epochs, seed.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);

/// lr0 * decay_factor^floor(epoch / decay_period_epochs).
double lr_schedule(Index epoch, const TrainConfig& config);

template <typename Scalar>
struct OptimState {
  std::vector<Mat<Scalar>> m;
  std::vector<Mat<Scalar>> v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 4e-4;

  explicit OptimState(const ParameterStore<Scalar>& params, double learning_rate = 4e-4) : lr(learning_rate) {
    for (const auto& p : params) {
      m.push_back(Mat<Scalar>::Zero(p.rows(), p.cols()));
      v.push_back(Mat<Scalar>::Zero(p.rows(), p.cols()));
    }
  }
};

/// One Adam step with bias correction, reading the gradients held in `params`.
template <typename Scalar>
void adam_step(ParameterStore<Scalar>& params, OptimState<Scalar>& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeMismatch("adam_step: optimizer state holds " + std::to_string(state.m.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
  std::size_t k = 0;
  for (const auto& p : params) {
    if (state.m[k].rows() != p.rows() || state.m[k].cols() != p.cols() || state.v[k].rows() != p.rows() ||
        state.v[k].cols() != p.cols() || p.grad.rows() != p.rows() || p.grad.cols() != p.cols())
      throw ShapeMismatch("adam_step: shape mismatch for " + p.name);
    ++k;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(state.beta1, t));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(state.beta2, t));
  const Scalar lr = static_cast<Scalar>(state.lr), eps = static_cast<Scalar>(state.eps);
  k = 0;
  for (auto& p : params) {
    auto& m = state.m[k];
    auto& v = state.v[k];
    m = b1 * m + (Scalar(1) - b1) * p.grad;
    v.array() = b2 * v.array() + (Scalar(1) - b2) * p.grad.array().square();
    p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    ++k;
  }
}

/// Checkpoint: `<base>.json` manifest (model config, parameter names/shapes) plus `<base>.bin`
/// holding every parameter as little-endian float32, concatenated in manifest order.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ParameterStore<float>& params);

struct Checkpoint {
  ModelConfig config;
  ParameterStore<float> params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Validation statistics of the clamped final output over gap pixels.
struct ValidationStats {
  double mae = 0;   // pooled over every gap entry of every sample
  double psnr = 0;  // mean of per-sample gap-region PSNR
};

ValidationStats evaluate_model(const std::vector<Sample>& samples, const ModelConfig& config,
                               const ParameterStore<float>& params);

/// Clamped final restoration of one sample.
SequenceCube restore(const SequenceCube& x, const MaskCube& m, const ModelConfig& config,
                     const ParameterStore<float>& params);

struct EpochLog {
  Index epoch = 0;
  double train_loss = 0;
  double val_mae = 0;
  double val_psnr = 0;
  double lr = 0;
};

std::string training_log_header();
std::string training_log_row(const EpochLog& row);

struct TrainResult {
  ParameterStore<float> best_params;
  ValidationStats initial;  // before any update
  double best_val_mae = 0;
  Index best_epoch = -1;
  Index epochs_run = 0;
  bool early_stopped = false;
  std::vector<EpochLog> log;
};

/// Fresh synthetic gaps for every training sample in every epoch. Sample i of epoch e uses
/// specs[i % specs.size()] with a seed derived from (train seed, e, i). Empty: the stored pairs.
struct GapResampling {
  std::vector<GapSpec> specs;
};

/// Epoch e trains on a seeded shuffle, logs the epoch, and keeps the parameters with the
/// lowest validation gap-MAE. Stops after `early_stop_patience` epochs without improvement.
TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& valid_set,
                  const ModelConfig& model, const TrainConfig& config, std::ostream* progress = nullptr,
                  const GapResampling& resampling = {});

/// Loads the dataset, trains, writes the best checkpoint to `ckpt` and the CSV log next to it
/// (`<ckpt base>.log.csv`).
TrainResult train_from_directory(const std::filesystem::path& data_dir, const ModelConfig& model,
                                 const TrainConfig& config, const std::filesystem::path& ckpt,
                                 std::ostream* progress = nullptr, const GapResampling& resampling = {});

std::filesystem::path training_log_path(const std::filesystem::path& ckpt);

}  // namespace ms2tan
