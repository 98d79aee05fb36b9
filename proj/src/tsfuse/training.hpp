#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsfuse/backbone.hpp"
#include "tsfuse/data.hpp"

namespace tsfuse {

struct LearningRates {
  double backbone = 1e-4;  // backbone and fusion parameters
  double text_mlp = 1e-2;
  double projection = 1e-3;
  double for_group(ParamGroup group) const;
};

inline constexpr std::array<double, 10> kLrMultipliers = {0.05, 0.1, 0.5, 1, 2, 5, 10, 20, 50, 100};

struct TrainConfig {
  LearningRates base;
  double multiplier = 1.0;
  std::size_t batch = 32;
  std::size_t max_epochs = 10;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  bool shuffle = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

// Bias-corrected Adam with one learning rate per parameter group.
class Adam {
 public:
  Adam(const ParameterSet& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  // grads follow the order of params; `lrs` gives the rate of each group.
  void step(ParameterSet& params, const std::vector<Tensor>& grads, const LearningRates& lrs, double multiplier = 1.0);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Counts epochs without a strict improvement (decrease by more than tol).
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience, double tol = 1e-12) : patience_(patience), tol_(tol) {}
  // Returns true when `loss` is a new best.
  bool update(double loss);
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  double best_loss() const { return best_; }
  std::size_t epochs() const { return epochs_; }

 private:
  std::size_t patience_;
  double tol_;
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
  std::size_t epochs_ = 0;
  std::size_t stale_ = 0;
};

// Normalized train/val/test windows.
struct PreparedData {
  WindowBatch train;
  WindowBatch val;
  WindowBatch test;
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::string> warnings;
};

PreparedData prepare_data(const MultimodalDataset& d, std::size_t lookback, std::size_t horizon,
                          const SplitSpec& split = {}, std::size_t stride = 1);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct RunRecord {
  std::string setting;
  std::string fusion;
  double multiplier = 1.0;
  std::uint64_t seed = 0;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  double test_mse = 0.0;
  double test_mae = 0.0;
  std::vector<double> per_horizon_mse;
  double wall_seconds = 0.0;
  std::uint64_t config_digest = 0;
  bool shuffled = true;
  bool failed = false;
  std::string error;

  nlohmann::json to_json(bool include_timing = true) const;
};

struct TrainResult {
  RunRecord record;
  ParameterSet best_params;
  Tensor test_prediction;  // normalized space, [B, H, C]
};

// Mean squared error of the model over a batch, evaluated in chunks.
double evaluate_mse(const ForecastModel& model, const WindowBatch& batch, std::size_t chunk = 256);
Tensor predict_batch(const ForecastModel& model, const WindowBatch& batch, std::size_t chunk = 256);

// Trains a fresh model (initialized from cfg.seed), keeps the best-validation
// parameters and evaluates the test split once with them. Numeric failures
// are recorded in the returned record (failed = true) rather than thrown.
TrainResult train_run(const ModelConfig& model, const PreparedData& data, const TrainConfig& cfg);

struct SweepResult {
  std::vector<TrainResult> runs;  // ordered by multiplier as given
  std::size_t best = 0;
};

// Lowest validation loss wins; ties go to the smaller multiplier. Failed runs
// are skipped; NumericError when all failed.
std::size_t select_best(std::span<const RunRecord> runs);

SweepResult lr_sweep(const ModelConfig& model, const PreparedData& data, const TrainConfig& cfg,
                     std::span<const double> multipliers = kLrMultipliers, std::size_t workers = 1);

}  // namespace tsfuse
