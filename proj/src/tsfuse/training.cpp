#include "tsfuse/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <mutex>
#include <thread>

#include "tsfuse/analysis.hpp"
#include "tsfuse/error.hpp"
#include "tsfuse/rng.hpp"

namespace tsfuse {

double LearningRates::for_group(ParamGroup group) const {
  switch (group) {
    case ParamGroup::kBackbone: return backbone;
    case ParamGroup::kTextMlp: return text_mlp;
    case ParamGroup::kProjection: return projection;
  }
  return backbone;
}

void TrainConfig::validate() const {
  if (!(multiplier > 0)) throw ConfigError("learning-rate multiplier must be positive");
  if (batch == 0) throw ConfigError("batch size must be positive");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (patience == 0 || patience > max_epochs) throw ConfigError("patience must be in [1, max_epochs]");
  if (!(base.backbone > 0 && base.text_mlp > 0 && base.projection > 0))
    throw ConfigError("learning rates must be positive");
}

Adam::Adam(const ParameterSet& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params.items()) {
    m_.emplace_back(p.value.size(), 0.0);
    v_.emplace_back(p.value.size(), 0.0);
  }
}

void Adam::step(ParameterSet& params, const std::vector<Tensor>& grads, const LearningRates& lrs,
                double multiplier) {
  auto& items = params.items();
  if (grads.size() != items.size() || m_.size() != items.size())
    throw ShapeError("adam: " + std::to_string(grads.size()) + " gradients for " + std::to_string(items.size()) +
                     " parameters");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i];
    const auto& g = grads[i];
    if (g.shape() != p.value.shape())
      throw ShapeError("adam: gradient of '" + p.name + "' has shape " + shape_string(g.shape()));
    if (!g.all_finite()) throw NumericError("non-finite gradient for '" + p.name + "'");
    const double lr = lrs.for_group(p.group) * multiplier;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      p.value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

bool EarlyStopping::update(double loss) {
  ++epochs_;
  if (best_epoch_ == 0 || loss < best_ - tol_) {
    best_ = loss;
    best_epoch_ = epochs_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

PreparedData prepare_data(const MultimodalDataset& d, std::size_t lookback, std::size_t horizon,
                          const SplitSpec& split, std::size_t stride) {
  const auto parts = chronological_split(d, split, lookback + horizon);
  const auto train = make_windows(parts.train, lookback, horizon, stride);
  const auto norm = Normalizer::fit(train);
  PreparedData out;
  out.train = norm.apply(train);
  out.val = norm.apply(make_windows(parts.val, lookback, horizon, stride));
  out.test = norm.apply(make_windows(parts.test, lookback, horizon, stride));
  out.mean = norm.mean();
  out.stddev = norm.stddev();
  out.warnings = norm.warnings();
  return out;
}

nlohmann::json RunRecord::to_json(bool include_timing) const {
  nlohmann::json j;
  j["setting"] = setting;
  j["fusion"] = fusion;
  j["multiplier"] = multiplier;
  j["seed"] = seed;
  j["config_digest"] = config_digest;
  j["shuffled"] = shuffled;
  j["failed"] = failed;
  if (failed) j["error"] = error;
  auto& ep = j["epochs"] = nlohmann::json::array();
  for (const auto& e : epochs) ep.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}});
  j["best_epoch"] = best_epoch;
  j["best_val"] = best_val;
  j["test_mse"] = test_mse;
  j["test_mae"] = test_mae;
  j["per_horizon_mse"] = per_horizon_mse;
  if (include_timing) j["wall_seconds"] = wall_seconds;
  return j;
}

Tensor predict_batch(const ForecastModel& model, const WindowBatch& batch, std::size_t chunk) {
  const bool fused = model.config().fusion.strategy != Strategy::kNone;
  std::vector<double> out;
  Shape shape;
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, batch.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto part = batch.select(idx);
    Graph g;
    BoundParams bound(g, model.params(), false);
    Var text = fused ? g.constant(part.text) : Var{};
    const Tensor& y = g.forward(model.build(g, bound, g.constant(part.x), text).yhat);
    out.insert(out.end(), y.data().begin(), y.data().end());
    shape = y.shape();
  }
  shape[0] = batch.size();
  return Tensor::unchecked(std::move(shape), std::move(out));
}

double evaluate_mse(const ForecastModel& model, const WindowBatch& batch, std::size_t chunk) {
  return mse(predict_batch(model, batch, chunk), batch.y);
}

TrainResult train_run(const ModelConfig& mc, const PreparedData& data, const TrainConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  if (data.train.size() == 0 || data.val.size() == 0 || data.test.size() == 0)
    throw InsufficientDataError("every split needs at least one window");

  TrainResult result;
  RunRecord& rec = result.record;
  rec.fusion = mc.fusion.label();
  rec.multiplier = cfg.multiplier;
  rec.seed = cfg.seed;
  rec.shuffled = cfg.shuffle;
  char buf[128];
  std::snprintf(buf, sizeof buf, ";mult=%.17g;batch=%zu;epochs=%zu;patience=%zu;seed=%llu", cfg.multiplier,
                cfg.batch, cfg.max_epochs, cfg.patience, static_cast<unsigned long long>(cfg.seed));
  rec.config_digest = fnv1a64(mc.canonical() + buf);

  ForecastModel model(mc, cfg.seed);
  const bool fused = mc.fusion.strategy != Strategy::kNone;
  Adam adam(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
  EarlyStopping stopper(cfg.patience);
  Rng shuffle_rng(cfg.seed, "shuffle");
  std::vector<std::size_t> order(data.train.size());
  result.best_params = model.params();

  std::size_t current_epoch = 0;
  try {
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      current_epoch = epoch;
      std::iota(order.begin(), order.end(), 0);
      if (cfg.shuffle)
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t n = std::min(cfg.batch, order.size() - start);
        const auto batch = data.train.select(std::span(order).subspan(start, n));
        Graph g;
        BoundParams bound(g, model.params());
        Var text = fused ? g.constant(batch.text) : Var{};
        Var yhat = model.build(g, bound, g.constant(batch.x), text).yhat;
        Var loss = g.mean(g.square(g.sub(yhat, g.constant(batch.y))));
        const double value = g.forward(loss)[0];
        if (!std::isfinite(value)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
        g.backward(loss);
        adam.step(model.params(), bound.gradients(), cfg.base, cfg.multiplier);
        loss_sum += value * static_cast<double>(n);
      }
      EpochLog log{epoch, loss_sum / static_cast<double>(order.size()), evaluate_mse(model, data.val)};
      if (!std::isfinite(log.val_loss))
        throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
      rec.epochs.push_back(log);
      if (stopper.update(log.val_loss)) result.best_params = model.params();
      if (stopper.should_stop()) break;
    }
    model.params() = result.best_params;
    rec.best_epoch = stopper.best_epoch();
    rec.best_val = stopper.best_loss();
    result.test_prediction = predict_batch(model, data.test);
    result.test_prediction.require_finite("test prediction");
    const auto report = metric_report(result.test_prediction, data.test.y);
    rec.test_mse = report.mse;
    rec.test_mae = report.mae;
    rec.per_horizon_mse = report.per_horizon_mse;
  } catch (const NumericError& e) {
    rec.failed = true;
    rec.error = std::string(e.what()) + " (epoch " + std::to_string(current_epoch) + ")";
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

std::size_t select_best(std::span<const RunRecord> runs) {
  std::size_t best = runs.size();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (runs[i].failed) continue;
    if (best == runs.size() || runs[i].best_val < runs[best].best_val ||
        (runs[i].best_val == runs[best].best_val && runs[i].multiplier < runs[best].multiplier))
      best = i;
  }
  if (best == runs.size()) throw NumericError("sweep failure: all " + std::to_string(runs.size()) + " runs failed");
  return best;
}

SweepResult lr_sweep(const ModelConfig& model, const PreparedData& data, const TrainConfig& cfg,
                     std::span<const double> multipliers, std::size_t workers) {
  if (multipliers.empty()) throw ConfigError("learning-rate sweep needs at least one multiplier");
  SweepResult out;
  out.runs.resize(multipliers.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < multipliers.size(); i = next++) {
      try {
        TrainConfig c = cfg;
        c.multiplier = multipliers[i];
        out.runs[i] = train_run(model, data, c);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(workers, 1, multipliers.size());
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<RunRecord> records;
  for (const auto& r : out.runs) records.push_back(r.record);
  out.best = select_best(records);
  return out;
}

}  // namespace tsfuse
