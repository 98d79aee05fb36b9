#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "tsfuse/error.hpp"
#include "tsfuse/training.hpp"

using namespace tsfuse;

namespace {

ParameterSet scalar_params(double value, ParamGroup group = ParamGroup::kBackbone) {
  ParameterSet p;
  p.add("w", group, Tensor::scalar(value));
  return p;
}

RunRecord record(double mult, double val, bool failed = false) {
  RunRecord r;
  r.multiplier = mult;
  r.best_val = val;
  r.failed = failed;
  return r;
}

ModelConfig toy_model(BackboneKind kind, FusionSpec fusion = {}) {
  ModelConfig c;
  c.backbone.kind = kind;
  c.backbone.lookback = 8;
  c.backbone.horizon = 8;
  c.backbone.hidden = 16;
  c.backbone.kernel = 5;
  c.fusion = fusion;
  c.text_dim = 32;
  return c;
}

}  // namespace

TEST_CASE("learning rate groups") {
  LearningRates lr;
  CHECK(lr.for_group(ParamGroup::kBackbone) == 1e-4);
  CHECK(lr.for_group(ParamGroup::kTextMlp) == 1e-2);
  CHECK(lr.for_group(ParamGroup::kProjection) == 1e-3);
  CHECK(kLrMultipliers.size() == 10);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.patience = 11;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  auto p = scalar_params(1.5);
  Adam adam(p);
  for (int i = 0; i < 3; ++i) adam.step(p, {Tensor::scalar(0.0)}, {}, 1.0);
  CHECK(p.at("w").value[0] == 1.5);
}

TEST_CASE("adam: first step moves by lr * sign(g)") {
  auto p = scalar_params(0.0, ParamGroup::kProjection);
  Adam adam(p);
  adam.step(p, {Tensor::scalar(0.5)}, {}, 2.0);
  // m_hat = 0.5, v_hat = 0.25, lr = 1e-3 * 2
  CHECK(p.at("w").value[0] == doctest::Approx(-2e-3 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
  adam.step(p, {Tensor::scalar(-0.5)}, {}, 2.0);
  // m = 0.9 * 0.05 - 0.05 = -0.005, v = 0.999 * 2.5e-4 + 2.5e-4
  const double m_hat = -0.005 / (1 - 0.81), v_hat = (0.999 * 2.5e-4 + 1e-3 * 0.25) / (1 - 0.999 * 0.999);
  CHECK(p.at("w").value[0] ==
        doctest::Approx(-2e-3 * 0.5 / (0.5 + 1e-8) - 2e-3 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam rejects non-finite gradients") {
  auto p = scalar_params(0.0);
  Adam adam(p);
  Tensor bad = Tensor::unchecked({1}, {std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(adam.step(p, {bad}, {}, 1.0), NumericError);
}

TEST_CASE("early stopping") {
  EarlyStopping es(5);
  std::size_t stopped = 0;
  for (double v : {1.0, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99}) {
    es.update(v);
    if (es.should_stop()) {
      stopped = es.epochs();
      break;
    }
  }
  CHECK(stopped == 7);
  CHECK(es.best_epoch() == 2);
  CHECK(es.best_loss() == 0.9);

  EarlyStopping mono(5);
  for (int e = 0; e < 10; ++e) {
    mono.update(1.0 - 0.05 * e);
    CHECK(!mono.should_stop());
  }
  CHECK(mono.best_epoch() == 10);
}

TEST_CASE("sweep selection") {
  std::vector<RunRecord> inc;
  for (double m : kLrMultipliers) inc.push_back(record(m, m));
  CHECK(inc[select_best(inc)].multiplier == 0.05);
  std::vector<RunRecord> tie{record(0.5, 0.3), record(1, 0.2), record(2, 0.2), record(5, 0.4)};
  CHECK(tie[select_best(tie)].multiplier == 1);
  std::vector<RunRecord> failed{record(0.5, 0.01, true), record(1, 0.2)};
  CHECK(select_best(failed) == 1);
  std::vector<RunRecord> all_failed{record(1, 0, true), record(2, 0, true)};
  CHECK_THROWS_AS(select_best(all_failed), NumericError);
}

TEST_CASE("unimodal DLinear beats the zero forecast on toy data") {
  std::size_t wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto data = prepare_data(generate_toy_dataset(seed), 8, 8);
    TrainConfig cfg;
    cfg.seed = seed;
    const auto r = train_run(toy_model(BackboneKind::kDLinear), data, cfg);
    CHECK(!r.record.failed);
    wins += r.record.test_mse < 1.0;
  }
  CHECK(wins >= 9);
}

TEST_CASE("training is deterministic and restores the best checkpoint") {
  const auto data = prepare_data(generate_toy_dataset(2), 8, 8);
  TrainConfig cfg;
  cfg.seed = 4;
  cfg.max_epochs = 4;
  cfg.patience = 2;
  const auto model = toy_model(BackboneKind::kMlp, make_fusion(Strategy::kCfa, 0, 8));
  const auto a = train_run(model, data, cfg), b = train_run(model, data, cfg);
  CHECK(a.best_params == b.best_params);
  CHECK(a.record.to_json(false) == b.record.to_json(false));
  CHECK(a.record.best_epoch >= 1);
  CHECK(a.record.best_val == a.record.epochs[a.record.best_epoch - 1].val_loss);
  ForecastModel restored(model, a.best_params);
  CHECK(evaluate_mse(restored, data.val) == doctest::Approx(a.record.best_val).epsilon(1e-12));
  CHECK(evaluate_mse(restored, data.test) == doctest::Approx(a.record.test_mse).epsilon(1e-12));
  CHECK(a.record.per_horizon_mse.size() == 8);
}

TEST_CASE("parallel sweep matches the serial sweep") {
  const auto data = prepare_data(generate_toy_dataset(1), 8, 8);
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.patience = 2;
  const std::vector<double> mults{0.5, 1, 10};
  const auto model = toy_model(BackboneKind::kDLinear, make_fusion(Strategy::kAdditive, kLast));
  const auto serial = lr_sweep(model, data, cfg, mults, 1);
  const auto parallel = lr_sweep(model, data, cfg, mults, 3);
  REQUIRE(serial.runs.size() == 3);
  CHECK(serial.best == parallel.best);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(serial.runs[i].record.multiplier == mults[i]);
    CHECK(serial.runs[i].best_params == parallel.runs[i].best_params);
  }
}

TEST_CASE("divergent runs are recorded, not thrown") {
  const auto data = prepare_data(generate_toy_dataset(0), 8, 8);
  TrainConfig cfg;
  cfg.base.backbone = 1e150;
  cfg.max_epochs = 3;
  cfg.patience = 3;
  const auto r = train_run(toy_model(BackboneKind::kMlp), data, cfg);
  CHECK(r.record.failed);
  CHECK(r.record.error.find("epoch") != std::string::npos);
}
