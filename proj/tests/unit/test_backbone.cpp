#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "tsfuse/backbone.hpp"
#include "tsfuse/error.hpp"

using namespace tsfuse;
namespace fs = std::filesystem;

namespace {

Tensor randn(Rng& rng, Shape s) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

BackboneConfig small(BackboneKind kind, std::size_t C = 3) {
  BackboneConfig b;
  b.kind = kind;
  b.lookback = 6;
  b.horizon = 4;
  b.channels = C;
  b.hidden = 8;
  b.layers = 2;
  b.kernel = 5;
  return b;
}

std::vector<FusionSpec> every_spec(std::size_t r) {
  std::vector<FusionSpec> v{FusionSpec{}};
  for (const auto& s : all_fusion_strategies(r)) v.push_back(s);
  v.push_back(make_fusion(Strategy::kAdditive, kFirst | kMiddle | kLast));
  return v;
}

}  // namespace

TEST_CASE("linear 3 -> 2 with bias has 8 parameters") {
  ParameterSet p;
  Rng rng(0);
  add_linear(p, "l", ParamGroup::kBackbone, 3, 2, rng);
  CHECK(p.element_count() == 8);
}

TEST_CASE("unimodal MLP shapes") {
  ModelConfig c{small(BackboneKind::kMlp), FusionSpec{}, 5};
  ForecastModel m(c, 1);
  Graph g;
  BoundParams bound(g, m.params(), false);
  Rng rng(1);
  auto fwd = m.build(g, bound, g.constant(randn(rng, {2, 6, 3})), Var{});
  CHECK(g.shape(fwd.yhat) == Shape{2, 4, 3});
  CHECK(fwd.hidden.size() == 3);
  CHECK(g.shape(fwd.hidden[0]) == Shape{2, 6, 8});
  CHECK(fwd.sites.empty());
}

TEST_CASE("fusion sites") {
  ModelConfig c{small(BackboneKind::kMlp), make_fusion(Strategy::kAdditive, kFirst), 5};
  CHECK(c.fusion_sites() == std::vector<std::string>{"first"});
  c.fusion = make_fusion(Strategy::kCfa, 0, 4);
  CHECK(c.fusion_sites() == std::vector<std::string>{"middle0", "middle1"});
  ForecastModel m(c, 2);
  CHECK(m.params().contains("fusion.middle0.down"));
  CHECK(m.params().contains("fusion.middle1.down"));
  CHECK(!(m.params().at("fusion.middle0.down").value == m.params().at("fusion.middle1.down").value));
  c.backbone.layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  ModelConfig d{small(BackboneKind::kDLinear), make_fusion(Strategy::kGating), 5};
  CHECK(d.fusion_sites() == std::vector<std::string>{"middle.seasonal", "middle.trend"});
  CHECK(d.fusion_dim() == 3);
}

TEST_CASE("DLinear cfa bottleneck is floor(C / r)") {
  ModelConfig c{small(BackboneKind::kDLinear, 7), make_fusion(Strategy::kCfa, 0, 2), 5};
  ForecastModel m(c, 3);
  CHECK(m.params().at("fusion.middle.seasonal.down").value.shape() == Shape{3, 7});
  c.fusion.reduction = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("DLinear decomposes x into trend and seasonal") {
  ModelConfig c{small(BackboneKind::kDLinear, 1), FusionSpec{}, 5};
  ForecastModel m(c, 0);
  // With both maps set to the same weights, seasonal + trend recombines to x.
  Rng rng(4);
  const Tensor w = randn(rng, {4, 6}), b = randn(rng, {4});
  for (const char* p : {"backbone.seasonal", "backbone.trend"}) {
    m.params().at(std::string(p) + ".weight").value = w;
    m.params().at(std::string(p) + ".bias").value = b;
  }
  const Tensor x = randn(rng, {1, 6, 1});
  const Tensor y = m.predict(x, Tensor());
  for (std::size_t h = 0; h < 4; ++h) {
    double expect = 2 * b[h];
    for (std::size_t t = 0; t < 6; ++t) expect += w.at(h, t) * x[t];
    CHECK(y[h] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("parameter and flop closed forms equal enumeration") {
  Rng rng(5);
  for (auto kind : {BackboneKind::kMlp, BackboneKind::kDLinear}) {
    for (bool center : {false, true}) {
      for (const auto& spec : every_spec(2)) {
        auto b = small(kind);
        b.center = center;
        ModelConfig c{b, spec, 5};
        ForecastModel m(c, 6);
        const auto card = count_flops(c, 3);
        CHECK_MESSAGE(card.parameters == m.params().element_count(), c.canonical());
        CHECK(card.fusion_parameters == m.params().element_count_with_prefix("fusion."));
        CHECK(card.text_parameters ==
              m.params().element_count_with_prefix("text.mlp") + m.params().element_count_with_prefix("text.proj"));
        Graph g;
        BoundParams bound(g, m.params(), false);
        Var text = spec.strategy == Strategy::kNone ? Var{} : g.constant(randn(rng, {3, 6, 5}));
        auto fwd = m.build(g, bound, g.constant(randn(rng, {3, 6, 3})), text);
        CHECK_MESSAGE(g.flop_count(fwd.yhat) == card.flops, c.canonical());
        CHECK(count_params(c).parameters == card.parameters);
      }
    }
  }
}

TEST_CASE("MLP parameter closed form") {
  const auto b = small(BackboneKind::kMlp);
  const std::size_t C = 3, D = 8, N = 2, L = 6, H = 4;
  CHECK(count_params({b, FusionSpec{}, 5}).parameters == C * D + D + N * (D * D + 3 * D) + L * D * H * C + H * C);
  CHECK(count_params({small(BackboneKind::kDLinear), FusionSpec{}, 5}).parameters == 2 * (L * H + H));
}

TEST_CASE("inert fusion reproduces the unimodal forecast") {
  Rng rng(7);
  for (auto kind : {BackboneKind::kMlp, BackboneKind::kDLinear}) {
    const auto b = small(kind);
    ForecastModel base({b, FusionSpec{}, 5}, 11);
    const Tensor x = randn(rng, {2, 6, 3}), text = randn(rng, {2, 6, 5});
    const Tensor y0 = base.predict(x, Tensor());
    for (auto s : {make_fusion(Strategy::kCfa, 0, 2), make_fusion(Strategy::kFilm),
                   make_fusion(Strategy::kConcat, kMiddle), make_fusion(Strategy::kConcat, kFirst | kLast)}) {
      ForecastModel fused({b, s, 5}, 11);
      CHECK_MESSAGE(max_abs_diff(fused.predict(x, text), y0) < 1e-9, s.label());
    }
  }
}

TEST_CASE("centering adds the window level back") {
  auto b = small(BackboneKind::kDLinear, 1);
  b.center = true;
  ForecastModel m({b, FusionSpec{}, 5}, 0);
  Rng rng(8);
  const Tensor x = randn(rng, {1, 6, 1});
  Tensor shifted = x;
  for (double& v : shifted.data()) v += 100.0;
  const Tensor y = m.predict(x, Tensor()), ys = m.predict(shifted, Tensor());
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(ys[i] - y[i] == doctest::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("checkpoint round trip") {
  const auto path = fs::temp_directory_path() / ("tsfuse_ckpt_" + std::to_string(::getpid()) + ".bin");
  ModelConfig c{small(BackboneKind::kMlp), make_fusion(Strategy::kCfa, 0, 4), 5};
  ForecastModel m(c, 9);
  Rng rng(9);
  for (auto& p : m.params().items())
    for (double& v : p.value.data()) v += rng.normal();
  save_checkpoint(path.string(), m);
  const auto loaded = load_checkpoint(path.string(), c);
  CHECK(loaded.params() == m.params());
  ModelConfig other = c;
  other.fusion.reduction = 2;
  CHECK_THROWS_AS(load_checkpoint(path.string(), other), ConfigError);
  std::ofstream(path, std::ios::trunc) << "garbage";
  CHECK_THROWS(load_checkpoint(path.string(), c));
  fs::remove(path);
}

TEST_CASE("config digest separates configs") {
  ModelConfig a{small(BackboneKind::kMlp), make_fusion(Strategy::kCfa, 0, 4), 5};
  ModelConfig b = a;
  CHECK(a.digest() == b.digest());
  b.backbone.center = true;
  CHECK(a.digest() != b.digest());
  b = a;
  b.fusion.gate_init = GateInit::kInert;
  CHECK(a.canonical() == b.canonical());  // only matters for gating
}
