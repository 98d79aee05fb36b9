#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "tsfuse/error.hpp"
#include "tsfuse/fusion.hpp"
#include "tsfuse/linalg.hpp"

using namespace tsfuse;

namespace {

Tensor randn(Rng& rng, Shape s, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

Tensor row(std::initializer_list<double> v) { return Tensor({1, v.size()}, std::vector<double>(v)); }

Tensor eye(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace

TEST_CASE("labels round-trip") {
  for (const auto& s : all_fusion_strategies(8)) CHECK(FusionSpec::parse(s.label()) == s);
  CHECK(all_fusion_strategies(8).size() == 10);
  CHECK(FusionSpec::parse("cfa(r=4)").reduction == 4);
  CHECK(FusionSpec::parse("additive@first+last").positions == (kFirst | kLast));
  CHECK_THROWS_AS(FusionSpec::parse("attention"), ConfigError);
  CHECK_THROWS_AS(FusionSpec::parse("additive"), ConfigError);
  CHECK_THROWS_AS(FusionSpec::parse("cfa(r=0)"), ConfigError);
  CHECK(make_fusion(Strategy::kGating, kFirst).effective_positions() == kMiddle);
}

TEST_CASE("additive") {
  Graph g;
  CHECK(g.forward(fuse_additive(g, g.constant(row({1, 2})), g.constant(row({0, 0})))) == row({1, 2}));
  CHECK(g.forward(fuse_additive(g, g.constant(row({1, 2})), g.constant(row({-1, -2})))) == row({0, 0}));
  CHECK_THROWS_AS(fuse_additive(g, g.constant(row({1, 2})), g.constant(row({1, 2, 3}))), ShapeError);
}

TEST_CASE("additive batched equals per-row") {
  Rng rng(1);
  const Tensor a = randn(rng, {3, 4}), b = randn(rng, {3, 4});
  Graph g;
  const Tensor batched = g.forward(fuse_additive(g, g.constant(a), g.constant(b)));
  for (std::size_t i = 0; i < 3; ++i) {
    Graph h;
    Var r = fuse_additive(h, h.slice(h.constant(a), 0, i, i + 1), h.slice(h.constant(b), 0, i, i + 1));
    const Tensor& v = h.forward(r);
    for (std::size_t j = 0; j < 4; ++j) CHECK(v[j] == batched.at(i, j));
  }
}

TEST_CASE("concat projection") {
  Rng rng(2);
  const Tensor zts = randn(rng, {3, 4}), ztext = randn(rng, {3, 4});
  Tensor left({4, 8}), both({4, 8});
  for (std::size_t i = 0; i < 4; ++i) {
    left.at(i, i) = 1;
    both.at(i, i) = 1;
    both.at(i, i + 4) = 1;
  }
  Graph g;
  Var a = g.constant(zts), b = g.constant(ztext), bias = g.constant(Tensor({4}));
  CHECK(g.forward(fuse_concat(g, a, b, g.constant(left), bias)) == zts);
  CHECK(max_abs_diff(g.forward(fuse_concat(g, a, b, g.constant(both), bias)),
                     g.forward(fuse_additive(g, a, b))) < 1e-15);
}

TEST_CASE("gating") {
  Rng rng(3);
  const Tensor zts = randn(rng, {2, 3}), ztext = randn(rng, {2, 3});
  Graph g;
  Var a = g.constant(zts), b = g.constant(ztext);
  Var gate;
  Var half = fuse_gating(g, a, b, g.constant(Tensor({3, 6})), g.constant(Tensor({3})), &gate);
  const Tensor& hv = g.forward(half);
  for (std::size_t i = 0; i < zts.size(); ++i) CHECK(hv[i] == doctest::Approx(zts[i] + 0.5 * ztext[i]));
  for (double v : g.forward(gate).data()) CHECK(v == 0.5);

  Var closed = fuse_gating(g, a, b, g.constant(Tensor({3, 6})), g.constant(Tensor({3}, -100.0)));
  CHECK(max_abs_diff(g.forward(closed), zts) < 1e-40);

  Var zero_text = fuse_gating(g, a, g.constant(Tensor({2, 3})), g.constant(randn(rng, {3, 6})),
                              g.constant(randn(rng, {3})));
  CHECK(g.forward(zero_text) == zts);

  Var open;
  fuse_gating(g, a, b, g.constant(randn(rng, {3, 6}, 3.0)), g.constant(randn(rng, {3})), &open);
  for (double v : g.forward(open).data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("film") {
  Rng rng(4);
  const Tensor zts = randn(rng, {2, 3}), ztext = randn(rng, {2, 3});
  Graph g;
  Var a = g.constant(zts), b = g.constant(ztext);
  Var identity = fuse_film(g, a, b, g.constant(Tensor({3, 3})), g.constant(Tensor({3}, 1.0)),
                           g.constant(Tensor({3, 3})), g.constant(Tensor({3})));
  CHECK(g.forward(identity) == zts);
  Var beta_only = fuse_film(g, a, b, g.constant(Tensor({3, 3})), g.constant(Tensor({3})), g.constant(eye(3)),
                            g.constant(Tensor({3})));
  CHECK(g.forward(beta_only) == ztext);

  Graph h;
  Var gw = h.leaf(randn(rng, {3, 3})), gb = h.leaf(randn(rng, {3})), bw = h.leaf(randn(rng, {3, 3})),
      bb = h.leaf(randn(rng, {3}));
  Var loss = h.sum(h.square(fuse_film(h, h.constant(zts), h.constant(ztext), gw, gb, bw, bb)));
  for (Var v : {gw, gb, bw, bb}) CHECK(check_gradients(h, loss, v, 1e-6) < 1e-4);
}

TEST_CASE("orthogonal projection examples") {
  auto run = [](Tensor zts, Tensor ztext) {
    Graph g;
    auto parts = fuse_orthogonal(g, g.constant(zts), g.constant(ztext));
    return std::pair{g.forward(parts.fused), g.forward(parts.perp)};
  };
  CHECK(run(row({1, 0}), row({0, 2})).first == row({1, 2}));
  auto [f2, p2] = run(row({1, 0}), row({3, 0}));
  CHECK(p2 == row({0, 0}));
  CHECK(f2 == row({1, 0}));
  auto [f3, p3] = run(row({1, 1}), row({2, 0}));
  CHECK(max_abs_diff(p3, row({1, -1})) < 1e-15);
  CHECK(max_abs_diff(f3, row({2, 0})) < 1e-15);
}

TEST_CASE("orthogonal degenerate rows keep the text") {
  Graph g;
  auto parts = fuse_orthogonal(g, g.constant(Tensor({2, 2}, std::vector<double>{0, 0, 1, 0})),
                               g.constant(Tensor({2, 2}, std::vector<double>{3, 4, 5, 6})));
  CHECK(g.forward(parts.fused) == Tensor({2, 2}, std::vector<double>{3, 4, 1, 6}));
  CHECK(degenerate_count(g, parts.sqnorm) == 1);
}

TEST_CASE("orthogonality holds on random and near-parallel pairs") {
  Rng rng(5);
  const std::size_t n = 500, d = 8;
  Tensor zts = randn(rng, {n, d}), ztext = randn(rng, {n, d});
  for (std::size_t i = 0; i < n / 2; ++i)
    for (std::size_t j = 0; j < d; ++j) ztext.at(i, j) = 3.0 * zts.at(i, j) + 1e-9 * rng.normal();
  Graph g;
  auto parts = fuse_orthogonal(g, g.constant(zts), g.constant(ztext));
  const Tensor& perp = g.forward(parts.perp);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += zts.at(i, j) * perp.at(i, j);
      na += zts.at(i, j) * zts.at(i, j);
      nb += perp.at(i, j) * perp.at(i, j);
    }
    CHECK(std::abs(dot) <= 1e-10 * std::sqrt(na) * std::sqrt(nb) + 1e-300);
  }
}

TEST_CASE("cfa identity and degenerate bottleneck") {
  Rng rng(6);
  const Tensor zts = randn(rng, {3, 4}), ztext = randn(rng, {3, 4});
  Graph g;
  Var a = g.constant(zts), b = g.constant(ztext);
  auto zero_up = fuse_cfa(g, a, b, g.constant(randn(rng, {2, 4})), g.constant(Tensor({4, 2})),
                          g.constant(Tensor({2}, 1.0)), g.constant(Tensor({2})));
  CHECK(g.forward(zero_up.fused) == zts);
  for (double v : g.forward(zero_up.output).data()) CHECK(v == 0.0);

  auto k1 = fuse_cfa(g, a, b, g.constant(randn(rng, {1, 4})), g.constant(randn(rng, {4, 1})),
                     g.constant(Tensor({1}, 1.0)), g.constant(Tensor({1})));
  CHECK(g.forward(k1.fused) == zts);
}

TEST_CASE("cfa bottleneck sizes") {
  CHECK(cfa_bottleneck(64, 8) == 8);
  CHECK(cfa_bottleneck(7, 2) == 3);
  CHECK(cfa_bottleneck(2, 2) == 1);
  CHECK_THROWS_AS(cfa_bottleneck(4, 8), ConfigError);
}

TEST_CASE("rank of W_up W_down is bounded by D / r") {
  Rng rng(7);
  const Tensor down = randn(rng, {2, 4}), up = randn(rng, {4, 2});
  const auto sv = singular_values(matmul(up, down));
  CHECK(sv.size() == 4);
  CHECK(sv[1] > 1e-6);
  CHECK(sv[2] < 1e-8 * sv[0]);
  CHECK(sv[3] < 1e-8 * sv[0]);
}

TEST_CASE("site parameters: closed form equals enumeration, inert init") {
  Rng rng(8);
  for (std::size_t dim : {4, 8, 64}) {
    for (const auto& spec : all_fusion_strategies(2)) {
      ParameterSet p;
      add_fusion_site(p, "s", spec, dim, rng);
      CHECK(p.element_count() == fusion_site_param_count(spec, dim));
      Graph g;
      BoundParams bound(g, p, false);
      const Tensor zts = randn(rng, {3, dim}), ztext = randn(rng, {3, dim});
      Var out = fuse(g, bound, "s", spec, g.constant(zts), g.constant(ztext));
      const double dev = max_abs_diff(g.forward(out), zts);
      if (spec.strategy == Strategy::kAdditive || spec.strategy == Strategy::kOrthogonal ||
          spec.strategy == Strategy::kGating)
        CHECK(dev > 0.0);
      else
        CHECK(dev == 0.0);
    }
  }
  ParameterSet p;
  FusionSpec inert = make_fusion(Strategy::kGating);
  inert.gate_init = GateInit::kInert;
  add_fusion_site(p, "s", inert, 6, rng);
  Graph g;
  BoundParams bound(g, p, false);
  const Tensor zts = randn(rng, {2, 6});
  CHECK(max_abs_diff(g.forward(fuse(g, bound, "s", inert, g.constant(zts), g.constant(randn(rng, {2, 6})))), zts) <
        1e-15);
}

TEST_CASE("cfa site at D=512, r=8 has 65,664 parameters; gating 524,800") {
  CHECK(fusion_site_param_count(make_fusion(Strategy::kCfa, 0, 8), 512) == 65664);
  CHECK(fusion_site_param_count(make_fusion(Strategy::kGating), 512) == 524800);
  CHECK(fusion_site_param_count(make_fusion(Strategy::kAdditive, kMiddle), 512) == 0);
  CHECK(fusion_site_param_count(make_fusion(Strategy::kOrthogonal), 512) == 0);
}

TEST_CASE("site flops: closed form equals graph count") {
  Rng rng(9);
  for (const auto& spec : all_fusion_strategies(2)) {
    ParameterSet p;
    add_fusion_site(p, "s", spec, 6, rng);
    Graph g;
    BoundParams bound(g, p, false);
    Var zts = g.constant(randn(rng, {5, 6})), ztext = g.constant(randn(rng, {5, 6}));
    Var out = fuse(g, bound, "s", spec, zts, ztext);
    CHECK_MESSAGE(g.flop_count(out) == fusion_site_flops(spec, 5, 6), spec.label());
  }
}
