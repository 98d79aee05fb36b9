#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <cmath>

#include "tsfuse/analysis.hpp"
#include "tsfuse/error.hpp"
#include "tsfuse/linalg.hpp"

using namespace tsfuse;

namespace {

Tensor randn(Rng& rng, Shape s) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m(i, j) = t.at(i, j);
  return m;
}

Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) t.at(i, j) = m(i, j);
  return t;
}

Eigen::MatrixXd random_orthogonal(Rng& rng, int n) {
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
  return Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
}

}  // namespace

TEST_CASE("mse and mae") {
  const Tensor y = Tensor::vector({1, 0});
  CHECK(mse(y, y) == 0.0);
  CHECK(mae(y, y) == 0.0);
  CHECK(mse(Tensor::vector({2, 1}), y) == 1.0);
  CHECK(mae(Tensor::vector({2, 1}), y) == 1.0);
  CHECK(mse(Tensor::vector({0, 2}), y) == 2.5);
  CHECK(mae(Tensor::vector({0, 2}), y) == 1.5);
  CHECK_THROWS_AS(mse(Tensor::vector({1}), y), ShapeError);
}

TEST_CASE("per-horizon metrics average to the total") {
  Rng rng(1);
  const Tensor p = randn(rng, {4, 3, 2}), t = randn(rng, {4, 3, 2});
  const auto r = metric_report(p, t);
  double s = 0;
  for (double v : r.per_horizon_mse) s += v / 3.0;
  CHECK(s == doctest::Approx(r.mse).epsilon(1e-14));
}

TEST_CASE("win rate") {
  const std::vector<double> base(9, 1.0);
  std::vector<double> m(9, 0.5);
  m[4] = 2.0;
  CHECK(win_rate(m, base) == 88.9);
  CHECK(win_rate(base, base) == 0.0);
  CHECK(win_rate(std::vector<double>(9, 0.1), base) == 100.0);
  CHECK_THROWS_AS(win_rate(std::vector<double>(8, 0.1), base), DataError);
}

TEST_CASE("normalized mse") {
  auto r = normalized_mse({{1}, {3}});
  CHECK(r.average == std::vector<double>{0, 1});
  r = normalized_mse({{2}, {3}, {4}});
  CHECK(r.average == std::vector<double>{0, 0.5, 1});
  r = normalized_mse({{1, 5, 2}, {2, 6, 9}, {3, 7, 3}});
  CHECK(r.average[0] == 0.0);
  r = normalized_mse({{1, 5}, {1, 6}});
  CHECK(r.excluded_settings == std::vector<std::size_t>{0});
  CHECK(r.average == std::vector<double>{0, 1});
  CHECK_THROWS_AS(normalized_mse({{1}, {1}}), DataError);
}

TEST_CASE("representation similarity") {
  Rng rng(2);
  const std::vector<Tensor> a{randn(rng, {3, 4}), randn(rng, {2, 4})};
  CHECK(representation_similarity(a, a).value == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<Tensor> neg = a, scaled = a;
  for (auto& t : neg)
    for (double& v : t.data()) v = -v;
  for (auto& t : scaled)
    for (double& v : t.data()) v *= 3.7;
  CHECK(representation_similarity(a, neg).value == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(representation_similarity(scaled, a).value == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<Tensor> x{Tensor::vector({1, 0})}, y{Tensor::vector({1, 1})};
  CHECK(representation_similarity(x, y).value == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  const std::vector<Tensor> z{Tensor::vector({0, 0})};
  const auto s = representation_similarity(x, z);
  CHECK(s.value == 0.0);
  CHECK(s.zero_norm_layers == std::vector<std::size_t>{0});
}

TEST_CASE("effective rank examples") {
  CHECK(effective_rank(Tensor::matrix({{1, 2}, {2, 4}, {3, 6}})) == doctest::Approx(1.0).epsilon(1e-12));
  Rng rng(3);
  CHECK(effective_rank(from_eigen(random_orthogonal(rng, 3))) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(effective_rank_from_singular_values({3, 1}) == doctest::Approx(1.7547653).epsilon(1e-7));
  CHECK(effective_rank(Tensor::matrix({{3, 0}, {0, 1}})) == doctest::Approx(1.7547653).epsilon(1e-7));
  CHECK_THROWS_AS(effective_rank(Tensor({3, 3})), NumericError);
}

TEST_CASE("singular values match Eigen") {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.below(7), c = 1 + rng.below(7);
    const Tensor m = randn(rng, {r, c});
    const auto ours = singular_values(m);
    const Eigen::VectorXd ref = Eigen::JacobiSVD<Eigen::MatrixXd>(to_eigen(m)).singularValues();
    REQUIRE(static_cast<long>(ours.size()) >= ref.size());
    for (long i = 0; i < ref.size(); ++i) CHECK(ours[i] == doctest::Approx(ref(i)).epsilon(1e-10));
  }
}

TEST_CASE("effective rank is invariant under orthogonal transforms") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd h = to_eigen(randn(rng, {6, 4}));
    const Eigen::MatrixXd rotated = random_orthogonal(rng, 6) * h * random_orthogonal(rng, 4);
    CHECK(std::abs(effective_rank(from_eigen(h)) - effective_rank(from_eigen(rotated))) < 1e-8);
    const double e = effective_rank(from_eigen(h));
    CHECK(e >= 1.0);
    CHECK(e <= 4.0 + 1e-12);
  }
}

TEST_CASE("attribution from a linear last-step model") {
  // yhat = w * x_L, loss = (yhat - y)^2
  const double w = 1.5, y = 0.25;
  Tensor x({4, 1}, std::vector<double>{0.3, -0.7, 1.1, 0.8});
  Graph g;
  Var xv = g.leaf(x);
  Var last = g.slice(xv, 0, 3, 4);
  Var loss = g.sum(g.square(g.sub(g.mul(last, g.constant(Tensor::scalar(w))), g.constant(Tensor::scalar(y)))));
  g.forward(loss);
  g.backward(loss);
  const auto a = attribution_from_gradient(g.grad(xv), x);
  for (std::size_t t = 0; t < 3; ++t) CHECK(a.raw[t] == 0.0);
  CHECK(a.raw[3] == doctest::Approx(std::abs(2 * (w * 0.8 - y) * w * 0.8)).epsilon(1e-14));
  CHECK(a.normalized[3] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("attribution normalization and channel symmetry") {
  const auto zero = attribution_from_gradient(Tensor({3, 2}, 1.0), Tensor({3, 2}));
  for (double v : zero.raw) CHECK(v == 0.0);
  for (double v : zero.normalized) CHECK(v == 0.0);
  Rng rng(6);
  const Tensor grad = randn(rng, {5, 3}), in = randn(rng, {5, 3});
  Tensor pg({5, 3}), pi({5, 3});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) {
      pg.at(t, c) = grad.at(t, (c + 1) % 3);
      pi.at(t, c) = in.at(t, (c + 1) % 3);
    }
  const auto a = attribution_from_gradient(grad, in), b = attribution_from_gradient(pg, pi);
  double total = 0;
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(a.raw[t] == doctest::Approx(b.raw[t]).epsilon(1e-15));
    total += a.normalized[t];
  }
  CHECK(total <= 1.0);
  CHECK(total > 0.999);
}

TEST_CASE("temporal attribution of a model") {
  ModelConfig c;
  c.backbone.kind = BackboneKind::kDLinear;
  c.backbone.lookback = 6;
  c.backbone.horizon = 3;
  c.backbone.kernel = 3;
  c.text_dim = 4;
  ForecastModel m(c, 1);
  Rng rng(7);
  WindowBatch b;
  b.x = randn(rng, {3, 6, 1});
  b.y = randn(rng, {3, 3, 1});
  b.text = Tensor({3, 6, 4});
  for (std::size_t t = 0; t < 6; ++t) b.x.at(1, t, 0) = 0.0;
  const auto attr = temporal_attribution(m, b);
  REQUIRE(attr.size() == 3);
  for (double v : attr[1].normalized) CHECK(v == 0.0);
  double s = 0;
  for (double v : attr[0].normalized) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("text contribution ratio") {
  const std::vector<double> e{3, 4};
  CHECK(text_contribution_ratio(std::vector<double>{0, 0}, e) == 0.0);
  CHECK(text_contribution_ratio(e, e) == 1.0);
  CHECK_THROWS_AS(text_contribution_ratio(e, std::vector<double>{0, 0}), DataError);

  ModelConfig c;
  c.backbone.hidden = 8;
  c.text_dim = 4;
  c.fusion = make_fusion(Strategy::kCfa, 0, 4);
  ForecastModel m(c, 2);
  Rng rng(8);
  WindowBatch b;
  b.x = randn(rng, {3, 8, 1});
  b.y = randn(rng, {3, 8, 1});
  b.text = randn(rng, {3, 8, 4});
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t k = 0; k < 4; ++k) b.text.at(2, t, k) = 0.0;
  b.labels = {TextType::kMatching, TextType::kContradicting, TextType::kIrrelevant};
  const auto rep = contribution_ratios(m, b);
  CHECK(rep.skipped == 1);
  REQUIRE(rep.samples.size() == 2);
  for (const auto& s : rep.samples) CHECK(s.ratio == 0.0);  // W_up starts at zero
  c.fusion = FusionSpec{};
  CHECK_THROWS_AS(contribution_ratios(ForecastModel(c, 2), b), ConfigError);
}

TEST_CASE("group statistics") {
  const std::vector<double> a{1, 2, 3, 4}, b{2, 4, 6};
  const auto s = group_stats(a);
  CHECK(s.mean == 2.5);
  CHECK(s.stddev == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-15));
  const auto cmp = compare_groups(a, b);
  // var_a = 5/3, var_b = 4
  CHECK(cmp.welch_t == doctest::Approx((2.5 - 4) / std::sqrt(5.0 / 12.0 + 4.0 / 3.0)).epsilon(1e-14));
  CHECK(cmp.cohens_d == doctest::Approx((2.5 - 4) / std::sqrt((3 * 5.0 / 3.0 + 2 * 4.0) / 5.0)).epsilon(1e-14));
}

TEST_CASE("efficiency report ordering") {
  BackboneConfig b;
  b.hidden = 64;
  const std::vector<FusionSpec> specs{FusionSpec{}, make_fusion(Strategy::kAdditive, kMiddle),
                                      make_fusion(Strategy::kConcat, kMiddle), make_fusion(Strategy::kGating),
                                      make_fusion(Strategy::kCfa, 0, 8)};
  const auto rows = efficiency_report(b, 32, specs);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].fusion == "none");
  CHECK(rows[1].param_overhead_pct == 0.0);
  CHECK(rows[1].flop_overhead_pct == 0.0);
  CHECK(rows[3].parameters > rows[2].parameters);
  CHECK(rows[2].fusion_parameters == 0);
  CHECK(rows[5].param_overhead_pct < rows[4].param_overhead_pct);
  CHECK(rows[5].param_overhead_pct < rows[3].param_overhead_pct);
}
