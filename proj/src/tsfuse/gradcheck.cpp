#include <cmath>
#include <functional>

#include "tsfuse/experiment.hpp"
#include "tsfuse/rng.hpp"

namespace tsfuse {

namespace {

constexpr double kStep = 1e-6;

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

// Contracts the output with fixed random weights so every element matters.
Var scalar_loss(Graph& g, Var out, Rng& rng) {
  return g.sum(g.mul(out, g.constant(random_tensor(rng, g.shape(out)))));
}

double check_all(Graph& g, Var root, std::span<const Var> leaves) {
  double worst = 0.0;
  for (Var v : leaves) worst = std::max(worst, check_gradients(g, root, v, kStep));
  return worst;
}

using Case = std::function<double(Rng&)>;

// Builds a graph from fresh random leaves of the given shapes and checks them all.
Case op_case(std::vector<Shape> shapes, std::function<Var(Graph&, std::vector<Var>&)> build) {
  return [shapes, build](Rng& rng) {
    Graph g;
    std::vector<Var> leaves;
    for (const auto& s : shapes) leaves.push_back(g.leaf(random_tensor(rng, s)));
    Var out = build(g, leaves);
    Var loss = scalar_loss(g, out, rng);
    return check_all(g, loss, leaves);
  };
}

void randomize(ParameterSet& params, Rng& rng) {
  for (auto& p : params.items()) {
    const bool norm_gain = p.name.ends_with("norm.weight");
    for (double& v : p.value.data()) v = norm_gain ? 1.0 + rng.normal(0.0, 0.1) : rng.normal(0.0, 0.5);
  }
}

Case model_case(ModelConfig config) {
  return [config](Rng& rng) {
    ForecastModel model(config, rng.next());
    randomize(model.params(), rng);
    const std::size_t B = 2, L = config.backbone.lookback, C = config.backbone.channels;
    Graph g;
    BoundParams bound(g, model.params(), true);
    Var x = g.leaf(random_tensor(rng, {B, L, C}));
    const bool fused = config.fusion.strategy != Strategy::kNone;
    Var text = fused ? g.leaf(random_tensor(rng, {B, L, config.text_dim})) : Var{};
    Var yhat = model.build(g, bound, x, text).yhat;
    Var y = g.constant(random_tensor(rng, g.shape(yhat)));
    Var loss = g.mean(g.square(g.sub(yhat, y)));
    std::vector<Var> leaves{x};
    if (fused) leaves.push_back(text);
    for (const auto& p : model.params().items()) leaves.push_back(bound[p.name]);
    return check_all(g, loss, leaves);
  };
}

std::vector<std::pair<std::string, Case>> cases() {
  std::vector<std::pair<std::string, Case>> out;
  const std::size_t N = 3, D = 6, k = 3;
  auto add = [&](std::string name, Case c) { out.emplace_back(std::move(name), std::move(c)); };

  add("op.matmul", op_case({{2, 3, 4}, {4, 5}}, [](Graph& g, auto& v) { return g.matmul(v[0], v[1]); }));
  add("op.add", op_case({{2, 3, 4}, {4}}, [](Graph& g, auto& v) { return g.add(v[0], v[1]); }));
  add("op.sub", op_case({{3, 4}, {3, 1}}, [](Graph& g, auto& v) { return g.sub(v[0], v[1]); }));
  add("op.mul", op_case({{2, 3, 4}, {1, 3, 4}}, [](Graph& g, auto& v) { return g.mul(v[0], v[1]); }));
  add("op.div", op_case({{3, 4}, {3, 1}}, [](Graph& g, auto& v) {
        return g.div(v[0], g.add(g.square(v[1]), g.constant(Tensor::scalar(0.5))));
      }));
  add("op.relu", op_case({{4, 5}}, [](Graph& g, auto& v) { return g.relu(v[0]); }));
  add("op.sigmoid", op_case({{4, 5}}, [](Graph& g, auto& v) { return g.sigmoid(v[0]); }));
  add("op.layernorm", op_case({{2, 3, 5}, {5}, {5}}, [](Graph& g, auto& v) { return g.layernorm(v[0], v[1], v[2]); }));
  add("op.concat", op_case({{2, 3}, {2, 4}}, [](Graph& g, auto& v) { return g.concat(v[0], v[1]); }));
  add("op.slice", op_case({{2, 5, 3}}, [](Graph& g, auto& v) { return g.slice(v[0], 1, 1, 4); }));
  add("op.sum_axis", op_case({{2, 5, 3}}, [](Graph& g, auto& v) { return g.sum(v[0], 1); }));
  add("op.mean_axis", op_case({{2, 5, 3}}, [](Graph& g, auto& v) { return g.mean(v[0], 2); }));
  add("op.square", op_case({{4, 5}}, [](Graph& g, auto& v) { return g.square(v[0]); }));
  add("op.moving_average", op_case({{2, 7, 3}}, [](Graph& g, auto& v) { return g.moving_average(v[0], 5); }));
  add("op.transpose", op_case({{2, 3, 4}}, [](Graph& g, auto& v) { return g.transpose(v[0]); }));
  add("op.reshape", op_case({{2, 3, 4}}, [](Graph& g, auto& v) { return g.reshape(v[0], {6, 4}); }));

  add("fusion.additive", op_case({{N, D}, {N, D}}, [](Graph& g, auto& v) { return fuse_additive(g, v[0], v[1]); }));
  add("fusion.concat", op_case({{N, D}, {N, D}, {D, 2 * D}, {D}},
                               [](Graph& g, auto& v) { return fuse_concat(g, v[0], v[1], v[2], v[3]); }));
  add("fusion.gating", op_case({{N, D}, {N, D}, {D, 2 * D}, {D}},
                               [](Graph& g, auto& v) { return fuse_gating(g, v[0], v[1], v[2], v[3]); }));
  add("fusion.film", op_case({{N, D}, {N, D}, {D, D}, {D}, {D, D}, {D}}, [](Graph& g, auto& v) {
        return fuse_film(g, v[0], v[1], v[2], v[3], v[4], v[5]);
      }));
  add("fusion.orthogonal",
      op_case({{N, D}, {N, D}}, [](Graph& g, auto& v) { return fuse_orthogonal(g, v[0], v[1]).fused; }));
  add("fusion.cfa", op_case({{N, D}, {N, D}, {k, D}, {D, k}, {k}, {k}}, [](Graph& g, auto& v) {
        return fuse_cfa(g, v[0], v[1], v[2], v[3], v[4], v[5]).fused;
      }));

  add("text.pipeline", [](Rng& rng) {
    ParameterSet params;
    add_text_pipeline(params, {5, 6}, rng);
    randomize(params, rng);
    Graph g;
    BoundParams bound(g, params, true);
    Var raw = g.leaf(random_tensor(rng, {2, 4, 5}));
    Var loss = scalar_loss(g, project_text(g, bound, raw), rng);
    std::vector<Var> leaves{raw};
    for (const auto& p : params.items()) leaves.push_back(bound[p.name]);
    return check_all(g, loss, leaves);
  });

  for (auto kind : {BackboneKind::kMlp, BackboneKind::kDLinear}) {
    BackboneConfig b;
    b.kind = kind;
    b.lookback = 4;
    b.horizon = 3;
    b.channels = 2;
    b.hidden = D;
    b.layers = 2;
    b.kernel = 3;
    std::vector<FusionSpec> specs{FusionSpec{}};
    for (const auto& s : all_fusion_strategies(2)) specs.push_back(s);
    for (const auto& s : specs) {
      ModelConfig mc{b, s, 5};
      add(std::string(backbone_name(kind)) + "." + s.label(), model_case(mc));
    }
    b.center = true;
    add(std::string(backbone_name(kind)) + ".cfa(r=2).center", model_case({b, make_fusion(Strategy::kCfa, 0, 2), 5}));
  }
  return out;
}

}  // namespace

std::vector<GradcheckResult> gradient_suite(std::size_t seeds, double tolerance) {
  std::vector<GradcheckResult> results;
  for (const auto& [name, run] : cases())
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      Rng rng(seed, "gradcheck." + name);
      const double err = run(rng);
      results.push_back({name, seed, err, err <= tolerance});
    }
  return results;
}

}  // namespace tsfuse
