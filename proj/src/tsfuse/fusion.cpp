#include "tsfuse/fusion.hpp"

#include <cmath>

#include "tsfuse/error.hpp"

namespace tsfuse {

namespace {

constexpr Strategy kStrategies[] = {Strategy::kNone,   Strategy::kAdditive,   Strategy::kConcat, Strategy::kGating,
                                    Strategy::kFilm, Strategy::kOrthogonal, Strategy::kCfa};

void require_same_shape(const Graph& g, Var a, Var b, const char* op) {
  if (g.shape(a) != g.shape(b))
    throw ShapeError(std::string(op) + ": z_ts " + shape_string(g.shape(a)) + " and z_text " +
                     shape_string(g.shape(b)) + " differ");
}

Tensor identity_left(std::size_t dim) {
  Tensor w({dim, 2 * dim});
  for (std::size_t i = 0; i < dim; ++i) w.at(i, i) = 1.0;
  return w;
}

std::string prefix(const std::string& site) { return "fusion." + site + "."; }

}  // namespace

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kNone: return "none";
    case Strategy::kAdditive: return "additive";
    case Strategy::kConcat: return "concat";
    case Strategy::kGating: return "gating";
    case Strategy::kFilm: return "film";
    case Strategy::kOrthogonal: return "orthogonal";
    case Strategy::kCfa: return "cfa";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  for (auto s : kStrategies)
    if (name == strategy_name(s)) return s;
  throw ConfigError("unknown fusion strategy '" + std::string(name) +
                    "' (expected none, additive, concat, gating, film, orthogonal or cfa)");
}

std::string positions_string(std::uint8_t positions) {
  std::string out;
  const std::pair<Position, const char*> names[] = {{kFirst, "first"}, {kMiddle, "middle"}, {kLast, "last"}};
  for (auto [bit, name] : names)
    if (positions & bit) {
      if (!out.empty()) out += '+';
      out += name;
    }
  return out;
}

std::uint8_t parse_positions(std::string_view text) {
  std::uint8_t out = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find_first_of("+,", start), text.size());
    const std::string_view part = text.substr(start, end - start);
    if (part == "first") out |= kFirst;
    else if (part == "middle") out |= kMiddle;
    else if (part == "last") out |= kLast;
    else throw ConfigError("unknown fusion position '" + std::string(part) + "' (expected first, middle or last)");
    start = end + 1;
  }
  return out;
}

bool FusionSpec::constrained() const {
  return strategy == Strategy::kGating || strategy == Strategy::kFilm || strategy == Strategy::kOrthogonal ||
         strategy == Strategy::kCfa;
}

std::uint8_t FusionSpec::effective_positions() const {
  if (strategy == Strategy::kNone) return 0;
  return constrained() ? static_cast<std::uint8_t>(kMiddle) : positions;
}

std::string FusionSpec::label() const {
  switch (strategy) {
    case Strategy::kNone: return "none";
    case Strategy::kAdditive:
    case Strategy::kConcat: return std::string(strategy_name(strategy)) + "@" + positions_string(positions);
    case Strategy::kCfa: return "cfa(r=" + std::to_string(reduction) + ")";
    default: return strategy_name(strategy);
  }
}

void FusionSpec::validate() const {
  if (positions & ~(kFirst | kMiddle | kLast)) throw ConfigError("invalid fusion position bits");
  if ((strategy == Strategy::kAdditive || strategy == Strategy::kConcat) && positions == 0)
    throw ConfigError(std::string(strategy_name(strategy)) + " fusion needs at least one position");
  if (reduction == 0) throw ConfigError("reduction ratio must be >= 1");
}

FusionSpec FusionSpec::parse(std::string_view label) {
  FusionSpec spec;
  const auto at = label.find('@');
  const auto paren = label.find('(');
  spec.strategy = parse_strategy(label.substr(0, std::min(at, paren)));
  if (at != std::string_view::npos) spec.positions = parse_positions(label.substr(at + 1));
  if (paren != std::string_view::npos) {
    const std::string_view inner = label.substr(paren + 1);
    if (!inner.starts_with("r=") || !inner.ends_with(")"))
      throw ConfigError("malformed fusion label '" + std::string(label) + "'");
    const std::string digits(inner.substr(2, inner.size() - 3));
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("malformed reduction ratio in '" + std::string(label) + "'");
    spec.reduction = std::stoul(digits);
  }
  spec.validate();
  return spec;
}

FusionSpec make_fusion(Strategy strategy, std::uint8_t positions, std::size_t reduction) {
  FusionSpec spec;
  spec.strategy = strategy;
  spec.positions = positions;
  spec.reduction = reduction;
  return spec;
}

std::vector<FusionSpec> all_fusion_strategies(std::size_t reduction) {
  std::vector<FusionSpec> out;
  for (auto s : {Strategy::kAdditive, Strategy::kConcat})
    for (auto p : {kFirst, kMiddle, kLast}) out.push_back(make_fusion(s, p));
  for (auto s : {Strategy::kGating, Strategy::kFilm, Strategy::kOrthogonal}) out.push_back(make_fusion(s));
  out.push_back(make_fusion(Strategy::kCfa, 0, reduction));
  return out;
}

std::size_t cfa_bottleneck(std::size_t dim, std::size_t reduction) {
  if (reduction == 0) throw ConfigError("reduction ratio must be >= 1");
  const std::size_t k = dim / reduction;
  if (k == 0)
    throw ConfigError("cfa bottleneck floor(" + std::to_string(dim) + "/" + std::to_string(reduction) +
                      ") is 0; lower the reduction ratio");
  return k;
}

void add_fusion_site(ParameterSet& params, const std::string& site, const FusionSpec& spec, std::size_t dim,
                     Rng& rng) {
  const std::string p = prefix(site);
  const auto g = ParamGroup::kBackbone;
  switch (spec.strategy) {
    case Strategy::kNone:
    case Strategy::kAdditive:
    case Strategy::kOrthogonal:
      return;
    case Strategy::kConcat:
      params.add(p + "weight", g, identity_left(dim));
      params.add(p + "bias", g, Tensor({dim}));
      return;
    case Strategy::kGating:
      if (spec.gate_init == GateInit::kInert) {
        params.add(p + "weight", g, Tensor({dim, 2 * dim}));
        params.add(p + "bias", g, Tensor({dim}, -40.0));
      } else {
        const double bound = std::sqrt(6.0 / static_cast<double>(3 * dim));
        params.add(p + "weight", g, uniform_tensor({dim, 2 * dim}, bound, rng));
        params.add(p + "bias", g, Tensor({dim}));
      }
      return;
    case Strategy::kFilm:
      params.add(p + "gamma.weight", g, Tensor({dim, dim}));
      params.add(p + "gamma.bias", g, Tensor({dim}, 1.0));
      params.add(p + "beta.weight", g, Tensor({dim, dim}));
      params.add(p + "beta.bias", g, Tensor({dim}));
      return;
    case Strategy::kCfa: {
      const std::size_t k = cfa_bottleneck(dim, spec.reduction);
      const double bound = std::sqrt(6.0 / static_cast<double>(dim + k));
      params.add(p + "down", g, uniform_tensor({k, dim}, bound, rng));
      params.add(p + "up", g, Tensor({dim, k}));
      params.add(p + "norm.weight", g, Tensor({k}, 1.0));
      params.add(p + "norm.bias", g, Tensor({k}));
      return;
    }
  }
}

std::size_t fusion_site_param_count(const FusionSpec& spec, std::size_t d) {
  switch (spec.strategy) {
    case Strategy::kNone:
    case Strategy::kAdditive:
    case Strategy::kOrthogonal: return 0;
    case Strategy::kConcat:
    case Strategy::kGating: return 2 * d * d + d;
    case Strategy::kFilm: return 2 * (d * d + d);
    case Strategy::kCfa: {
      const std::size_t k = cfa_bottleneck(d, spec.reduction);
      return 2 * k * d + 2 * k;
    }
  }
  return 0;
}

std::uint64_t fusion_site_flops(const FusionSpec& spec, std::size_t rows, std::size_t dim) {
  const std::uint64_t n = rows;
  const std::uint64_t d = dim;
  switch (spec.strategy) {
    case Strategy::kNone: return 0;
    case Strategy::kAdditive: return n * d;
    case Strategy::kConcat: return 4 * n * d * d + n * d;
    case Strategy::kGating: return 4 * n * d * d + 7 * n * d;
    case Strategy::kFilm: return 4 * n * d * d + 4 * n * d;
    case Strategy::kOrthogonal: return 11 * n * d + 2 * n;
    case Strategy::kCfa: {
      const std::uint64_t k = cfa_bottleneck(dim, spec.reduction);
      return 4 * n * d * k + 9 * n * k + n * d;
    }
  }
  return 0;
}

Var fuse_additive(Graph& g, Var z_ts, Var z_text) {
  require_same_shape(g, z_ts, z_text, "fuse_additive");
  return g.add(z_ts, z_text);
}

Var fuse_concat(Graph& g, Var z_ts, Var z_text, Var weight, Var bias) {
  require_same_shape(g, z_ts, z_text, "fuse_concat");
  return linear(g, g.concat(z_ts, z_text), weight, bias);
}

Var fuse_gating(Graph& g, Var z_ts, Var z_text, Var weight, Var bias, Var* gate) {
  require_same_shape(g, z_ts, z_text, "fuse_gating");
  Var gv = g.sigmoid(linear(g, g.concat(z_ts, z_text), weight, bias));
  if (gate) *gate = gv;
  return g.add(z_ts, g.mul(gv, z_text));
}

Var fuse_film(Graph& g, Var z_ts, Var z_text, Var gamma_weight, Var gamma_bias, Var beta_weight, Var beta_bias) {
  require_same_shape(g, z_ts, z_text, "fuse_film");
  Var gamma = linear(g, z_text, gamma_weight, gamma_bias);
  Var beta = linear(g, z_text, beta_weight, beta_bias);
  return g.add(g.mul(gamma, z_ts), beta);
}

OrthogonalParts fuse_orthogonal(Graph& g, Var z_ts, Var z_text) {
  require_same_shape(g, z_ts, z_text, "fuse_orthogonal");
  const std::size_t axis = g.shape(z_ts).size() - 1;
  Var sqnorm = g.sum(g.square(z_ts), axis);
  auto remove_component = [&](Var v) {
    Var coef = g.div(g.sum(g.mul(z_ts, v), axis), sqnorm, kDegenerateNorm);
    return g.sub(v, g.mul(coef, z_ts));
  };
  // The second pass removes the rounding residue of the first; in exact
  // arithmetic its coefficient is zero.
  Var perp = remove_component(remove_component(z_text));
  return {g.add(z_ts, perp), perp, sqnorm};
}

CfaParts fuse_cfa(Graph& g, Var z_ts, Var z_text, Var w_down, Var w_up, Var gamma, Var beta) {
  require_same_shape(g, z_ts, z_text, "fuse_cfa");
  Var hidden = g.relu(g.layernorm(linear(g, z_text, w_down), gamma, beta));
  Var out = linear(g, hidden, w_up);
  return {g.add(z_ts, out), out};
}

Var fuse(Graph& g, const BoundParams& params, const std::string& site, const FusionSpec& spec, Var z_ts,
         Var z_text, SiteTrace* trace) {
  const std::string p = prefix(site);
  if (trace) *trace = SiteTrace{site, {}, {}, {}};
  switch (spec.strategy) {
    case Strategy::kNone: return z_ts;
    case Strategy::kAdditive: return fuse_additive(g, z_ts, z_text);
    case Strategy::kConcat: return fuse_concat(g, z_ts, z_text, params[p + "weight"], params[p + "bias"]);
    case Strategy::kGating:
      return fuse_gating(g, z_ts, z_text, params[p + "weight"], params[p + "bias"], trace ? &trace->gate : nullptr);
    case Strategy::kFilm:
      return fuse_film(g, z_ts, z_text, params[p + "gamma.weight"], params[p + "gamma.bias"],
                       params[p + "beta.weight"], params[p + "beta.bias"]);
    case Strategy::kOrthogonal: {
      auto parts = fuse_orthogonal(g, z_ts, z_text);
      if (trace) trace->sqnorm = parts.sqnorm;
      return parts.fused;
    }
    case Strategy::kCfa: {
      auto parts = fuse_cfa(g, z_ts, z_text, params[p + "down"], params[p + "up"], params[p + "norm.weight"],
                            params[p + "norm.bias"]);
      if (trace) trace->adapter_output = parts.output;
      return parts.fused;
    }
  }
  return z_ts;
}

std::size_t degenerate_count(const Graph& g, Var sqnorm) {
  std::size_t n = 0;
  for (double v : g.value(sqnorm).data())
    if (v < kDegenerateNorm) ++n;
  return n;
}

}  // namespace tsfuse
