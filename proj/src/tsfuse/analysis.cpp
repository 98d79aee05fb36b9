#include "tsfuse/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tsfuse/error.hpp"
#include "tsfuse/linalg.hpp"

namespace tsfuse {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
  if (a.empty()) throw ShapeError(std::string(op) + ": empty input");
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double mse(const Tensor& p, const Tensor& t) {
  require_same(p, t, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - t[i]) * (p[i] - t[i]);
  return s / static_cast<double>(p.size());
}

double mae(const Tensor& p, const Tensor& t) {
  require_same(p, t, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - t[i]);
  return s / static_cast<double>(p.size());
}

MetricReport metric_report(const Tensor& p, const Tensor& t) {
  MetricReport r;
  r.mse = mse(p, t);
  r.mae = mae(p, t);
  if (p.rank() != 3) return r;
  const std::size_t B = p.dim(0), H = p.dim(1), C = p.dim(2);
  r.per_horizon_mse.assign(H, 0.0);
  r.per_horizon_mae.assign(H, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t c = 0; c < C; ++c) {
        const double d = p.at(b, h, c) - t.at(b, h, c);
        r.per_horizon_mse[h] += d * d;
        r.per_horizon_mae[h] += std::abs(d);
      }
  for (std::size_t h = 0; h < H; ++h) {
    r.per_horizon_mse[h] /= static_cast<double>(B * C);
    r.per_horizon_mae[h] /= static_cast<double>(B * C);
  }
  return r;
}

double win_rate(std::span<const double> method, std::span<const double> baseline) {
  if (method.size() != baseline.size())
    throw DataError("win_rate: " + std::to_string(method.size()) + " method values vs " +
                    std::to_string(baseline.size()) + " baseline values");
  if (method.empty()) throw DataError("win_rate: no settings");
  std::size_t wins = 0;
  for (std::size_t i = 0; i < method.size(); ++i)
    if (method[i] < baseline[i]) ++wins;
  const double pct = 100.0 * static_cast<double>(wins) / static_cast<double>(method.size());
  return std::round(pct * 10.0) / 10.0;
}

NormalizedMse normalized_mse(const std::vector<std::vector<double>>& table) {
  if (table.size() < 2) throw DataError("normalized_mse needs at least two methods");
  const std::size_t settings = table[0].size();
  for (const auto& row : table)
    if (row.size() != settings) throw DataError("normalized_mse: ragged table");
  NormalizedMse out;
  out.average.assign(table.size(), 0.0);
  std::size_t used = 0;
  for (std::size_t s = 0; s < settings; ++s) {
    double lo = table[0][s], hi = table[0][s];
    for (const auto& row : table) {
      lo = std::min(lo, row[s]);
      hi = std::max(hi, row[s]);
    }
    if (!(hi > lo)) {
      out.excluded_settings.push_back(s);
      out.warnings.push_back("setting " + std::to_string(s) + " has identical values across methods; excluded");
      continue;
    }
    ++used;
    for (std::size_t m = 0; m < table.size(); ++m) out.average[m] += (table[m][s] - lo) / (hi - lo);
  }
  if (used == 0) throw DataError("normalized_mse: every setting is constant across methods");
  for (double& v : out.average) v /= static_cast<double>(used);
  return out;
}

Similarity representation_similarity(std::span<const Tensor> a, std::span<const Tensor> b) {
  if (a.size() != b.size() || a.empty())
    throw ShapeError("representation_similarity: layer counts " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  Similarity s;
  for (std::size_t l = 0; l < a.size(); ++l) {
    require_same(a[l], b[l], "representation_similarity");
    const double na = norm2(a[l].data()), nb = norm2(b[l].data());
    double cos = 0.0;
    if (na == 0.0 || nb == 0.0) {
      s.zero_norm_layers.push_back(l);
    } else {
      double dot = 0.0;
      for (std::size_t i = 0; i < a[l].size(); ++i) dot += a[l][i] * b[l][i];
      cos = std::clamp(dot / (na * nb), -1.0, 1.0);
    }
    s.per_layer.push_back(cos);
    s.value += cos;
  }
  s.value /= static_cast<double>(a.size());
  return s;
}

double effective_rank_from_singular_values(std::vector<double> sigma) {
  double top = 0.0;
  for (double v : sigma) top = std::max(top, std::abs(v));
  if (top == 0.0) throw NumericError("effective_rank of an all-zero matrix is undefined");
  double total = 0.0;
  for (double v : sigma)
    if (std::abs(v) >= 1e-12 * top) total += std::abs(v);
  double entropy = 0.0;
  for (double v : sigma) {
    if (std::abs(v) < 1e-12 * top) continue;
    const double p = std::abs(v) / total;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

Tensor as_matrix(const Tensor& t) {
  if (t.rank() < 2) return t.reshaped({1, t.size()});
  return t.reshaped({t.size() / t.shape().back(), t.shape().back()});
}

double effective_rank(const Tensor& matrix) { return effective_rank_from_singular_values(singular_values(as_matrix(matrix))); }

Attribution attribution_from_gradient(const Tensor& gradient, const Tensor& input, double eps) {
  if (gradient.shape() != input.shape() || input.rank() != 2)
    throw ShapeError("attribution expects matching [L, C] gradient and input");
  if (!gradient.all_finite()) throw NumericError("attribution: non-finite gradient");
  const std::size_t L = input.dim(0), C = input.dim(1);
  Attribution a;
  a.raw.assign(L, 0.0);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < C; ++c) a.raw[t] += std::abs(gradient.at(t, c) * input.at(t, c));
  const double total = std::accumulate(a.raw.begin(), a.raw.end(), 0.0);
  for (double v : a.raw) a.normalized.push_back(v / (total + eps));
  return a;
}

std::vector<Attribution> temporal_attribution(const ForecastModel& model, const WindowBatch& batch, double eps) {
  const bool fused = model.config().fusion.strategy != Strategy::kNone;
  Graph g;
  BoundParams bound(g, model.params(), false);
  Var x = g.leaf(batch.x, true);
  Var text = fused ? g.constant(batch.text) : Var{};
  Var yhat = model.build(g, bound, x, text).yhat;
  // Summing per-window MSEs keeps each window's gradient equal to that of its own loss.
  const double per_window = static_cast<double>(batch.horizon() * batch.channels());
  Var loss = g.mul(g.sum(g.square(g.sub(yhat, g.constant(batch.y)))), g.constant(Tensor::scalar(1.0 / per_window)));
  g.forward(loss);
  g.backward(loss);
  const Tensor& grad = g.grad(x);
  const std::size_t L = batch.lookback(), C = batch.channels();
  std::vector<Attribution> out;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto slice = [&](const Tensor& t) {
      std::vector<double> v(t.data().begin() + static_cast<long>(b * L * C),
                            t.data().begin() + static_cast<long>((b + 1) * L * C));
      return Tensor::unchecked({L, C}, std::move(v));
    };
    out.push_back(attribution_from_gradient(slice(grad), slice(batch.x), eps));
  }
  return out;
}

double text_contribution_ratio(std::span<const double> o, std::span<const double> e) {
  const double ne = norm2(e);
  if (!(ne > 0)) throw DataError("text_contribution_ratio: zero pooled embedding");
  return norm2(o) / ne;
}

ContributionReport contribution_ratios(const ForecastModel& model, const WindowBatch& batch,
                                       const std::string& site) {
  if (model.config().fusion.strategy != Strategy::kCfa)
    throw ConfigError("contribution ratios need a cfa model, got " + model.config().fusion.label());
  Graph g;
  BoundParams bound(g, model.params(), false);
  auto fwd = model.build(g, bound, g.constant(batch.x), g.constant(batch.text));
  Var output;
  for (const auto& s : fwd.sites)
    if (s.site == site) output = s.adapter_output;
  if (!output.valid()) throw ConfigError("model has no fusion site '" + site + "'");
  Var pooled_o = g.mean(output, 1);
  const Tensor& o = g.forward(pooled_o);
  const std::size_t B = batch.size(), L = batch.lookback(), Dt = batch.text.dim(2), D = o.dim(2);
  ContributionReport report;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> e(Dt, 0.0);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t k = 0; k < Dt; ++k) e[k] += batch.text.at(b, t, k) / static_cast<double>(L);
    if (norm2(e) == 0.0) {
      ++report.skipped;
      continue;
    }
    const std::span<const double> ob(o.data().data() + b * D, D);
    report.samples.push_back({b, batch.labels.empty() ? TextType::kReal : batch.labels[b],
                              text_contribution_ratio(ob, e)});
  }
  return report;
}

GroupStats group_stats(std::span<const double> v) {
  GroupStats s;
  s.n = v.size();
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

GroupComparison compare_groups(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("group comparison needs at least two samples per group");
  GroupComparison c{group_stats(a), group_stats(b), 0.0, 0.0};
  const double va = c.a.stddev * c.a.stddev, vb = c.b.stddev * c.b.stddev;
  const double na = static_cast<double>(c.a.n), nb = static_cast<double>(c.b.n);
  const double se = std::sqrt(va / na + vb / nb);
  const double diff = c.a.mean - c.b.mean;
  c.welch_t = se > 0 ? diff / se : 0.0;
  const double pooled = std::sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2));
  c.cohens_d = pooled > 0 ? diff / pooled : 0.0;
  return c;
}

std::vector<EfficiencyRow> efficiency_report(const BackboneConfig& backbone, std::size_t text_dim,
                                             std::span<const FusionSpec> specs) {
  ModelConfig base{backbone, FusionSpec{}, text_dim};
  const auto ref = count_flops(base);
  std::vector<EfficiencyRow> rows;
  rows.push_back({"none", ref.parameters, 0, ref.flops, 0.0, 0.0});
  for (const auto& spec : specs) {
    ModelConfig c{backbone, spec, text_dim};
    const auto card = count_flops(c);
    EfficiencyRow r;
    r.fusion = spec.label();
    r.parameters = card.parameters;
    r.fusion_parameters = card.fusion_parameters;
    r.flops = card.flops;
    r.param_overhead_pct =
        100.0 * (static_cast<double>(card.parameters) - static_cast<double>(ref.parameters)) /
        static_cast<double>(ref.parameters);
    r.flop_overhead_pct =
        100.0 * (static_cast<double>(card.flops) - static_cast<double>(ref.flops)) / static_cast<double>(ref.flops);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace tsfuse
