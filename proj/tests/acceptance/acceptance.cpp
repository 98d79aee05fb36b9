// Acceptance checks. One [PASS]/[FAIL] line per criterion.
#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <unistd.h>

#include "tsfuse/analysis.hpp"
#include "tsfuse/error.hpp"
#include "tsfuse/experiment.hpp"
#include "tsfuse/linalg.hpp"

using namespace tsfuse;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor randn(Rng& rng, Shape s, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tsfuse_accept_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// 1
Outcome identity_at_init() {
  Rng rng(101);
  double worst = 0.0;
  std::size_t checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    BackboneConfig b;
    b.kind = trial % 2 ? BackboneKind::kDLinear : BackboneKind::kMlp;
    b.lookback = 4 + rng.below(9);
    b.horizon = 1 + rng.below(6);
    b.channels = 1 + rng.below(3);
    b.hidden = std::size_t{4} << rng.below(3);
    b.layers = 1 + rng.below(3);
    b.kernel = 3 + 2 * rng.below(2);
    b.center = rng.below(2) == 1;
    const std::size_t text_dim = 4 + rng.below(5);
    const std::uint64_t seed = rng.next();
    ModelConfig base{b, FusionSpec{}, text_dim};
    const std::size_t dim = base.fusion_dim();

    auto gating = make_fusion(Strategy::kGating);
    gating.gate_init = GateInit::kInert;
    const std::uint8_t pos = static_cast<std::uint8_t>(1 + rng.below(7));
    std::vector<FusionSpec> specs{make_fusion(Strategy::kCfa, 0, 1 + rng.below(std::min<std::size_t>(dim, 4))),
                                  make_fusion(Strategy::kFilm), gating, make_fusion(Strategy::kConcat, pos)};

    const std::size_t batch = 3;
    const Tensor x = randn(rng, {batch, b.lookback, b.channels});
    const Tensor text = randn(rng, {batch, b.lookback, text_dim});
    const Tensor y0 = ForecastModel(base, seed).predict(x, Tensor());
    for (const auto& s : specs) {
      ModelConfig c{b, s, text_dim};
      try {
        c.validate();
      } catch (const ConfigError&) {
        continue;
      }
      worst = std::max(worst, max_abs_diff(ForecastModel(c, seed).predict(x, text), y0));
      ++checked;
    }
  }
  return {worst < 1e-9 && checked >= 60,
          std::to_string(checked) + " (config, strategy) pairs over 20 configs, max |dev| " + fmt("%.3g", worst)};
}

// 2
Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = gradient_suite(10, 1e-4);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t bad = 0;
  double worst = 0.0;
  for (const auto& r : results) {
    bad += !r.passed;
    worst = std::max(worst, r.error);
  }
  return {bad == 0 && secs < 120.0 && !results.empty(),
          std::to_string(results.size()) + " checks, " + std::to_string(bad) + " over 1e-4, worst " +
              fmt("%.3g", worst) + ", " + fmt("%.1f", secs) + " s"};
}

// 3
Outcome rank_bound() {
  Rng rng(103);
  std::size_t cases = 0;
  double worst = 0.0;
  for (std::size_t D : {4, 8, 16, 64})
    for (std::size_t r : {2, 4, 8, 16, 32}) {
      if (D / r < 1) continue;
      ParameterSet p;
      add_fusion_site(p, "s", make_fusion(Strategy::kCfa, 0, r), D, rng);
      auto& up = p.at("fusion.s.up").value;
      const std::size_t k = up.dim(1);
      if (k != D / r) return {false, "bottleneck width " + std::to_string(k) + " for D=" + std::to_string(D)};
      up = randn(rng, up.shape());
      const auto sv = singular_values(matmul(up, p.at("fusion.s.down").value));
      for (std::size_t i = k; i < sv.size(); ++i) worst = std::max(worst, sv[i] / sv[0]);
      ++cases;
    }
  return {worst < 1e-8, std::to_string(cases) + " (D, r) pairs, max trailing sigma/sigma_max " + fmt("%.3g", worst)};
}

// 4
Outcome orthogonality() {
  Rng rng(104);
  double worst = 0.0;
  std::size_t pairs = 0;
  for (std::size_t D : {2, 8, 32, 128}) {
    const std::size_t n = 2500;
    Tensor z({n, D}), t({n, D});
    for (std::size_t i = 0; i < n; ++i) {
      const double scale = std::pow(10.0, rng.uniform(-3, 3));
      // a quarter of the pairs are nearly parallel
      const double tilt = i % 4 == 0 ? std::pow(10.0, rng.uniform(-9, -3)) : 1.0;
      const double a = rng.normal();
      for (std::size_t j = 0; j < D; ++j) {
        z.at(i, j) = scale * rng.normal();
        t.at(i, j) = i % 4 == 0 ? a * z.at(i, j) + tilt * scale * rng.normal() : rng.normal();
      }
    }
    Graph g;
    auto parts = fuse_orthogonal(g, g.constant(z), g.constant(t));
    g.forward(parts.perp);
    const Tensor& perp = g.value(parts.perp);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0, nz = 0, np = 0;
      for (std::size_t j = 0; j < D; ++j) {
        dot += z.at(i, j) * perp.at(i, j);
        nz += z.at(i, j) * z.at(i, j);
        np += perp.at(i, j) * perp.at(i, j);
      }
      const double bound = std::sqrt(nz) * std::sqrt(np);
      const double ratio = bound > 0 ? std::abs(dot) / bound : (dot == 0 ? 0.0 : INFINITY);
      worst = std::max(worst, ratio);
      ++pairs;
    }
  }
  return {worst <= 1e-10, std::to_string(pairs) + " pairs, max |<z,perp>|/(|z||perp|) " + fmt("%.3g", worst)};
}

// 5, 6
struct ToyStudy {
  std::vector<PerTypeSummary> per_type;
  std::map<std::string, std::pair<double, std::size_t>> groups;  // mean, n
  std::optional<double> welch_t;
  double seconds = 0.0;
};

ToyStudy run_toy_study() {
  auto cfg = ExperimentConfig::toy_study(5);
  cfg.workers = std::max(1u, std::thread::hardware_concurrency());
  const auto t0 = std::chrono::steady_clock::now();
  const auto out = execute_experiment(cfg);
  ToyStudy s;
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const FusionSpec cfa = make_fusion(Strategy::kCfa, 0, 8);
  s.per_type = summarize_per_type(out.per_type, cfa.label());
  for (const auto& setting : out.diagnostics["settings"])
    for (const auto& c : setting.value("contribution_summary", nlohmann::json::array())) {
      if (c["fusion"] != cfa.label()) continue;
      for (const auto& [type, g] : c["groups"].items())
        s.groups[type] = {g["mean"].get<double>(), g["n"].get<std::size_t>()};
      if (c.contains("matching_vs_contradicting")) s.welch_t = c["matching_vs_contradicting"]["welch_t"].get<double>();
    }
  return s;
}

Outcome bottleneck_effect(const ToyStudy& s) {
  bool a = s.per_type.size() >= 3, b = false;
  std::string detail;
  double matching = NAN, contradicting = NAN;
  for (const auto& r : s.per_type) {
    if (r.text_type == "real") continue;
    a = a && r.with_bottleneck < r.without_bottleneck;
    detail += r.text_type + " " + fmt("%.5f", r.without_bottleneck) + "->" + fmt("%.5f", r.with_bottleneck) + "; ";
    if (r.text_type == "matching") matching = r.with_bottleneck;
    if (r.text_type == "contradicting") contradicting = r.with_bottleneck;
  }
  b = matching <= contradicting;
  detail += std::string("(a) ") + (a ? "holds" : "fails") + ", (b) matching " + (b ? "<=" : ">") +
            " contradicting; " + fmt("%.0f", s.seconds) + " s";
  return {a && b, detail};
}

Outcome contribution_ordering(const ToyStudy& s) {
  const auto m = s.groups.find("matching"), c = s.groups.find("contradicting");
  if (m == s.groups.end() || c == s.groups.end() || !s.welch_t) return {false, "no contribution samples"};
  const bool pass = m->second.first > c->second.first && *s.welch_t > 2.0;
  return {pass, "mean rho matching " + fmt("%.4f", m->second.first) + " (n=" + std::to_string(m->second.second) +
                    ") vs contradicting " + fmt("%.4f", c->second.first) + " (n=" +
                    std::to_string(c->second.second) + "), Welch t " + fmt("%.3f", *s.welch_t)};
}

// 7
Outcome efficiency() {
  BackboneConfig b;
  b.hidden = 64;
  b.lookback = 8;
  b.horizon = 8;
  const std::size_t text_dim = 32;
  bool exact = true;
  for (auto kind : {BackboneKind::kMlp, BackboneKind::kDLinear}) {
    b.kind = kind;
    b.channels = kind == BackboneKind::kMlp ? 1 : 16;
    std::vector<FusionSpec> specs{FusionSpec{}};
    for (const auto& s : all_fusion_strategies(8)) specs.push_back(s);
    for (const auto& s : specs) {
      ModelConfig c{b, s, text_dim};
      const ForecastModel m(c, 1);
      const auto card = count_params(c);
      exact = exact && card.parameters == m.params().element_count() &&
              card.fusion_parameters == m.params().element_count_with_prefix("fusion.");
    }
  }
  b.kind = BackboneKind::kMlp;
  b.channels = 1;
  const auto pct = [&](const FusionSpec& s) {
    const double base = static_cast<double>(count_params({b, FusionSpec{}, text_dim}).parameters);
    const auto card = count_params({b, s, text_dim});
    return 100.0 * static_cast<double>(card.parameters - card.text_parameters) / base - 100.0;
  };
  const double additive = pct(make_fusion(Strategy::kAdditive, kMiddle));
  const double cfa = pct(make_fusion(Strategy::kCfa, 0, 8));
  const double gating = pct(make_fusion(Strategy::kGating));
  const double concat = pct(make_fusion(Strategy::kConcat, kMiddle));
  const bool ordered = additive == 0.0 && cfa < gating && cfa < concat;
  return {exact && ordered, std::string("closed form ") + (exact ? "==" : "!=") + " enumeration; fusion overhead " +
                                "additive " + fmt("%.2f", additive) + "%, cfa " + fmt("%.2f", cfa) + "%, gating " +
                                fmt("%.2f", gating) + "%, concat@middle " + fmt("%.2f", concat) + "%"};
}

// 8: brute-force references
double ref_mse(const std::vector<double>& a, const std::vector<double>& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (long double)(a[i] - b[i]) * (a[i] - b[i]);
  return static_cast<double>(s / a.size());
}

double ref_mae(const std::vector<double>& a, const std::vector<double>& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs((long double)a[i] - b[i]);
  return static_cast<double>(s / a.size());
}

double ref_win_rate(const std::vector<double>& m, const std::vector<double>& b) {
  int wins = 0;
  for (std::size_t i = 0; i < m.size(); ++i) wins += m[i] < b[i] ? 1 : 0;
  return std::round(1000.0 * wins / static_cast<double>(m.size())) / 10.0;
}

std::vector<double> ref_normalized(const std::vector<std::vector<double>>& t) {
  std::vector<double> avg(t.size(), 0.0);
  int used = 0;
  for (std::size_t s = 0; s < t[0].size(); ++s) {
    std::vector<double> col;
    for (const auto& row : t) col.push_back(row[s]);
    const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
    if (*hi == *lo) continue;
    ++used;
    for (std::size_t m = 0; m < t.size(); ++m) avg[m] += (col[m] - *lo) / (*hi - *lo);
  }
  for (double& v : avg) v /= used;
  return avg;
}

double ref_effective_rank(const Tensor& m) {
  Eigen::MatrixXd e(m.dim(0), m.dim(1));
  for (std::size_t i = 0; i < m.dim(0); ++i)
    for (std::size_t j = 0; j < m.dim(1); ++j) e(i, j) = m.at(i, j);
  const Eigen::VectorXd sv = Eigen::BDCSVD<Eigen::MatrixXd>(e).singularValues();
  const double total = sv.sum();
  double h = 0;
  for (long i = 0; i < sv.size(); ++i)
    if (sv(i) > 1e-12 * sv(0)) h -= sv(i) / total * std::log(sv(i) / total);
  return std::exp(h);
}

Outcome metric_oracles() {
  Rng rng(108);
  double worst = 0.0;
  bool wr_exact = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    Tensor p = randn(rng, {n}), y = randn(rng, {n});
    const std::vector<double> pv(p.data().begin(), p.data().end()), yv(y.data().begin(), y.data().end());
    const auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
    worst = std::max({worst, rel(mse(p, y), ref_mse(pv, yv)), rel(mae(p, y), ref_mae(pv, yv))});

    const std::size_t settings = 1 + rng.below(12);
    std::vector<double> m(settings), b(settings);
    for (std::size_t i = 0; i < settings; ++i) {
      b[i] = rng.uniform();
      m[i] = rng.below(4) == 0 ? b[i] : rng.uniform();
    }
    wr_exact = wr_exact && win_rate(m, b) == ref_win_rate(m, b);

    const std::size_t methods = 2 + rng.below(4);
    std::vector<std::vector<double>> table(methods, std::vector<double>(settings));
    for (auto& row : table)
      for (double& v : row) v = rng.uniform(0.1, 2.0);
    const auto got = normalized_mse(table).average, want = ref_normalized(table);
    for (std::size_t i = 0; i < methods; ++i) worst = std::max(worst, rel(got[i], want[i]));

    const std::size_t r = 1 + rng.below(8), c = 1 + rng.below(8);
    const Tensor h = randn(rng, {r, c});
    worst = std::max(worst, rel(effective_rank(h), ref_effective_rank(h)));
  }
  std::vector<double> base(9, 1.0), method(9, 0.5);
  method[4] = 2.0;
  const double eight_of_nine = win_rate(method, base);
  return {worst <= 1e-12 && wr_exact && eight_of_nine == 88.9,
          "100 instances, max rel err " + fmt("%.3g", worst) + ", win_rate exact " + (wr_exact ? "yes" : "no") +
              ", 8-of-9 gives " + fmt("%.1f", eight_of_nine)};
}

// 9
Outcome attribution_conservation() {
  Rng rng(109);
  std::size_t windows = 0, zero_windows = 0;
  bool ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    BackboneConfig b;
    b.kind = trial % 2 ? BackboneKind::kDLinear : BackboneKind::kMlp;
    b.lookback = 4 + rng.below(9);
    b.horizon = 1 + rng.below(4);
    b.channels = 1 + rng.below(3);
    b.hidden = 8;
    b.kernel = 3;
    const auto specs = all_fusion_strategies(2);
    const FusionSpec spec = trial % 3 == 0 ? FusionSpec{} : specs[rng.below(specs.size())];
    ModelConfig c{b, spec, 4};
    try {
      c.validate();
    } catch (const ConfigError&) {
      c.fusion = FusionSpec{};
    }
    const ForecastModel model(c, rng.next());
    WindowBatch batch;
    const std::size_t n = 4;
    batch.x = randn(rng, {n, b.lookback, b.channels}, std::pow(10.0, rng.uniform(-4, 1)));
    batch.y = randn(rng, {n, b.horizon, b.channels});
    batch.text = randn(rng, {n, b.lookback, 4});
    for (std::size_t t = 0; t < b.lookback; ++t)
      for (std::size_t ch = 0; ch < b.channels; ++ch) batch.x.at(0, t, ch) = 0.0;
    const auto attr = temporal_attribution(model, batch);
    for (std::size_t w = 0; w < attr.size(); ++w) {
      double raw = 0, norm = 0;
      for (double v : attr[w].raw) raw += v;
      for (double v : attr[w].normalized) norm += v;
      ok = ok && norm >= 0.0 && norm <= 1.0;
      if (raw > 1e-6) ok = ok && norm > 0.999;
      if (w == 0) {
        ++zero_windows;
        for (double v : attr[w].raw) ok = ok && v == 0.0;
        ok = ok && norm == 0.0;
      }
      ++windows;
    }
  }
  return {ok, std::to_string(windows) + " windows (" + std::to_string(zero_windows) + " all-zero)"};
}

// 10
Outcome determinism() {
  const auto dir = scratch("determinism");
  auto cfg = ExperimentConfig::toy_study(2);
  cfg.train.max_epochs = 3;
  cfg.train.patience = 2;
  cfg.output_dir = (dir / "a").string();
  run_experiment(cfg);
  cfg.output_dir = (dir / "b").string();
  cfg.workers = 2;
  run_experiment(cfg);
  const auto a = read_file((dir / "a" / "results.csv").string());
  const auto b = read_file((dir / "b" / "results.csv").string());
  fs::remove_all(dir);
  return {a == b && !a.empty(), std::to_string(a.size()) + " bytes, " + (a == b ? "identical" : "different")};
}

}  // namespace

int main() {
  int failed = 0;
  const auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };
  report(1, "identity at init", identity_at_init);
  report(2, "gradient suite", gradient_checks);
  report(3, "rank bound", rank_bound);
  report(4, "orthogonality", orthogonality);
  std::optional<ToyStudy> toy;
  std::string toy_error;
  try {
    toy = run_toy_study();
  } catch (const std::exception& e) {
    toy_error = e.what();
  }
  report(5, "toy bottleneck effect", [&]() -> Outcome {
    if (!toy) return {false, "toy study failed: " + toy_error};
    return bottleneck_effect(*toy);
  });
  report(6, "toy contribution ratio", [&]() -> Outcome {
    if (!toy) return {false, "toy study failed: " + toy_error};
    return contribution_ordering(*toy);
  });
  report(7, "efficiency ordering", efficiency);
  report(8, "metric oracles", metric_oracles);
  report(9, "attribution conservation", attribution_conservation);
  report(10, "determinism", determinism);
  std::printf("%d of 10 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
