#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "tsfuse/error.hpp"
#include "tsfuse/experiment.hpp"

namespace fs = std::filesystem;

namespace tsfuse {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

struct Bundle {
  std::string dir;
  nlohmann::json manifest;
  std::vector<ResultRow> rows;
  std::vector<PerTypeRow> per_type;
  nlohmann::json diagnostics;
};

std::vector<PerTypeRow> parse_per_type(const std::string& text, const std::string& where) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "setting,fusion,seed,text_type,windows,mse")
    throw DataError(where + ": unexpected header");
  std::vector<PerTypeRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 6) throw DataError(where + ": expected 6 fields in '" + line + "'");
    try {
      rows.push_back({f[0], f[1], std::stoull(f[2]), f[3], std::stoul(f[4]), std::stod(f[5])});
    } catch (const std::exception&) {
      throw DataError(where + ": malformed number in '" + line + "'");
    }
  }
  return rows;
}

Bundle read_bundle(const std::string& dir) {
  Bundle b;
  b.dir = dir;
  const fs::path p = dir;
  try {
    b.manifest = nlohmann::json::parse(read_file((p / "manifest.json").string()));
    b.diagnostics = nlohmann::json::parse(read_file((p / "diagnostics.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bundle '" + dir + "': malformed JSON: " + e.what());
  }
  b.rows = parse_results_csv(read_file((p / "results.csv").string()));
  if (fs::exists(p / "per_type.csv"))
    b.per_type = parse_per_type(read_file((p / "per_type.csv").string()), dir + "/per_type.csv");
  return b;
}

// Mean test MSE of the selected run per (setting, fusion) over seeds.
struct Cell {
  double mse = 0.0;
  double mae = 0.0;
  double stddev = 0.0;
  std::size_t seeds = 0;
  bool diverged = false;
};

using Grid = std::map<std::string, std::map<std::string, Cell>>;  // fusion -> setting -> cell

Grid selected_grid(const std::vector<ResultRow>& rows) {
  std::map<std::string, std::map<std::string, std::vector<const ResultRow*>>> groups;
  for (const auto& r : rows)
    if (r.selected && !r.failed) groups[r.fusion][r.setting].push_back(&r);
  Grid g;
  for (const auto& [fusion, bys] : groups)
    for (const auto& [setting, v] : bys) {
      Cell c;
      c.seeds = v.size();
      for (const auto* r : v) {
        c.mse += r->mse / static_cast<double>(v.size());
        c.mae += r->mae / static_cast<double>(v.size());
        c.diverged = c.diverged || r->diverged;
      }
      if (v.size() > 1) {
        double ss = 0.0;
        for (const auto* r : v) ss += (r->mse - c.mse) * (r->mse - c.mse);
        c.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
      }
      g[fusion][setting] = c;
    }
  return g;
}

// Fusion labels in first-appearance order with "none" first.
std::vector<std::string> fusion_order(const std::vector<ResultRow>& rows) {
  std::vector<std::string> out{"none"};
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), r.fusion) == out.end()) out.push_back(r.fusion);
  return out;
}

// ---- SVG ----

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

std::string svg_lines(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                      const std::vector<Series>& series, bool log_x) {
  const double W = 640, H = 400, ml = 70, mr = 160, mt = 40, mb = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  auto tx = [&](double v) { return log_x ? std::log10(v) : v; };
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double v) { return ml + (tx(v) - x0) / (x1 - x0) * (W - ml - mr); };
  auto py = [&](double v) { return H - mb - (v - y0) / (y1 - y0) * (H - mt - mb); };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
  o << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = y0 + (y1 - y0) * t / 4.0;
    o << "<text x=\"" << ml - 5 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << short_num(yv)
      << "</text>\n";
    const double xv = x0 + (x1 - x0) * t / 4.0;
    const double xd = log_x ? std::pow(10.0, xv) : xv;
    o << "<text x=\"" << ml + (xv - x0) / (x1 - x0) * (W - ml - mr) << "\" y=\"" << H - mb + 15
      << "\" text-anchor=\"middle\">" << short_num(xd) << "</text>\n";
  }
  o << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << escape(xlabel)
    << "</text>\n";
  o << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15 " << H / 2 << ")\" text-anchor=\"middle\">"
    << escape(ylabel) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % 10];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      pts += short_num(px(s.x[i])) + "," + short_num(py(s.y[i])) + " ";
    }
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"" << pts << "\"/>\n";
    o << "<text x=\"" << W - mr + 10 << "\" y=\"" << mt + 14 * k + 10 << "\" fill=\"" << color << "\">"
      << escape(s.name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_bars(const std::string& title, const std::string& ylabel,
                     const std::vector<std::pair<std::string, double>>& bars) {
  const double W = 640, H = 400, ml = 70, mr = 20, mt = 40, mb = 110;
  double hi = 0.0;
  for (const auto& [_, v] : bars)
    if (std::isfinite(v)) hi = std::max(hi, v);
  if (hi <= 0) hi = 1;
  const double slot = (W - ml - mr) / static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
  o << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\"" << H - mb
    << "\" stroke=\"black\"/>\n";
  o << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15 " << H / 2 << ")\" text-anchor=\"middle\">"
    << escape(ylabel) << "</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double v = std::isfinite(bars[i].second) ? bars[i].second : 0.0;
    const double h = v / hi * (H - mt - mb);
    const double x = ml + slot * static_cast<double>(i) + slot * 0.15;
    o << "<rect x=\"" << x << "\" y=\"" << H - mb - h << "\" width=\"" << slot * 0.7 << "\" height=\"" << h
      << "\" fill=\"" << kPalette[i % 10] << "\"/>\n";
    o << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << H - mb - h - 4 << "\" text-anchor=\"middle\">"
      << short_num(v) << "</text>\n";
    const double lx = x + slot * 0.35, ly = H - mb + 12;
    o << "<text x=\"" << lx << "\" y=\"" << ly << "\" transform=\"rotate(40 " << lx << " " << ly << ")\">"
      << escape(bars[i].first) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace

std::vector<PerTypeSummary> summarize_per_type(const std::vector<PerTypeRow>& rows, const std::string& cfa_label,
                                               const std::string& baseline_label) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> acc;
  for (const auto& r : rows) {
    if (r.fusion == baseline_label) acc[r.text_type].first.push_back(r.mse);
    else if (r.fusion == cfa_label) acc[r.text_type].second.push_back(r.mse);
  }
  std::vector<PerTypeSummary> out;
  for (const char* type : {"matching", "contradicting", "irrelevant", "real"}) {
    auto it = acc.find(type);
    if (it == acc.end() || it->second.first.empty() || it->second.second.empty()) continue;
    PerTypeSummary s;
    s.text_type = type;
    s.without_bottleneck = group_stats(it->second.first).mean;
    s.with_bottleneck = group_stats(it->second.second).mean;
    s.improvement_pct = 100.0 * (s.without_bottleneck - s.with_bottleneck) / s.without_bottleneck;
    out.push_back(s);
  }
  return out;
}

void aggregate_bundles(const std::vector<std::string>& dirs, const std::string& out_dir) {
  if (dirs.empty()) throw ConfigError("aggregate needs at least one bundle");
  std::vector<Bundle> bundles;
  for (const auto& d : dirs) bundles.push_back(read_bundle(d));

  // Compatibility: same metric definition and major tool version; no run may
  // appear in two bundles.
  const auto& ref = bundles[0].manifest;
  std::vector<ResultRow> rows;
  std::vector<PerTypeRow> per_type;
  std::set<std::string> seen;
  for (const auto& b : bundles) {
    if (b.manifest.value("metrics", "") != ref.value("metrics", ""))
      throw DataError("bundle '" + b.dir + "' uses a different metric definition");
    const auto major = [](const std::string& v) { return v.substr(0, v.find('.')); };
    if (major(b.manifest.value("tool_version", "")) != major(ref.value("tool_version", "")))
      throw DataError("bundle '" + b.dir + "' was written by an incompatible tool version");
    for (const auto& r : b.rows) {
      const auto key = r.setting + "|" + r.fusion + "|" + std::to_string(r.seed) + "|" + num(r.multiplier);
      if (!seen.insert(key).second)
        throw DataError("run " + key + " appears in more than one bundle (" + b.dir + ")");
      rows.push_back(r);
    }
    per_type.insert(per_type.end(), b.per_type.begin(), b.per_type.end());
  }

  const auto grid = selected_grid(rows);
  const auto order = fusion_order(rows);
  std::vector<std::string> settings;
  for (const auto& r : rows)
    if (std::find(settings.begin(), settings.end(), r.setting) == settings.end()) settings.push_back(r.setting);
  const fs::path tables = fs::path(out_dir) / "tables";
  auto base_it = grid.find("none");

  std::string cmp = "setting,fusion,mse,mae,mse_std,seeds,vs_unimodal,diverged\n";
  for (const auto& s : settings)
    for (const auto& f : order) {
      auto fit = grid.find(f);
      if (fit == grid.end() || !fit->second.count(s)) continue;
      const auto& c = fit->second.at(s);
      std::string flag = "";
      if (f != "none" && base_it != grid.end() && base_it->second.count(s)) {
        const double b = base_it->second.at(s).mse;
        flag = c.mse < b ? "+" : (c.mse > b ? "-" : "=");
      }
      cmp += s + "," + f + "," + num(c.mse) + "," + num(c.mae) + "," + num(c.stddev) + "," +
             std::to_string(c.seeds) + "," + flag + "," + (c.diverged ? "Div." : "") + "\n";
    }
  write_file_atomic((tables / "comparison.csv").string(), cmp);

  std::string wr = "fusion,settings,win_rate\n";
  if (base_it != grid.end()) {
    for (const auto& f : order) {
      if (f == "none" || !grid.count(f)) continue;
      std::vector<double> m, b;
      for (const auto& s : settings)
        if (grid.at(f).count(s) && base_it->second.count(s)) {
          m.push_back(grid.at(f).at(s).mse);
          b.push_back(base_it->second.at(s).mse);
        }
      if (m.empty()) continue;
      wr += f + "," + std::to_string(m.size()) + "," + pct(win_rate(m, b)) + "\n";
    }
  }
  write_file_atomic((tables / "win_rate.csv").string(), wr);

  // Normalized MSE over settings where every method has a value.
  std::vector<std::string> methods;
  for (const auto& f : order)
    if (grid.count(f)) methods.push_back(f);
  std::vector<std::string> common;
  for (const auto& s : settings)
    if (std::all_of(methods.begin(), methods.end(), [&](const auto& f) { return grid.at(f).count(s) > 0; }))
      common.push_back(s);
  std::string nm = "fusion,normalized_mse,settings\n";
  if (methods.size() >= 2 && !common.empty()) {
    std::vector<std::vector<double>> table;
    for (const auto& f : methods) {
      std::vector<double> row;
      for (const auto& s : common) row.push_back(grid.at(f).at(s).mse);
      table.push_back(row);
    }
    try {
      const auto r = normalized_mse(table);
      for (std::size_t i = 0; i < methods.size(); ++i)
        nm += methods[i] + "," + num(r.average[i]) + "," + std::to_string(common.size() - r.excluded_settings.size()) +
              "\n";
    } catch (const DataError&) {
      // every setting constant across methods: header only
    }
  }
  write_file_atomic((tables / "normalized_mse.csv").string(), nm);

  std::string pt = "cfa,text_type,without_bottleneck,with_bottleneck,improvement_pct\n";
  std::set<std::string> cfa_labels;
  for (const auto& r : per_type)
    if (r.fusion.starts_with("cfa")) cfa_labels.insert(r.fusion);
  for (const auto& label : cfa_labels)
    for (const auto& s : summarize_per_type(per_type, label))
      pt += label + "," + s.text_type + "," + num(s.without_bottleneck) + "," + num(s.with_bottleneck) + "," +
            num(s.improvement_pct) + "\n";
  write_file_atomic((tables / "per_type_mse.csv").string(), pt);

  std::string eff = "setting,fusion,parameters,fusion_parameters,flops,param_overhead_pct,flop_overhead_pct\n";
  std::set<std::string> done;
  for (const auto& b : bundles) {
    if (!b.diagnostics.contains("settings")) continue;
    for (const auto& s : b.diagnostics["settings"]) {
      if (!s.contains("efficiency")) continue;
      for (const auto& e : s["efficiency"]) {
        const auto key = s["setting"].get<std::string>() + "|" + e["fusion"].get<std::string>();
        if (!done.insert(key).second) continue;
        eff += s["setting"].get<std::string>() + "," + e["fusion"].get<std::string>() + "," +
               std::to_string(e["parameters"].get<std::uint64_t>()) + "," +
               std::to_string(e["fusion_parameters"].get<std::uint64_t>()) + "," +
               std::to_string(e["flops"].get<std::uint64_t>()) + "," + num(e["param_overhead_pct"].get<double>()) +
               "," + num(e["flop_overhead_pct"].get<double>()) + "\n";
      }
    }
  }
  write_file_atomic((tables / "efficiency.csv").string(), eff);
}

void write_report(const std::string& bundle_dir) {
  const auto b = read_bundle(bundle_dir);
  const fs::path plots = fs::path(bundle_dir) / "plots";
  const auto grid = selected_grid(b.rows);
  const auto order = fusion_order(b.rows);

  std::vector<std::pair<std::string, double>> bars;
  for (const auto& f : order) {
    auto it = grid.find(f);
    if (it == grid.end()) continue;
    double m = 0.0;
    for (const auto& [_, c] : it->second) m += c.mse / static_cast<double>(it->second.size());
    bars.push_back({f, m});
  }
  write_file_atomic((plots / "mse_by_method.svg").string(),
                    svg_bars("Test MSE by fusion (mean over settings and seeds)", "MSE", bars));

  // Validation MSE against the learning-rate multiplier, mean over settings and seeds.
  std::vector<Series> sweep;
  for (const auto& f : order) {
    std::map<double, std::pair<double, std::size_t>> acc;
    for (const auto& r : b.rows)
      if (r.fusion == f && !r.failed) {
        acc[r.multiplier].first += r.val_mse;
        ++acc[r.multiplier].second;
      }
    if (acc.empty()) continue;
    Series s{f, {}, {}};
    for (const auto& [m, a] : acc) {
      s.x.push_back(m);
      s.y.push_back(a.first / static_cast<double>(a.second));
    }
    sweep.push_back(s);
  }
  write_file_atomic((plots / "sweep.svg").string(),
                    svg_lines("Validation MSE over the learning-rate sweep", "multiplier", "val MSE", sweep, true));

  std::vector<Series> attr;
  std::map<std::string, std::vector<std::pair<std::string, double>>> contrib;
  if (b.diagnostics.contains("settings") && !b.diagnostics["settings"].empty()) {
    const auto& s0 = b.diagnostics["settings"][0];
    std::map<std::string, std::pair<std::vector<double>, std::size_t>> acc;
    for (const auto& r : s0.value("runs", nlohmann::json::array())) {
      if (!r.contains("attribution")) continue;
      const auto v = r["attribution"].get<std::vector<double>>();
      auto& a = acc[r["fusion"].get<std::string>()];
      if (a.first.empty()) a.first.assign(v.size(), 0.0);
      for (std::size_t t = 0; t < v.size() && t < a.first.size(); ++t) a.first[t] += v[t];
      ++a.second;
    }
    for (const auto& f : order) {
      auto it = acc.find(f);
      if (it == acc.end()) continue;
      Series s{f, {}, {}};
      for (std::size_t t = 0; t < it->second.first.size(); ++t) {
        s.x.push_back(static_cast<double>(t));
        s.y.push_back(it->second.first[t] / static_cast<double>(it->second.second));
      }
      attr.push_back(s);
    }
    for (const auto& c : s0.value("contribution_summary", nlohmann::json::array()))
      for (const auto& [type, g] : c["groups"].items())
        contrib[c["fusion"].get<std::string>()].push_back({type, g["mean"].get<double>()});
  }
  write_file_atomic((plots / "attribution.svg").string(),
                    svg_lines("Temporal attribution (first setting)", "lookback step", "share", attr, false));
  std::vector<std::pair<std::string, double>> cbars;
  for (const auto& [label, groups] : contrib)
    for (const auto& [type, v] : groups) cbars.push_back({label + " " + type, v});
  write_file_atomic((plots / "contribution.svg").string(),
                    svg_bars("Text contribution ratio by text type", "ratio", cbars));
}

}  // namespace tsfuse
