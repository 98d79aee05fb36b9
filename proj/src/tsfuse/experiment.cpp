#include "tsfuse/experiment.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "tsfuse/error.hpp"
#include "tsfuse/rng.hpp"

namespace fs = std::filesystem;

namespace tsfuse {

namespace {

constexpr const char* kMetricDefinition = "mse,mae over all horizon steps and channels in normalized space";
constexpr std::size_t kDiagnosticWindows = 256;

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- YAML helpers -------------------------------------------------------

[[noreturn]] void field_error(const std::string& field, const std::string& msg) {
  throw ConfigError("field '" + field + "': " + msg);
}

void allow_keys(const YAML::Node& node, const std::string& where, std::initializer_list<const char*> keys) {
  if (!node.IsMap()) field_error(where, "expected a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
      field_error(where.empty() ? key : where + "." + key, "unknown key");
  }
}

template <typename T>
T scalar(const YAML::Node& node, const std::string& field) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    field_error(field, "cannot parse '" + (node.IsScalar() ? node.Scalar() : std::string("<non-scalar>")) + "'");
  }
}

std::size_t count_field(const YAML::Node& node, const std::string& field, bool allow_zero = false) {
  const auto v = scalar<long long>(node, field);
  if (v < 0 || (!allow_zero && v == 0)) field_error(field, "must be " + std::string(allow_zero ? ">= 0" : "> 0"));
  return static_cast<std::size_t>(v);
}

double positive(const YAML::Node& node, const std::string& field) {
  const auto v = scalar<double>(node, field);
  if (!(v > 0) || !std::isfinite(v)) field_error(field, "must be a positive number");
  return v;
}

std::string resolve(const std::string& base, const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base) / path).lexically_normal().string();
}

ResultRow make_row(const Setting& s, const FusionSpec& f, const RunRecord& r) {
  ResultRow row;
  row.setting = s.name;
  row.fusion = f.label();
  row.strategy = strategy_name(f.strategy);
  row.position = f.strategy == Strategy::kNone ? "" : positions_string(f.effective_positions());
  row.reduction = f.strategy == Strategy::kCfa ? f.reduction : 0;
  row.multiplier = r.multiplier;
  row.seed = r.seed;
  row.failed = r.failed;
  const double nan = std::nan("");
  row.val_mse = r.failed ? nan : r.best_val;
  row.mse = r.failed ? nan : r.test_mse;
  row.mae = r.failed ? nan : r.test_mae;
  return row;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

DatasetRef toy_ref() {
  DatasetRef d;
  d.name = "toy";
  d.toy = true;
  return d;
}

std::string fmt_hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Mean normalized attribution over windows.
std::vector<double> mean_attribution(const std::vector<Attribution>& a) {
  if (a.empty()) return {};
  std::vector<double> out(a[0].normalized.size(), 0.0);
  for (const auto& w : a)
    for (std::size_t t = 0; t < out.size(); ++t) out[t] += w.normalized[t] / static_cast<double>(a.size());
  return out;
}

std::vector<Tensor> hidden_states(const ForecastModel& model, const WindowBatch& batch) {
  Graph g;
  BoundParams bound(g, model.params(), false);
  const bool fused = model.config().fusion.strategy != Strategy::kNone;
  auto fwd = model.build(g, bound, g.constant(batch.x), fused ? g.constant(batch.text) : Var{});
  std::vector<Tensor> out;
  for (Var h : fwd.hidden) out.push_back(g.forward(h));
  return out;
}

WindowBatch head(const WindowBatch& b, std::size_t n) {
  std::vector<std::size_t> idx(std::min(n, b.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return b.select(idx);
}

}  // namespace

// ---- config -------------------------------------------------------------

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const auto dir = fs::path(path).parent_path().string();
  return parse(ss.str(), dir.empty() ? "." : dir);
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& base) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (!root.IsMap()) throw ConfigError("config must be a mapping");
  allow_keys(root, "", {"output", "seed", "repeats", "workers", "datasets", "backbone", "lookback", "horizons",
                        "fusions", "reduction", "train", "split", "stride", "analyses"});
  ExperimentConfig c;
  if (root["output"]) c.output_dir = resolve(base, scalar<std::string>(root["output"], "output"));
  if (root["seed"]) c.seed = scalar<std::uint64_t>(root["seed"], "seed");
  if (root["repeats"]) c.repeats = count_field(root["repeats"], "repeats");
  if (root["workers"]) c.workers = count_field(root["workers"], "workers");
  if (root["stride"]) c.stride = count_field(root["stride"], "stride");
  if (root["lookback"]) c.lookback = count_field(root["lookback"], "lookback");

  const auto datasets = root["datasets"];
  if (!datasets || !datasets.IsSequence() || datasets.size() == 0)
    field_error("datasets", "expected a non-empty list");
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const auto d = datasets[i];
    const std::string where = "datasets[" + std::to_string(i) + "]";
    if (d.IsScalar() && d.Scalar() == "toy") {
      c.datasets.push_back(toy_ref());
      continue;
    }
    allow_keys(d, where, {"name", "toy", "series", "embeddings", "frequency"});
    DatasetRef ref;
    if (d["toy"]) {
      ref.toy = true;
      ref.name = "toy";
      const auto t = d["toy"];
      if (t.IsMap()) {
        allow_keys(t, where + ".toy", {"length", "text_dim", "noise", "encoder_seed"});
        if (t["length"]) ref.toy_options.length = count_field(t["length"], where + ".toy.length");
        if (t["text_dim"]) ref.toy_options.text_dim = count_field(t["text_dim"], where + ".toy.text_dim");
        if (t["noise"]) ref.toy_options.noise = positive(t["noise"], where + ".toy.noise");
        if (t["encoder_seed"])
          ref.toy_options.encoder_seed = scalar<std::uint64_t>(t["encoder_seed"], where + ".toy.encoder_seed");
      } else if (!scalar<bool>(t, where + ".toy")) {
        field_error(where + ".toy", "set to true or give toy options");
      }
    } else {
      if (!d["series"] || !d["embeddings"]) field_error(where, "needs 'series' and 'embeddings' (or 'toy')");
      ref.series = resolve(base, scalar<std::string>(d["series"], where + ".series"));
      ref.embeddings = resolve(base, scalar<std::string>(d["embeddings"], where + ".embeddings"));
      if (!d["frequency"]) field_error(where + ".frequency", "required for file datasets");
      try {
        ref.frequency = parse_frequency(scalar<std::string>(d["frequency"], where + ".frequency"));
      } catch (const ConfigError& e) {
        field_error(where + ".frequency", e.what());
      }
      ref.name = fs::path(ref.series).stem().string();
    }
    if (d["name"]) ref.name = scalar<std::string>(d["name"], where + ".name");
    c.datasets.push_back(ref);
  }

  if (const auto b = root["backbone"]) {
    allow_keys(b, "backbone", {"kind", "hidden", "layers", "kernel", "center"});
    if (b["kind"]) {
      try {
        c.backbone.kind = parse_backbone(scalar<std::string>(b["kind"], "backbone.kind"));
      } catch (const ConfigError& e) {
        field_error("backbone.kind", e.what());
      }
    }
    if (b["hidden"]) c.backbone.hidden = count_field(b["hidden"], "backbone.hidden");
    if (b["layers"]) c.backbone.layers = count_field(b["layers"], "backbone.layers", true);
    if (b["kernel"]) c.backbone.kernel = count_field(b["kernel"], "backbone.kernel");
    if (b["center"]) c.backbone.center = scalar<bool>(b["center"], "backbone.center");
  }

  if (const auto h = root["horizons"]) {
    if (!h.IsSequence() || h.size() == 0) field_error("horizons", "expected a non-empty list");
    for (std::size_t i = 0; i < h.size(); ++i)
      c.horizons.push_back(count_field(h[i], "horizons[" + std::to_string(i) + "]"));
  }

  std::size_t reduction = 8;
  if (root["reduction"]) reduction = count_field(root["reduction"], "reduction");
  c.fusions.push_back(FusionSpec{});
  if (auto f = root["fusions"]) {
    if (f.IsScalar() && f.Scalar() == "all") {
      YAML::Node seq(YAML::NodeType::Sequence);
      seq.push_back("all");
      f = seq;
    }
    if (!f.IsSequence() || f.size() == 0) field_error("fusions", "expected a non-empty list or 'all'");
    for (std::size_t i = 0; i < f.size(); ++i) {
      const std::string where = "fusions[" + std::to_string(i) + "]";
      auto label = scalar<std::string>(f[i], where);
      FusionSpec spec;
      try {
        if (label == "all") {
          for (const auto& s : all_fusion_strategies(reduction))
            if (std::find(c.fusions.begin(), c.fusions.end(), s) == c.fusions.end()) c.fusions.push_back(s);
          continue;
        }
        spec = FusionSpec::parse(label);
        if (spec.strategy == Strategy::kCfa && label.find('(') == std::string::npos) spec.reduction = reduction;
      } catch (const ConfigError& e) {
        field_error(where, e.what());
      }
      if (std::find(c.fusions.begin(), c.fusions.end(), spec) == c.fusions.end()) c.fusions.push_back(spec);
    }
  }

  if (const auto t = root["train"]) {
    allow_keys(t, "train", {"batch", "max_epochs", "patience", "lr", "multipliers", "sweep", "multiplier", "shuffle"});
    if (t["batch"]) c.train.batch = count_field(t["batch"], "train.batch");
    if (t["max_epochs"]) c.train.max_epochs = count_field(t["max_epochs"], "train.max_epochs");
    if (t["patience"]) c.train.patience = count_field(t["patience"], "train.patience");
    if (t["sweep"]) c.sweep = scalar<bool>(t["sweep"], "train.sweep");
    if (t["shuffle"]) c.train.shuffle = scalar<bool>(t["shuffle"], "train.shuffle");
    if (t["multiplier"]) c.train.multiplier = positive(t["multiplier"], "train.multiplier");
    if (const auto lr = t["lr"]) {
      allow_keys(lr, "train.lr", {"backbone", "text_mlp", "projection"});
      if (lr["backbone"]) c.train.base.backbone = positive(lr["backbone"], "train.lr.backbone");
      if (lr["text_mlp"]) c.train.base.text_mlp = positive(lr["text_mlp"], "train.lr.text_mlp");
      if (lr["projection"]) c.train.base.projection = positive(lr["projection"], "train.lr.projection");
    }
    if (const auto m = t["multipliers"]) {
      if (!m.IsSequence() || m.size() == 0) field_error("train.multipliers", "expected a non-empty list");
      c.multipliers.clear();
      for (std::size_t i = 0; i < m.size(); ++i)
        c.multipliers.push_back(positive(m[i], "train.multipliers[" + std::to_string(i) + "]"));
    }
  }

  if (const auto s = root["split"]) {
    if (!s.IsSequence() || s.size() != 3) field_error("split", "expected [train, val, test]");
    c.split = {scalar<double>(s[0], "split[0]"), scalar<double>(s[1], "split[1]"), scalar<double>(s[2], "split[2]")};
  }

  if (auto a = root["analyses"]) {
    if (a.IsScalar() && a.Scalar() == "all") {
      YAML::Node seq(YAML::NodeType::Sequence);
      seq.push_back("all");
      a = seq;
    }
    if (!a.IsSequence()) field_error("analyses", "expected a list or 'all'");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto name = scalar<std::string>(a[i], "analyses[" + std::to_string(i) + "]");
      auto& f = c.analyses;
      if (name == "per_type") f.per_type = true;
      else if (name == "contribution") f.contribution = true;
      else if (name == "similarity") f.similarity = true;
      else if (name == "effective_rank") f.effective_rank = true;
      else if (name == "attribution") f.attribution = true;
      else if (name == "efficiency") f.efficiency = true;
      else if (name == "irrelevant_text") f.irrelevant_text = true;
      else if (name == "all") f = {true, true, true, true, true, true, true};
      else field_error("analyses[" + std::to_string(i) + "]", "unknown analysis '" + name + "'");
    }
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::toy_study(std::size_t repeats) {
  ExperimentConfig c;
  c.datasets.push_back(toy_ref());
  c.backbone.kind = BackboneKind::kMlp;
  c.backbone.center = true;
  c.fusions = {FusionSpec{}, make_fusion(Strategy::kAdditive, kMiddle), make_fusion(Strategy::kCfa, 0, 8)};
  c.repeats = repeats;
  c.analyses.per_type = true;
  c.analyses.contribution = true;
  c.analyses.efficiency = true;
  c.output_dir = "results/toy";
  return c;
}

void ExperimentConfig::validate() const {
  if (datasets.empty()) field_error("datasets", "expected a non-empty list");
  std::set<std::string> names;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const auto& d = datasets[i];
    const std::string where = "datasets[" + std::to_string(i) + "]";
    if (!names.insert(d.name).second) field_error(where + ".name", "duplicate dataset name '" + d.name + "'");
    if (d.toy) {
      if (d.toy_options.length < 30) field_error(where + ".toy.length", "must be >= 30");
      if (d.toy_options.text_dim < 4) field_error(where + ".toy.text_dim", "must be >= 4");
      continue;
    }
    if (!fs::exists(d.series)) field_error(where + ".series", "file '" + d.series + "' does not exist");
    if (!fs::exists(d.embeddings)) field_error(where + ".embeddings", "file '" + d.embeddings + "' does not exist");
  }
  if (fusions.empty() || fusions[0].strategy != Strategy::kNone) field_error("fusions", "baseline 'none' missing");
  if (multipliers.empty()) field_error("train.multipliers", "expected a non-empty list");
  try {
    train.validate();
  } catch (const ConfigError& e) {
    field_error("train", e.what());
  }
  if (std::abs(split.train + split.val + split.test - 1.0) > 1e-9 || split.train <= 0 || split.val <= 0 ||
      split.test <= 0)
    field_error("split", "ratios must be positive and sum to 1");
  if (repeats == 0) field_error("repeats", "must be > 0");
  if (workers == 0) field_error("workers", "must be > 0");
  for (const auto& s : expand_settings(*this))
    for (const auto& f : fusions) {
      ModelConfig mc{backbone, f, 32};
      mc.backbone.lookback = s.lookback;
      mc.backbone.horizon = s.horizon;
      const auto& d = datasets[s.dataset];
      if (d.toy) mc.backbone.channels = 1;
      try {
        // File datasets' channel counts (the DLinear fusion width) are known only after loading.
        if (d.toy || backbone.kind == BackboneKind::kMlp) mc.validate();
        else mc.fusion.validate();
      } catch (const ConfigError& e) {
        field_error("fusions", s.name + " " + f.label() + ": " + e.what());
      }
    }
}

std::vector<std::uint64_t> ExperimentConfig::run_seeds() const {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < repeats; ++i) seeds.push_back(seed + i);
  return seeds;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  auto& ds = j["datasets"] = nlohmann::json::array();
  for (const auto& d : datasets) {
    nlohmann::json e{{"name", d.name}, {"toy", d.toy}};
    if (d.toy) {
      e["length"] = d.toy_options.length;
      e["text_dim"] = d.toy_options.text_dim;
      e["noise"] = d.toy_options.noise;
      e["encoder_seed"] = d.toy_options.encoder_seed;
    } else {
      e["series"] = d.series;
      e["embeddings"] = d.embeddings;
      e["frequency"] = frequency_name(d.frequency);
    }
    ds.push_back(e);
  }
  j["backbone"] = {{"kind", backbone_name(backbone.kind)},
                   {"hidden", backbone.hidden},
                   {"layers", backbone.layers},
                   {"kernel", backbone.kernel},
                   {"center", backbone.center}};
  if (lookback) j["lookback"] = *lookback;
  j["horizons"] = horizons;
  auto& fu = j["fusions"] = nlohmann::json::array();
  for (const auto& f : fusions) fu.push_back(f.label());
  j["train"] = {{"batch", train.batch},
                {"max_epochs", train.max_epochs},
                {"patience", train.patience},
                {"shuffle", train.shuffle},
                {"sweep", sweep},
                {"multiplier", train.multiplier},
                {"multipliers", multipliers},
                {"lr",
                 {{"backbone", train.base.backbone},
                  {"text_mlp", train.base.text_mlp},
                  {"projection", train.base.projection}}}};
  j["seed"] = seed;
  j["repeats"] = repeats;
  j["split"] = {split.train, split.val, split.test};
  j["stride"] = stride;
  const auto& a = analyses;
  j["analyses"] = {{"per_type", a.per_type},         {"contribution", a.contribution},
                   {"similarity", a.similarity},     {"effective_rank", a.effective_rank},
                   {"attribution", a.attribution},   {"efficiency", a.efficiency},
                   {"irrelevant_text", a.irrelevant_text}};
  return j;
}

std::uint64_t ExperimentConfig::digest() const { return fnv1a64(to_json().dump()); }

std::vector<Setting> expand_settings(const ExperimentConfig& c) {
  std::vector<Setting> out;
  for (std::size_t i = 0; i < c.datasets.size(); ++i) {
    const auto policy = horizon_policy(c.datasets[i].toy ? Frequency::kToy : c.datasets[i].frequency);
    const std::size_t lookback = c.lookback.value_or(policy.lookback);
    for (auto h : c.horizons.empty() ? policy.horizons : c.horizons)
      out.push_back({c.datasets[i].name + "/H" + std::to_string(h), i, lookback, h});
  }
  return out;
}

// ---- results.csv ----------------------------------------------------------

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string out = "setting,strategy,position,r,multiplier,seed,mse,mae,diverged,val_mse,selected,failed,fusion\n";
  for (const auto& r : rows) {
    out += r.setting + "," + r.strategy + "," + r.position + "," + std::to_string(r.reduction) + "," +
           fmt(r.multiplier) + "," + std::to_string(r.seed) + "," + fmt(r.mse) + "," + fmt(r.mae) + "," +
           (r.diverged ? "1" : "0") + "," + fmt(r.val_mse) + "," + (r.selected ? "1" : "0") + "," +
           (r.failed ? "1" : "0") + "," + r.fusion + "\n";
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || !line.starts_with("setting,strategy,position"))
    throw DataError("results.csv: missing or unexpected header");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_line(line);
    if (f.size() != 13) throw DataError("results.csv line " + std::to_string(lineno) + ": expected 13 fields");
    ResultRow r;
    try {
      r.setting = f[0];
      r.strategy = f[1];
      r.position = f[2];
      r.reduction = std::stoul(f[3]);
      r.multiplier = std::stod(f[4]);
      r.seed = std::stoull(f[5]);
      r.mse = std::stod(f[6]);
      r.mae = std::stod(f[7]);
      r.diverged = f[8] == "1";
      r.val_mse = std::stod(f[9]);
      r.selected = f[10] == "1";
      r.failed = f[11] == "1";
      r.fusion = f[12];
    } catch (const std::exception&) {
      throw DataError("results.csv line " + std::to_string(lineno) + ": malformed number");
    }
    rows.push_back(r);
  }
  return rows;
}

// ---- execution -------------------------------------------------------------

ExperimentOutcome execute_experiment(const ExperimentConfig& config, const ProgressFn& progress) {
  config.validate();
  const auto settings = expand_settings(config);
  const auto seeds = config.run_seeds();
  const auto& fusions = config.fusions;
  const std::vector<double> multipliers =
      config.sweep ? config.multipliers : std::vector<double>{config.train.multiplier};

  // File datasets are loaded once; toy data is regenerated from each run seed.
  std::vector<std::optional<MultimodalDataset>> loaded(config.datasets.size());
  for (std::size_t i = 0; i < config.datasets.size(); ++i) {
    const auto& d = config.datasets[i];
    if (!d.toy) loaded[i] = load_dataset(d.series, d.embeddings, {d.name, d.frequency});
  }
  auto dataset_for = [&](std::size_t i, std::uint64_t seed) {
    if (loaded[i]) return *loaded[i];
    auto d = generate_toy_dataset(seed, config.datasets[i].toy_options);
    d.name = config.datasets[i].name;
    return d;
  };

  struct Cell {
    PreparedData data;
    std::size_t channels = 0;
    std::size_t text_dim = 0;
  };
  std::vector<Cell> cells;  // [setting][seed]
  for (const auto& s : settings)
    for (auto seed : seeds) {
      const auto d = dataset_for(s.dataset, seed);
      cells.push_back({prepare_data(d, s.lookback, s.horizon, config.split, config.stride), d.channels(),
                       d.text_dim()});
    }
  auto cell_index = [&](std::size_t si, std::size_t ki) { return si * seeds.size() + ki; };

  auto model_config = [&](std::size_t si, std::size_t ki, const FusionSpec& f) {
    const auto& cell = cells[cell_index(si, ki)];
    ModelConfig mc{config.backbone, f, cell.text_dim};
    mc.backbone.lookback = settings[si].lookback;
    mc.backbone.horizon = settings[si].horizon;
    mc.backbone.channels = cell.channels;
    return mc;
  };

  struct Job {
    std::size_t setting, seed, fusion, multiplier;
  };
  std::vector<Job> jobs;
  for (std::size_t si = 0; si < settings.size(); ++si)
    for (std::size_t ki = 0; ki < seeds.size(); ++ki)
      for (std::size_t fi = 0; fi < fusions.size(); ++fi)
        for (std::size_t mi = 0; mi < multipliers.size(); ++mi) jobs.push_back({si, ki, fi, mi});

  // Configuration errors that only show up once channel counts are known.
  for (std::size_t si = 0; si < settings.size(); ++si)
    for (std::size_t fi = 0; fi < fusions.size(); ++fi) {
      try {
        model_config(si, 0, fusions[fi]).validate();
      } catch (const ConfigError& e) {
        throw ConfigError("field 'fusions': " + settings[si].name + " " + fusions[fi].label() + ": " + e.what());
      }
    }

  // A width-1 bottleneck layer-normalizes to its bias; with relu'(0) = 0 the
  // adapter then never leaves its zero init.
  std::vector<std::string> warnings;
  for (std::size_t si = 0; si < settings.size(); ++si)
    for (const auto& f : fusions) {
      if (f.strategy != Strategy::kCfa) continue;
      if (cfa_bottleneck(model_config(si, 0, f).fusion_dim(), f.reduction) == 1) {
        warnings.push_back(settings[si].name + " " + f.label() +
                           ": bottleneck width 1, the adapter output stays zero (lower r or add channels)");
        if (progress) progress("warning: " + warnings.back());
      }
    }

  // Per sweep, only the parameters of the best run so far are kept. The
  // comparison is a total order, so the result does not depend on timing.
  struct SweepSlot {
    std::mutex mutex;
    bool has = false;
    double val = 0.0;
    double multiplier = 0.0;
    std::size_t job = 0;
    TrainResult best;
  };
  const std::size_t n_sweeps = settings.size() * seeds.size() * fusions.size();
  std::vector<SweepSlot> slots(n_sweeps);
  auto sweep_index = [&](const Job& j) { return (j.setting * seeds.size() + j.seed) * fusions.size() + j.fusion; };

  std::vector<RunRecord> records(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::mutex progress_mutex;
  std::exception_ptr failure;
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& j = jobs[i];
      try {
        TrainConfig tc = config.train;
        tc.seed = seeds[j.seed];
        tc.multiplier = multipliers[j.multiplier];
        auto result = train_run(model_config(j.setting, j.seed, fusions[j.fusion]),
                                cells[cell_index(j.setting, j.seed)].data, tc);
        result.record.setting = settings[j.setting].name;
        records[i] = result.record;
        if (!result.record.failed) {
          auto& slot = slots[sweep_index(j)];
          std::lock_guard lock(slot.mutex);
          const double v = result.record.best_val, m = result.record.multiplier;
          if (!slot.has || v < slot.val || (v == slot.val && m < slot.multiplier)) {
            slot.has = true;
            slot.val = v;
            slot.multiplier = m;
            slot.job = i;
            slot.best = std::move(result);
          }
        }
      } catch (...) {
        std::lock_guard lock(progress_mutex);
        if (!failure) failure = std::current_exception();
      }
      const std::size_t n = ++done;
      if (progress) {
        std::lock_guard lock(progress_mutex);
        const auto& r = records[i];
        char buf[256];
        std::snprintf(buf, sizeof buf, "[%zu/%zu] %s %s seed=%llu mult=%g %s", n, jobs.size(),
                      settings[j.setting].name.c_str(), fusions[j.fusion].label().c_str(),
                      static_cast<unsigned long long>(seeds[j.seed]), multipliers[j.multiplier],
                      r.failed ? ("failed: " + r.error).c_str() : ("val=" + fmt(r.best_val)).c_str());
        progress(buf);
      }
    }
  };
  const std::size_t n_workers = std::clamp<std::size_t>(config.workers, 1, jobs.size());
  if (n_workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  ExperimentOutcome out;
  out.records = records;
  out.total_runs = jobs.size();
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const Job& j = jobs[i];
    auto row = make_row(settings[j.setting], fusions[j.fusion], records[i]);
    if (row.failed) ++out.failed_runs;
    const auto& slot = slots[sweep_index(j)];
    row.selected = slot.has && slot.job == i;
    const auto& base = slots[(j.setting * seeds.size() + j.seed) * fusions.size()];
    if (!row.failed && base.has && row.val_mse > 10.0 * base.val) row.diverged = true;
    out.rows.push_back(row);
  }
  out.exit_code = out.failed_runs == 0 ? 0 : (out.failed_runs == out.total_runs ? 4 : 3);

  // ---- diagnostics on the selected model of every sweep ----
  auto& diag = out.diagnostics;
  diag = nlohmann::json::object();
  diag["settings"] = nlohmann::json::array();
  diag["warnings"] = warnings;
  for (std::size_t si = 0; si < settings.size(); ++si) {
    const auto& s = settings[si];
    nlohmann::json sj{{"setting", s.name}, {"lookback", s.lookback}, {"horizon", s.horizon}};
    if (config.analyses.efficiency) {
      const auto mc = model_config(si, 0, FusionSpec{});
      std::vector<FusionSpec> specs(fusions.begin() + 1, fusions.end());
      auto& ej = sj["efficiency"] = nlohmann::json::array();
      for (const auto& r : efficiency_report(mc.backbone, mc.text_dim, specs))
        ej.push_back({{"fusion", r.fusion},
                      {"parameters", r.parameters},
                      {"fusion_parameters", r.fusion_parameters},
                      {"flops", r.flops},
                      {"param_overhead_pct", r.param_overhead_pct},
                      {"flop_overhead_pct", r.flop_overhead_pct}});
    }
    std::map<std::string, std::map<std::string, std::vector<double>>> ratios;  // fusion -> type -> samples
    auto& runs = sj["runs"] = nlohmann::json::array();
    for (std::size_t ki = 0; ki < seeds.size(); ++ki) {
      const auto& cell = cells[cell_index(si, ki)];
      const auto& base_slot = slots[(si * seeds.size() + ki) * fusions.size()];
      std::optional<ForecastModel> unimodal;
      if (base_slot.has) unimodal.emplace(model_config(si, ki, fusions[0]), base_slot.best.best_params);
      const auto probe = head(cell.data.test, kDiagnosticWindows);
      std::vector<Tensor> base_hidden;
      if (unimodal && config.analyses.similarity) base_hidden = hidden_states(*unimodal, probe);

      for (std::size_t fi = 0; fi < fusions.size(); ++fi) {
        const auto& slot = slots[(si * seeds.size() + ki) * fusions.size() + fi];
        if (!slot.has) continue;
        const auto& f = fusions[fi];
        ForecastModel model(model_config(si, ki, f), slot.best.best_params);
        nlohmann::json rj{{"fusion", f.label()}, {"seed", seeds[ki]}, {"multiplier", slot.multiplier},
                          {"test_mse", slot.best.record.test_mse}};
        if (config.analyses.per_type && !cell.data.test.labels.empty()) {
          const auto& pred = slot.best.test_prediction;
          const auto& y = cell.data.test.y;
          const std::size_t per = pred.size() / pred.dim(0);
          std::map<TextType, std::pair<double, std::size_t>> acc;
          for (std::size_t b = 0; b < pred.dim(0); ++b) {
            double se = 0.0;
            for (std::size_t k = 0; k < per; ++k) {
              const double d = pred[b * per + k] - y[b * per + k];
              se += d * d;
            }
            auto& a = acc[cell.data.test.labels[b]];
            a.first += se / static_cast<double>(per);
            ++a.second;
          }
          auto& pj = rj["per_type_mse"] = nlohmann::json::object();
          for (const auto& [type, a] : acc) {
            const double m = a.first / static_cast<double>(a.second);
            pj[text_type_name(type)] = m;
            out.per_type.push_back({s.name, f.label(), seeds[ki], text_type_name(type), a.second, m});
          }
        }
        if (config.analyses.contribution && f.strategy == Strategy::kCfa) {
          const auto rep = contribution_ratios(model, cell.data.test);
          auto& cj = rj["contribution"];
          cj["skipped"] = rep.skipped;
          std::map<std::string, std::vector<double>> by_type;
          for (const auto& smp : rep.samples) by_type[text_type_name(smp.label)].push_back(smp.ratio);
          for (const auto& [type, v] : by_type) {
            cj["by_type"][type] = group_stats(v).mean;
            auto& pool = ratios[f.label()][type];
            pool.insert(pool.end(), v.begin(), v.end());
          }
        }
        if (config.analyses.similarity && unimodal) {
          const auto hidden = hidden_states(model, probe);
          const auto sim = representation_similarity(base_hidden, hidden);
          rj["similarity"] = {{"value", sim.value}, {"per_layer", sim.per_layer},
                              {"zero_norm_layers", sim.zero_norm_layers}};
        }
        if (config.analyses.effective_rank) {
          std::vector<double> ranks;
          for (const auto& h : hidden_states(model, probe)) {
            try {
              ranks.push_back(effective_rank(h));
            } catch (const NumericError&) {
              ranks.push_back(0.0);
            }
          }
          rj["effective_rank"] = ranks;
        }
        if (config.analyses.attribution) rj["attribution"] = mean_attribution(temporal_attribution(model, probe));
        if (config.analyses.irrelevant_text && !config.datasets[s.dataset].toy && f.strategy != Strategy::kNone) {
          std::vector<MultimodalDataset> donors;
          for (std::size_t di = 0; di < loaded.size(); ++di)
            if (di != s.dataset && loaded[di] && loaded[di]->text_dim() == cell.text_dim) donors.push_back(*loaded[di]);
          if (!donors.empty()) {
            const auto swapped = substitute_irrelevant_text(*loaded[s.dataset], donors, seeds[ki]);
            const auto pd = prepare_data(swapped, s.lookback, s.horizon, config.split, config.stride);
            rj["irrelevant_text_mse"] = evaluate_mse(model, pd.test);
          }
        }
        runs.push_back(rj);
      }
    }
    if (!ratios.empty()) {
      auto& cr = sj["contribution_summary"] = nlohmann::json::array();
      for (const auto& [label, groups] : ratios) {
        nlohmann::json g{{"fusion", label}};
        for (const auto& [type, v] : groups) {
          const auto st = group_stats(v);
          g["groups"][type] = {{"n", st.n}, {"mean", st.mean}, {"std", st.stddev}};
        }
        auto m = groups.find("matching"), c = groups.find("contradicting");
        if (m != groups.end() && c != groups.end() && m->second.size() > 1 && c->second.size() > 1) {
          const auto cmp = compare_groups(m->second, c->second);
          g["matching_vs_contradicting"] = {{"welch_t", cmp.welch_t}, {"cohens_d", cmp.cohens_d}};
        }
        cr.push_back(g);
      }
    }
    diag["settings"].push_back(sj);
  }
  return out;
}

// ---- bundle I/O -----------------------------------------------------------

void write_file_atomic(const std::string& path, const std::string& content) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out << content;
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentOutcome run_experiment(const ExperimentConfig& config, const ProgressFn& progress) {
  auto out = execute_experiment(config, progress);
  const fs::path dir = config.output_dir;
  write_file_atomic((dir / "results.csv").string(), results_csv(out.rows));

  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : out.records) runs.push_back(r.to_json());
  write_file_atomic((dir / "runs.json").string(), runs.dump(2) + "\n");
  write_file_atomic((dir / "diagnostics.json").string(), out.diagnostics.dump(2) + "\n");

  std::string pt = "setting,fusion,seed,text_type,windows,mse\n";
  for (const auto& r : out.per_type)
    pt += r.setting + "," + r.fusion + "," + std::to_string(r.seed) + "," + r.text_type + "," +
          std::to_string(r.windows) + "," + fmt(r.mse) + "\n";
  write_file_atomic((dir / "per_type.csv").string(), pt);

  nlohmann::json manifest;
  manifest["tool_version"] = kToolVersion;
  manifest["config_digest"] = fmt_hex(config.digest());
  manifest["created_at"] = utc_now();
  manifest["metrics"] = kMetricDefinition;
  manifest["config"] = config.to_json();
  manifest["seeds"] = config.run_seeds();
  manifest["total_runs"] = out.total_runs;
  manifest["failed_runs"] = out.failed_runs;
  auto& mr = manifest["runs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < out.records.size(); ++i)
    mr.push_back({{"setting", out.rows[i].setting},
                  {"fusion", out.rows[i].fusion},
                  {"seed", out.records[i].seed},
                  {"multiplier", out.records[i].multiplier},
                  {"run_digest", fmt_hex(out.records[i].config_digest)}});
  write_file_atomic((dir / "manifest.json").string(), manifest.dump(2) + "\n");

  aggregate_bundles({dir.string()}, dir.string());
  write_report(dir.string());
  return out;
}

}  // namespace tsfuse
