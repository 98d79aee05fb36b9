#include "tsfuse/backbone.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "tsfuse/error.hpp"
#include "tsfuse/rng.hpp"

namespace tsfuse {

namespace {

constexpr char kMagic[8] = {'T', 'S', 'F', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

bool has_middle_or_last(const ModelConfig& c) {
  return (c.fusion.effective_positions() & (kMiddle | kLast)) != 0;
}

void add_mlp_backbone(ParameterSet& params, const BackboneConfig& b, Rng& rng) {
  const auto g = ParamGroup::kBackbone;
  add_linear(params, "backbone.input", g, b.channels, b.hidden, rng);
  for (std::size_t k = 0; k < b.layers; ++k) {
    const std::string p = "backbone.block" + std::to_string(k);
    add_linear(params, p + ".linear", g, b.hidden, b.hidden, rng);
    params.add(p + ".norm.weight", g, Tensor({b.hidden}, 1.0));
    params.add(p + ".norm.bias", g, Tensor({b.hidden}));
  }
  add_linear(params, "backbone.output", g, b.lookback * b.hidden, b.horizon * b.channels, rng);
}

void add_dlinear_backbone(ParameterSet& params, const BackboneConfig& b) {
  const double w = 1.0 / static_cast<double>(b.lookback);
  for (const char* part : {"seasonal", "trend"}) {
    const std::string p = std::string("backbone.") + part;
    params.add(p + ".weight", ParamGroup::kBackbone, Tensor({b.horizon, b.lookback}, w));
    params.add(p + ".bias", ParamGroup::kBackbone, Tensor({b.horizon}));
  }
}

// Applies a shared L -> H map to every channel of [B, L, C].
Var channel_linear(Graph& g, Var x, Var weight, Var bias) {
  return g.transpose(linear(g, g.transpose(x), weight, bias));
}

template <typename T>
void put(std::ostream& os, T v) {
  std::uint64_t bits;
  if constexpr (std::is_same_v<T, double>) bits = std::bit_cast<std::uint64_t>(v);
  else bits = static_cast<std::uint64_t>(v);
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw IoError(path + ": truncated checkpoint");
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  if constexpr (std::is_same_v<T, double>) return std::bit_cast<double>(bits);
  else return static_cast<T>(bits);
}

}  // namespace

const char* backbone_name(BackboneKind kind) { return kind == BackboneKind::kMlp ? "mlp" : "dlinear"; }

BackboneKind parse_backbone(std::string_view name) {
  if (name == "mlp") return BackboneKind::kMlp;
  if (name == "dlinear") return BackboneKind::kDLinear;
  throw ConfigError("unknown backbone '" + std::string(name) + "' (expected mlp or dlinear)");
}

std::size_t ModelConfig::fusion_dim() const {
  return backbone.kind == BackboneKind::kMlp ? backbone.hidden : backbone.channels;
}

std::vector<std::string> ModelConfig::fusion_sites() const {
  std::vector<std::string> sites;
  const std::uint8_t pos = fusion.effective_positions();
  if (pos & kFirst) sites.emplace_back("first");
  if (pos & kMiddle) {
    if (backbone.kind == BackboneKind::kMlp) {
      for (std::size_t k = 0; k < backbone.layers; ++k) sites.push_back("middle" + std::to_string(k));
    } else {
      sites.emplace_back("middle.seasonal");
      sites.emplace_back("middle.trend");
    }
  }
  if (pos & kLast) sites.emplace_back("last");
  return sites;
}

void ModelConfig::validate() const {
  const auto& b = backbone;
  if (b.lookback == 0 || b.horizon == 0 || b.channels == 0)
    throw ConfigError("lookback, horizon and channels must be positive");
  if (b.kind == BackboneKind::kMlp && b.hidden == 0) throw ConfigError("hidden width must be positive");
  if (b.kind == BackboneKind::kDLinear && (b.kernel == 0 || b.kernel % 2 == 0))
    throw ConfigError("moving-average kernel must be odd, got " + std::to_string(b.kernel));
  if (text_dim == 0) throw ConfigError("text_dim must be positive");
  fusion.validate();
  if (b.kind == BackboneKind::kMlp && b.layers == 0 && (fusion.effective_positions() & kMiddle))
    throw ConfigError(fusion.label() + " needs middle fusion but the backbone has no encoder blocks");
  if (fusion.strategy == Strategy::kCfa) cfa_bottleneck(fusion_dim(), fusion.reduction);
}

std::string ModelConfig::canonical() const {
  const auto& b = backbone;
  std::string s = "backbone=" + std::string(backbone_name(b.kind)) + ";L=" + std::to_string(b.lookback) +
                  ";H=" + std::to_string(b.horizon) + ";C=" + std::to_string(b.channels);
  if (b.kind == BackboneKind::kMlp) s += ";D=" + std::to_string(b.hidden) + ";N=" + std::to_string(b.layers);
  else s += ";kernel=" + std::to_string(b.kernel);
  if (b.center) s += ";center=1";
  s += ";fusion=" + fusion.label();
  if (fusion.strategy == Strategy::kGating && fusion.gate_init == GateInit::kInert) s += ";gate=inert";
  s += ";text_dim=" + std::to_string(text_dim);
  return s;
}

std::uint64_t ModelConfig::digest() const { return fnv1a64(canonical()); }

ModelCard count_params(const ModelConfig& c) {
  c.validate();
  const std::uint64_t L = c.backbone.lookback, H = c.backbone.horizon, C = c.backbone.channels;
  ModelCard card;
  std::uint64_t backbone = 0;
  if (c.backbone.kind == BackboneKind::kMlp) {
    const std::uint64_t D = c.backbone.hidden, N = c.backbone.layers;
    backbone = C * D + D + N * (D * D + 3 * D) + L * D * H * C + H * C;
  } else {
    backbone = 2 * (L * H + H);
  }
  if (c.fusion.strategy != Strategy::kNone) {
    card.text_parameters = text_pipeline_param_count({c.text_dim, c.fusion_dim()});
    card.fusion_parameters = c.fusion_sites().size() * fusion_site_param_count(c.fusion, c.fusion_dim());
  }
  card.parameters = backbone + card.text_parameters + card.fusion_parameters;
  return card;
}

ModelCard count_flops(const ModelConfig& c, std::size_t batch) {
  ModelCard card = count_params(c);
  const std::uint64_t B = batch, L = c.backbone.lookback, H = c.backbone.horizon, C = c.backbone.channels;
  const bool fused = c.fusion.strategy != Strategy::kNone;
  const std::uint64_t Dt = c.text_dim, Dg = c.fusion_dim();
  std::uint64_t total = 0;
  if (fused) total += 2 * B * L * Dt * Dt + 2 * B * L * Dt + 2 * B * L * Dt * Dg + B * L * Dg;

  std::uint64_t fusion = 0;
  const auto sites = c.fusion_sites();
  for (const auto& site : sites) {
    const bool per_step = site == "first" || (c.backbone.kind == BackboneKind::kMlp);
    fusion += fusion_site_flops(c.fusion, (per_step ? B * L : B * H), Dg);
  }

  if (c.backbone.kind == BackboneKind::kMlp) {
    const std::uint64_t D = c.backbone.hidden, N = c.backbone.layers;
    total += 2 * B * L * C * D + B * L * D;
    total += N * (2 * B * L * D * D + 10 * B * L * D);
    total += 2 * B * (L * D) * (H * C) + B * H * C;
  } else {
    const std::uint64_t K = c.backbone.kernel;
    total += K * B * L * C + B * L * C;
    total += 2 * (2 * B * C * L * H + B * C * H);
    total += B * H * C;
    if (fused && has_middle_or_last(c)) total += B * L * C + B * H * C;
  }
  if (c.backbone.center) total += 2 * B * L * C + B * H * C;
  card.fusion_flops = fusion;
  card.flops = total + fusion;
  return card;
}

ForecastModel::ForecastModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng backbone_rng(seed, "init");
  if (config_.backbone.kind == BackboneKind::kMlp) add_mlp_backbone(params_, config_.backbone, backbone_rng);
  else add_dlinear_backbone(params_, config_.backbone);
  if (config_.fusion.strategy == Strategy::kNone) return;
  Rng text_rng(seed, "init.text");
  add_text_pipeline(params_, {config_.text_dim, config_.fusion_dim()}, text_rng);
  Rng fusion_rng(seed, "init.fusion");
  for (const auto& site : config_.fusion_sites())
    add_fusion_site(params_, site, config_.fusion, config_.fusion_dim(), fusion_rng);
}

ForecastModel::ForecastModel(ModelConfig config, ParameterSet params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  ForecastModel reference(config_, 0);
  const auto& want = reference.params().items();
  if (want.size() != params_.size())
    throw ConfigError("parameter set has " + std::to_string(params_.size()) + " tensors, model expects " +
                      std::to_string(want.size()));
  for (const auto& p : want) {
    if (!params_.contains(p.name)) throw ConfigError("missing parameter '" + p.name + "'");
    const auto& got = params_.at(p.name);
    if (got.value.shape() != p.value.shape())
      throw ShapeError("parameter '" + p.name + "' has shape " + shape_string(got.value.shape()) + ", expected " +
                       shape_string(p.value.shape()));
  }
}

ForwardResult ForecastModel::build(Graph& g, const BoundParams& bp, Var x, Var raw_text) const {
  const auto& b = config_.backbone;
  const auto& spec = config_.fusion;
  const Shape& xs = g.shape(x);
  if (xs.size() != 3 || xs[1] != b.lookback || xs[2] != b.channels)
    throw ShapeError("model input must be [B, " + std::to_string(b.lookback) + ", " + std::to_string(b.channels) +
                     "], got " + shape_string(xs));
  const std::size_t batch = xs[0];
  const bool fused = spec.strategy != Strategy::kNone;
  const std::uint8_t pos = spec.effective_positions();

  ForwardResult r;
  Var level;
  if (b.center) {
    level = g.mean(x, 1);
    x = g.sub(x, level);
  }
  auto restore = [&](Var y) { return b.center ? g.add(y, level) : y; };
  if (fused) {
    if (!raw_text.valid()) throw ConfigError("fusion " + spec.label() + " needs text embeddings");
    const Shape& ts = g.shape(raw_text);
    if (ts.size() != 3 || ts[0] != batch || ts[1] != b.lookback)
      throw ShapeError("text embeddings must be [" + std::to_string(batch) + ", " + std::to_string(b.lookback) +
                       ", D_text], got " + shape_string(ts));
    r.text = project_text(g, bp, raw_text);
  }
  auto fuse_at = [&](const std::string& site, Var z, Var text) {
    SiteTrace trace;
    Var out = fuse(g, bp, site, spec, z, text, &trace);
    r.sites.push_back(trace);
    return out;
  };

  if (b.kind == BackboneKind::kMlp) {
    Var h = linear(g, x, bp["backbone.input.weight"], bp["backbone.input.bias"]);
    if (pos & kFirst) h = fuse_at("first", h, r.text);
    r.hidden.push_back(h);
    for (std::size_t k = 0; k < b.layers; ++k) {
      const std::string p = "backbone.block" + std::to_string(k);
      h = linear(g, h, bp[p + ".linear.weight"], bp[p + ".linear.bias"]);
      h = g.layernorm(g.relu(h), bp[p + ".norm.weight"], bp[p + ".norm.bias"]);
      if (pos & kMiddle) h = fuse_at("middle" + std::to_string(k), h, r.text);
      if (k + 1 == b.layers && (pos & kLast)) h = fuse_at("last", h, r.text);
      r.hidden.push_back(h);
    }
    if (b.layers == 0 && (pos & kLast)) {
      h = fuse_at("last", h, r.text);
      r.hidden.back() = h;
    }
    Var flat = g.reshape(h, {batch, b.lookback * b.hidden});
    Var out = linear(g, flat, bp["backbone.output.weight"], bp["backbone.output.bias"]);
    r.yhat = restore(g.reshape(out, {batch, b.horizon, b.channels}));
    return r;
  }

  Var xin = x;
  if (pos & kFirst) xin = fuse_at("first", x, r.text);
  r.hidden.push_back(xin);
  Var trend = g.moving_average(xin, b.kernel);
  Var seasonal = g.sub(xin, trend);
  Var s_out = channel_linear(g, seasonal, bp["backbone.seasonal.weight"], bp["backbone.seasonal.bias"]);
  Var t_out = channel_linear(g, trend, bp["backbone.trend.weight"], bp["backbone.trend.bias"]);
  Var pooled;
  if (fused && (pos & (kMiddle | kLast)))
    pooled = g.add(g.mean(r.text, 1), g.constant(Tensor({1, b.horizon, b.channels})));
  if (pos & kMiddle) {
    s_out = fuse_at("middle.seasonal", s_out, pooled);
    t_out = fuse_at("middle.trend", t_out, pooled);
  }
  r.hidden.push_back(s_out);
  r.hidden.push_back(t_out);
  Var y = g.add(s_out, t_out);
  if (pos & kLast) y = fuse_at("last", y, pooled);
  r.yhat = restore(y);
  return r;
}

Tensor ForecastModel::predict(const Tensor& x, const Tensor& raw_text) const {
  Graph g;
  BoundParams bound(g, params_, false);
  Var xv = g.constant(x);
  Var tv = config_.fusion.strategy == Strategy::kNone ? Var{} : g.constant(raw_text);
  return g.forward(build(g, bound, xv, tv).yhat);
}

void save_checkpoint(const std::string& path, const ForecastModel& model) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, model.config().digest());
    put<std::uint64_t>(out, model.params().size());
    for (const auto& p : model.params().items()) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put<std::uint8_t>(out, static_cast<std::uint8_t>(p.group));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
      for (auto d : p.value.shape()) put<std::uint64_t>(out, d);
      for (double v : p.value.data()) put<double>(out, v);
    }
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
}

ForecastModel load_checkpoint(const std::string& path, const ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw IoError(path + ": not a checkpoint file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto digest = get<std::uint64_t>(in, path);
  if (digest != config.digest())
    throw ConfigError(path + ": checkpoint was written for a different model configuration");
  const auto count = get<std::uint64_t>(in, path);
  ParameterSet params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    if (len > 4096) throw IoError(path + ": corrupt tensor name");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw IoError(path + ": truncated checkpoint");
    const auto group = get<std::uint8_t>(in, path);
    if (group > 2) throw IoError(path + ": bad parameter group");
    const auto rank = get<std::uint32_t>(in, path);
    if (rank == 0 || rank > 3) throw IoError(path + ": bad tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in, path);
    std::vector<double> data(shape_size(shape));
    for (auto& v : data) v = get<double>(in, path);
    params.add(std::move(name), static_cast<ParamGroup>(group), Tensor(std::move(shape), std::move(data)));
  }
  return ForecastModel(config, std::move(params));
}

}  // namespace tsfuse
