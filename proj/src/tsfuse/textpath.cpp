#include "tsfuse/textpath.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "tsfuse/error.hpp"

namespace tsfuse {

namespace {

constexpr std::array<const char*, 12> kIrrelevantSentences = {
    "The museum extended its opening hours for the summer exhibition.",
    "A new species of frog was described in the rainforest survey.",
    "The recipe calls for two cups of flour and a pinch of salt.",
    "Local elections will be held on the first Sunday of the month.",
    "The orchestra rehearsed the symphony late into the evening.",
    "Volcanic ash delayed several flights across the region.",
    "The library catalogued a donated collection of old maps.",
    "A marathon route was announced along the river promenade.",
    "Researchers photographed a comet passing near the horizon.",
    "The football club signed a young goalkeeper this week.",
    "Workers repainted the lighthouse in red and white stripes.",
    "The committee approved a design for the new footbridge.",
};

double unit_from_hash(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

}  // namespace

const char* text_type_name(TextType type) {
  switch (type) {
    case TextType::kMatching: return "matching";
    case TextType::kContradicting: return "contradicting";
    case TextType::kIrrelevant: return "irrelevant";
    case TextType::kReal: return "real";
  }
  return "unknown";
}

TextType parse_text_type(std::string_view name) {
  for (auto t : {TextType::kMatching, TextType::kContradicting, TextType::kIrrelevant, TextType::kReal})
    if (name == text_type_name(t)) return t;
  throw DataError("unknown text type '" + std::string(name) + "'");
}

ToyEncoder::ToyEncoder(std::size_t dim, std::uint64_t hash_seed) : dim_(dim), hash_seed_(hash_seed) {
  if (dim < 4) throw ConfigError("toy encoder needs dim >= 4, got " + std::to_string(dim));
  axis_ = encode_text(sentence(TextType::kMatching, +1));
}

std::vector<double> ToyEncoder::encode_text(std::string_view text) const {
  const std::uint64_t base = fnv1a64(text) ^ hash_seed_;
  std::vector<double> v(dim_);
  for (std::size_t i = 0; i < dim_; ++i)
    v[i] = 0.9 * (2.0 * unit_from_hash(splitmix64(base + i)) - 1.0);
  return v;
}

std::vector<double> ToyEncoder::core(TextType type, int trend_sign, std::size_t variant) const {
  const double sign = trend_sign >= 0 ? 1.0 : -1.0;
  std::vector<double> v(dim_);
  switch (type) {
    case TextType::kMatching:
      for (std::size_t i = 0; i < dim_; ++i) v[i] = sign * axis_[i];
      break;
    case TextType::kContradicting:
      for (std::size_t i = 0; i < dim_; ++i) v[i] = -sign * axis_[i];
      break;
    case TextType::kIrrelevant:
    case TextType::kReal: {
      v = encode_text(sentence(TextType::kIrrelevant, 0, variant));
      double dot = 0.0, norm2 = 0.0;
      for (std::size_t i = 0; i < dim_; ++i) {
        dot += v[i] * axis_[i];
        norm2 += axis_[i] * axis_[i];
      }
      for (std::size_t i = 0; i < dim_; ++i) v[i] = std::clamp(v[i] - dot / norm2 * axis_[i], -1.0, 1.0);
      break;
    }
  }
  return v;
}

std::vector<double> ToyEncoder::encode(TextType type, int trend_sign, std::size_t step,
                                       std::size_t variant) const {
  auto v = core(type, trend_sign, variant);
  const std::uint64_t base = splitmix64(hash_seed_ ^ splitmix64(step));
  for (std::size_t i = 0; i < dim_; ++i) {
    const double u1 = std::max(unit_from_hash(splitmix64(base + 2 * i)), 0x1.0p-53);
    const double u2 = unit_from_hash(splitmix64(base + 2 * i + 1));
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    v[i] = std::clamp(v[i] + kJitter * z, -1.0, 1.0);
  }
  return v;
}

std::string ToyEncoder::sentence(TextType type, int trend_sign, std::size_t variant) {
  const bool rising = trend_sign >= 0;
  switch (type) {
    case TextType::kMatching:
      return rising ? "The value is rising steadily" : "The value is declining";
    case TextType::kContradicting:
      return rising ? "The value is declining" : "The value is rising steadily";
    default:
      return kIrrelevantSentences[variant % kIrrelevantSentences.size()];
  }
}

std::size_t ToyEncoder::irrelevant_variants() { return kIrrelevantSentences.size(); }

void add_text_pipeline(ParameterSet& params, const TextPipelineShape& shape, Rng& rng) {
  add_linear(params, "text.mlp", ParamGroup::kTextMlp, shape.text_dim, shape.text_dim, rng);
  add_linear(params, "text.proj", ParamGroup::kProjection, shape.text_dim, shape.target_dim, rng);
}

std::size_t text_pipeline_param_count(const TextPipelineShape& s) {
  return s.text_dim * s.text_dim + s.text_dim + s.target_dim * s.text_dim + s.target_dim;
}

Var project_text(Graph& g, const BoundParams& params, Var raw) {
  const std::size_t in = g.shape(params["text.mlp.weight"]).back();
  if (g.shape(raw).back() != in)
    throw ShapeError("project_text: raw embedding width " + std::to_string(g.shape(raw).back()) +
                     " does not match text MLP input " + std::to_string(in));
  Var hidden = g.relu(linear(g, raw, params["text.mlp.weight"], params["text.mlp.bias"]));
  return linear(g, hidden, params["text.proj.weight"], params["text.proj.bias"]);
}

Tensor project_text(const ParameterSet& params, const Tensor& raw) {
  Graph g;
  BoundParams bound(g, params, false);
  Var out = project_text(g, bound, g.constant(raw));
  return g.forward(out);
}

}  // namespace tsfuse
