#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tsfuse/autodiff.hpp"
#include "tsfuse/params.hpp"

namespace tsfuse {

enum class TextType : std::uint8_t { kMatching = 0, kContradicting = 1, kIrrelevant = 2, kReal = 3 };

const char* text_type_name(TextType type);
TextType parse_text_type(std::string_view name);

// Deterministic stand-in for a frozen sentence encoder. Strings hash (FNV-1a)
// to vectors in [-1, 1]. Trend descriptions share one axis: "rising" maps to
// +axis and "declining" to -axis, so a contradicting description of a rising
// step is the same core vector as a matching description of a falling one.
// Irrelevant sentences have their trend-axis component removed.
class ToyEncoder {
 public:
  static constexpr double kJitter = 0.01;

  explicit ToyEncoder(std::size_t dim = 32, std::uint64_t hash_seed = 0);

  std::size_t dim() const { return dim_; }
  std::uint64_t hash_seed() const { return hash_seed_; }

  std::vector<double> encode_text(std::string_view text) const;
  // Core vector (no jitter) of a description.
  std::vector<double> core(TextType type, int trend_sign, std::size_t irrelevant_variant = 0) const;
  // Core plus deterministic per-step jitter, clamped to [-1, 1].
  std::vector<double> encode(TextType type, int trend_sign, std::size_t step,
                             std::size_t irrelevant_variant = 0) const;
  const std::vector<double>& trend_axis() const { return axis_; }

  static std::string sentence(TextType type, int trend_sign, std::size_t irrelevant_variant = 0);
  static std::size_t irrelevant_variants();

 private:
  std::size_t dim_;
  std::uint64_t hash_seed_;
  std::vector<double> axis_;
};

// Trainable text path: Z_Text = projection(relu(mlp(raw))). The MLP is a
// single D_text -> D_text linear layer whose parameters sit in the text-MLP
// optimizer group; the projection D_text -> D_target sits in the projection
// group.
struct TextPipelineShape {
  std::size_t text_dim = 32;
  std::size_t target_dim = 64;
};

void add_text_pipeline(ParameterSet& params, const TextPipelineShape& shape, Rng& rng);
std::size_t text_pipeline_param_count(const TextPipelineShape& shape);

// raw: [..., D_text] -> [..., D_target]
Var project_text(Graph& g, const BoundParams& params, Var raw);
Tensor project_text(const ParameterSet& params, const Tensor& raw);

}  // namespace tsfuse
