#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tsfuse/autodiff.hpp"
#include "tsfuse/params.hpp"

namespace tsfuse {

enum class Strategy : std::uint8_t { kNone, kAdditive, kConcat, kGating, kFilm, kOrthogonal, kCfa };

// Bit flags for fusion positions.
enum Position : std::uint8_t { kFirst = 1, kMiddle = 2, kLast = 4 };

const char* strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);
std::string positions_string(std::uint8_t positions);  // "first+middle", "" for none
std::uint8_t parse_positions(std::string_view text);

// Gating is the only strategy whose documented initialization (b_g = 0) is not
// inert; kInert swaps in W_g = 0, b_g = -40 so the gate starts closed.
enum class GateInit : std::uint8_t { kFanIn, kInert };

struct FusionSpec {
  Strategy strategy = Strategy::kNone;
  std::uint8_t positions = 0;  // naive strategies only
  std::size_t reduction = 8;   // cfa only
  GateInit gate_init = GateInit::kFanIn;

  bool constrained() const;
  // Positions actually used: constrained strategies always fuse at the middle.
  std::uint8_t effective_positions() const;
  // e.g. "none", "additive@first", "cfa(r=8)"
  std::string label() const;
  void validate() const;
  static FusionSpec parse(std::string_view label);
  friend bool operator==(const FusionSpec&, const FusionSpec&) = default;
};

FusionSpec make_fusion(Strategy strategy, std::uint8_t positions = 0, std::size_t reduction = 8);

// additive and concat at each of first/middle/last, then gating, film,
// orthogonal and cfa.
std::vector<FusionSpec> all_fusion_strategies(std::size_t reduction = 8);

// floor(dim / r); raises ConfigError when the result is 0.
std::size_t cfa_bottleneck(std::size_t dim, std::size_t reduction);

// Registers the parameters of one fusion site named `fusion.<site>.*`.
void add_fusion_site(ParameterSet& params, const std::string& site, const FusionSpec& spec, std::size_t dim,
                     Rng& rng);
std::size_t fusion_site_param_count(const FusionSpec& spec, std::size_t dim);
// Forward FLOPs of one site over `rows` vectors of width `dim`.
std::uint64_t fusion_site_flops(const FusionSpec& spec, std::size_t rows, std::size_t dim);

// Per-site handles for diagnostics. Fields not produced by the strategy stay
// invalid.
struct SiteTrace {
  std::string site;
  Var adapter_output;  // cfa: W_up relu(layernorm(W_down z_text))
  Var gate;            // gating: sigmoid(...)
  Var sqnorm;          // orthogonal: |z_ts|^2 per vector
};

// Fuses along the last axis; z_ts and z_text must have equal shapes.
Var fuse_additive(Graph& g, Var z_ts, Var z_text);
Var fuse_concat(Graph& g, Var z_ts, Var z_text, Var weight, Var bias);
Var fuse_gating(Graph& g, Var z_ts, Var z_text, Var weight, Var bias, Var* gate = nullptr);
Var fuse_film(Graph& g, Var z_ts, Var z_text, Var gamma_weight, Var gamma_bias, Var beta_weight, Var beta_bias);

struct OrthogonalParts {
  Var fused;
  Var perp;
  Var sqnorm;
};
// Vectors with |z_ts|^2 < kDegenerateNorm keep z_text unprojected.
inline constexpr double kDegenerateNorm = 1e-12;
OrthogonalParts fuse_orthogonal(Graph& g, Var z_ts, Var z_text);

struct CfaParts {
  Var fused;
  Var output;
};
CfaParts fuse_cfa(Graph& g, Var z_ts, Var z_text, Var w_down, Var w_up, Var gamma, Var beta);

// Dispatches on spec.strategy using the parameters `fusion.<site>.*`.
Var fuse(Graph& g, const BoundParams& params, const std::string& site, const FusionSpec& spec, Var z_ts,
         Var z_text, SiteTrace* trace = nullptr);

// Number of vectors that took the degenerate branch of the orthogonal fusion.
std::size_t degenerate_count(const Graph& g, Var sqnorm);

}  // namespace tsfuse
