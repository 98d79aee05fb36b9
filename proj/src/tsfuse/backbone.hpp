#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tsfuse/autodiff.hpp"
#include "tsfuse/fusion.hpp"
#include "tsfuse/params.hpp"
#include "tsfuse/textpath.hpp"

namespace tsfuse {

enum class BackboneKind : std::uint8_t { kMlp, kDLinear };

const char* backbone_name(BackboneKind kind);
BackboneKind parse_backbone(std::string_view name);

struct BackboneConfig {
  BackboneKind kind = BackboneKind::kMlp;
  std::size_t lookback = 8;
  std::size_t horizon = 8;
  std::size_t channels = 1;
  std::size_t hidden = 64;  // MLP width D
  std::size_t layers = 2;   // MLP encoder blocks N_enc
  std::size_t kernel = 25;  // DLinear moving-average width
  // Subtract each window's per-channel mean from x and add it back to the
  // forecast.
  bool center = false;
};

struct ModelConfig {
  BackboneConfig backbone;
  FusionSpec fusion;
  std::size_t text_dim = 32;

  // Width of the representation text is fused into: D for the MLP, C for DLinear.
  std::size_t fusion_dim() const;
  // Site names in construction order, e.g. {"middle0", "middle1"}.
  std::vector<std::string> fusion_sites() const;
  void validate() const;
  std::string canonical() const;
  std::uint64_t digest() const;
};

struct ModelCard {
  std::uint64_t parameters = 0;         // every trainable element
  std::uint64_t fusion_parameters = 0;  // fusion sites only
  std::uint64_t text_parameters = 0;    // text MLP and projection
  std::uint64_t flops = 0;              // one forward pass
  std::uint64_t fusion_flops = 0;
};

// Closed forms. The MLP backbone has C*D + D + N*(D^2 + 3D) + L*D*H*C + H*C
// parameters and DLinear 2*(L*H + H); the text pipeline adds
// Dt^2 + Dt + Dtarget*Dt + Dtarget when fusion is enabled.
ModelCard count_params(const ModelConfig& config);
ModelCard count_flops(const ModelConfig& config, std::size_t batch = 1);

struct ForwardResult {
  Var yhat;                     // [B, H, C]
  std::vector<Var> hidden;      // per-layer representations after fusion
  std::vector<SiteTrace> sites; // one per fusion site
  Var text;                     // projected text (invalid without fusion)
};

class ForecastModel {
 public:
  // Backbone, fusion and text parameters draw from separate sub-streams of
  // `seed`, so the backbone initialization does not depend on the fusion.
  ForecastModel(ModelConfig config, std::uint64_t seed);
  ForecastModel(ModelConfig config, ParameterSet params);

  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // x: [B, L, C]; raw_text: [B, L, D_text], ignored (may be invalid) without fusion.
  ForwardResult build(Graph& g, const BoundParams& bound, Var x, Var raw_text) const;
  Tensor predict(const Tensor& x, const Tensor& raw_text) const;

 private:
  ModelConfig config_;
  ParameterSet params_;
};

// Binary checkpoint: "TSFCKPT\0", u32 version, u64 config digest, u64 count,
// then per tensor: u32 name length, name, u8 group, u32 rank, u64 dims, f64 data.
// All integers and floats little-endian.
void save_checkpoint(const std::string& path, const ForecastModel& model);
ForecastModel load_checkpoint(const std::string& path, const ModelConfig& config);

}  // namespace tsfuse
