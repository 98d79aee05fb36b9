#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsfuse/backbone.hpp"
#include "tsfuse/data.hpp"
#include "tsfuse/tensor.hpp"

namespace tsfuse {

double mse(const Tensor& prediction, const Tensor& target);
double mae(const Tensor& prediction, const Tensor& target);

struct MetricReport {
  double mse = 0.0;
  double mae = 0.0;
  std::vector<double> per_horizon_mse;  // axis 1 of [B, H, C]
  std::vector<double> per_horizon_mae;
};

MetricReport metric_report(const Tensor& prediction, const Tensor& target);

// 100 * (strict improvements) / n, rounded to one decimal.
double win_rate(std::span<const double> method, std::span<const double> baseline);

struct NormalizedMse {
  std::vector<double> average;               // one per method
  std::vector<std::size_t> excluded_settings;  // constant columns
  std::vector<std::string> warnings;
};

// table[method][setting]. Each setting is min-max normalized across methods
// and the normalized values are averaged per method.
NormalizedMse normalized_mse(const std::vector<std::vector<double>>& table);

struct Similarity {
  double value = 0.0;
  std::vector<double> per_layer;
  std::vector<std::size_t> zero_norm_layers;
};

// Mean over layers of the cosine between flattened representations; a layer
// with a zero-norm side contributes 0 and is listed.
Similarity representation_similarity(std::span<const Tensor> a, std::span<const Tensor> b);

// exp(-sum p log p) with p the normalized singular values; values below
// 1e-12 * sigma_max are dropped.
double effective_rank(const Tensor& matrix);
double effective_rank_from_singular_values(std::vector<double> sigma);
// Rows are all leading axes: [B, L, D] becomes [B*L, D].
Tensor as_matrix(const Tensor& t);

struct Attribution {
  std::vector<double> raw;         // I_t, one per lookback step
  std::vector<double> normalized;  // I_t / (sum I + eps)
};

inline constexpr double kAttributionEps = 1e-12;

// I_t = sum_d |grad[t, d] * input[t, d]| over [L, C] tensors.
Attribution attribution_from_gradient(const Tensor& gradient, const Tensor& input, double eps = kAttributionEps);

// Gradient x input of the window's MSE loss with respect to x; one entry per
// window of the batch.
std::vector<Attribution> temporal_attribution(const ForecastModel& model, const WindowBatch& batch,
                                              double eps = kAttributionEps);

double text_contribution_ratio(std::span<const double> adapter_output, std::span<const double> pooled_embedding);

struct ContributionSample {
  std::size_t window = 0;
  TextType label = TextType::kReal;
  double ratio = 0.0;
};

struct ContributionReport {
  std::vector<ContributionSample> samples;
  std::size_t skipped = 0;  // windows with a zero pooled embedding
};

// Ratio |o| / |e| per window at the first encoder-layer CFA adapter, with o
// the adapter output and e the raw text embedding, both mean-pooled over the
// lookback steps.
ContributionReport contribution_ratios(const ForecastModel& model, const WindowBatch& batch,
                                       const std::string& site = "middle0");

struct GroupStats {
  std::size_t n = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample (n - 1)
};

struct GroupComparison {
  GroupStats a;
  GroupStats b;
  double welch_t = 0.0;
  double cohens_d = 0.0;  // pooled standard deviation
};

GroupStats group_stats(std::span<const double> values);
GroupComparison compare_groups(std::span<const double> a, std::span<const double> b);

struct EfficiencyRow {
  std::string fusion;
  std::uint64_t parameters = 0;
  std::uint64_t fusion_parameters = 0;
  std::uint64_t flops = 0;
  double param_overhead_pct = 0.0;
  double flop_overhead_pct = 0.0;
};

// First row is the unimodal baseline, then one row per spec.
std::vector<EfficiencyRow> efficiency_report(const BackboneConfig& backbone, std::size_t text_dim,
                                             std::span<const FusionSpec> specs);

}  // namespace tsfuse
