#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsfuse/analysis.hpp"
#include "tsfuse/backbone.hpp"
#include "tsfuse/data.hpp"
#include "tsfuse/training.hpp"

namespace tsfuse {

inline constexpr const char* kToolVersion = "0.1.0";

struct DatasetRef {
  std::string name;
  bool toy = false;
  ToyOptions toy_options;
  std::string series;      // resolved path
  std::string embeddings;  // resolved path
  Frequency frequency = Frequency::kToy;
};

struct AnalysisFlags {
  bool per_type = false;
  bool contribution = false;
  bool similarity = false;
  bool effective_rank = false;
  bool attribution = false;
  bool efficiency = false;
  bool irrelevant_text = false;
};

struct ExperimentConfig {
  std::vector<DatasetRef> datasets;
  BackboneConfig backbone;  // lookback/horizon/channels are filled per setting
  std::optional<std::size_t> lookback;
  std::vector<std::size_t> horizons;  // empty: frequency policy
  std::vector<FusionSpec> fusions;    // "none" is always present
  TrainConfig train;
  std::vector<double> multipliers{kLrMultipliers.begin(), kLrMultipliers.end()};
  bool sweep = true;
  std::uint64_t seed = 0;
  std::size_t repeats = 1;
  SplitSpec split;
  std::size_t stride = 1;
  AnalysisFlags analyses;
  std::string output_dir = "results";
  std::size_t workers = 1;

  // Parses YAML; relative paths resolve against the file's directory.
  static ExperimentConfig load(const std::string& path);
  static ExperimentConfig parse(const std::string& yaml_text, const std::string& base_dir = ".");
  // Built-in toy study: none, additive@middle and cfa(r=8) on the toy dataset.
  static ExperimentConfig toy_study(std::size_t repeats = 5);

  void validate() const;  // field-level ConfigError
  std::vector<std::uint64_t> run_seeds() const;
  nlohmann::json to_json() const;
  std::uint64_t digest() const;
};

struct Setting {
  std::string name;  // "<dataset>/H<horizon>"
  std::size_t dataset = 0;
  std::size_t lookback = 0;
  std::size_t horizon = 0;
};

std::vector<Setting> expand_settings(const ExperimentConfig& config);

struct ResultRow {
  std::string setting;
  std::string fusion;  // label
  std::string strategy;
  std::string position;
  std::size_t reduction = 0;
  double multiplier = 1.0;
  std::uint64_t seed = 0;
  double val_mse = 0.0;
  double mse = 0.0;
  double mae = 0.0;
  bool diverged = false;
  bool selected = false;
  bool failed = false;
};

std::string results_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);

struct PerTypeRow {
  std::string setting;
  std::string fusion;
  std::uint64_t seed = 0;
  std::string text_type;
  std::size_t windows = 0;
  double mse = 0.0;
};

struct ExperimentOutcome {
  std::vector<ResultRow> rows;
  std::vector<RunRecord> records;
  std::vector<PerTypeRow> per_type;
  nlohmann::json diagnostics;
  std::size_t failed_runs = 0;
  std::size_t total_runs = 0;
  int exit_code = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

// Executes every run in memory.
ExperimentOutcome execute_experiment(const ExperimentConfig& config, const ProgressFn& progress = {});
// Executes and writes the bundle (results.csv, runs.json, diagnostics.json,
// per_type.csv, manifest.json, tables/, plots/) into config.output_dir.
ExperimentOutcome run_experiment(const ExperimentConfig& config, const ProgressFn& progress = {});

// Reads bundles and writes comparison tables into out_dir/tables.
void aggregate_bundles(const std::vector<std::string>& bundle_dirs, const std::string& out_dir);
// Writes SVG plots for one bundle into bundle_dir/plots.
void write_report(const std::string& bundle_dir);

struct PerTypeSummary {
  std::string text_type;
  double without_bottleneck = 0.0;  // additive@middle
  double with_bottleneck = 0.0;     // cfa
  double improvement_pct = 0.0;
};

// Table of mean per-type MSE (over seeds) for cfa vs additive@middle.
std::vector<PerTypeSummary> summarize_per_type(const std::vector<PerTypeRow>& rows, const std::string& cfa_label,
                                               const std::string& baseline_label = "additive@middle");

void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

struct GradcheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double error = 0.0;
  bool passed = false;
};

// Central-difference checks of every fusion op, both backbones, the text
// pipeline and end-to-end losses.
std::vector<GradcheckResult> gradient_suite(std::size_t seeds = 10, double tolerance = 1e-4);

}  // namespace tsfuse
