#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tsfuse.h"

namespace {

int report_status(int status, const char* what) {
  if (status != TSFUSE_OK)
    std::fprintf(stderr, "%s: %s: %s\n", what, tsfuse_status_name(status), tsfuse_last_error());
  return status;
}

void print_line(const char* line, void* user) {
  const bool quiet = user && *static_cast<bool*>(user);
  if (!quiet || std::strncmp(line, "warning:", 8) == 0) std::fprintf(stderr, "%s\n", line);
}

void print_file(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) std::printf("  %s\n", line.c_str());
}

struct RunOptions {
  std::string out;
  std::size_t workers = 0;
  std::int64_t seed = -1;
  bool no_sweep = false;
  bool quiet = false;
};

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--out", o.out, "Output bundle directory (overrides the config)");
  cmd->add_option("--workers", o.workers, "Parallel training workers")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o.seed, "Root seed (overrides the config)")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--no-sweep", o.no_sweep, "Train once at the configured multiplier");
  cmd->add_flag("--quiet,-q", o.quiet, "Suppress per-run progress");
}

int apply_run_options(tsfuse_config* cfg, const RunOptions& o) {
  int st = TSFUSE_OK;
  if (!o.out.empty() && (st = tsfuse_config_set_output(cfg, o.out.c_str()))) return st;
  if (o.workers && (st = tsfuse_config_set_workers(cfg, o.workers))) return st;
  if (o.seed >= 0 && (st = tsfuse_config_set_seed(cfg, static_cast<uint64_t>(o.seed)))) return st;
  if (o.no_sweep && (st = tsfuse_config_set_sweep(cfg, 0))) return st;
  return st;
}

std::string output_dir(const tsfuse_config* cfg) {
  char* s = nullptr;
  if (tsfuse_config_output(cfg, &s) != TSFUSE_OK) return "";
  std::string out = s;
  tsfuse_string_free(s);
  return out;
}

int run_config(tsfuse_config* cfg, const RunOptions& o) {
  int st = apply_run_options(cfg, o);
  if (st) return report_status(st, "run");
  bool quiet = o.quiet;
  size_t failed = 0, total = 0;
  st = tsfuse_run(cfg, print_line, &quiet, &failed, &total);
  if (st != TSFUSE_OK && st != TSFUSE_PARTIAL && st != TSFUSE_ALL_FAILED) return report_status(st, "run");
  std::printf("%zu runs, %zu failed; bundle written to %s\n", total, failed, output_dir(cfg).c_str());
  if (st != TSFUSE_OK) report_status(st, "run");
  return st;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal time-series forecasting with text fusion"};
  app.set_version_flag("--version", tsfuse_version());
  app.require_subcommand(1);

  std::string config_path;
  bool print_config = false;
  auto* validate = app.add_subcommand("validate", "Check a config file and print its digest");
  validate->add_option("--config,-c", config_path, "Experiment config (YAML)")->required();
  validate->add_flag("--print", print_config, "Print the normalized config as JSON");

  RunOptions run_opts;
  auto* run = app.add_subcommand("run", "Run an experiment and write its result bundle");
  run->add_option("--config,-c", config_path, "Experiment config (YAML)")->required();
  add_run_options(run, run_opts);

  std::vector<std::string> bundles;
  std::string agg_out;
  auto* aggregate = app.add_subcommand("aggregate", "Combine bundles into comparison tables");
  aggregate->add_option("bundles", bundles, "Bundle directories")->required()->check(CLI::ExistingDirectory);
  aggregate->add_option("--out", agg_out, "Output directory")->required();

  std::size_t repeats = 5;
  RunOptions toy_opts;
  toy_opts.out = "results/toy";
  auto* toy = app.add_subcommand("toy", "Run the synthetic matching/contradicting/irrelevant text study");
  toy->add_option("--repeats", repeats, "Seeds to average over")->check(CLI::PositiveNumber);
  add_run_options(toy, toy_opts);

  std::size_t gc_seeds = 10;
  double gc_tol = 1e-4;
  bool gc_verbose = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  gradcheck->add_option("--seeds", gc_seeds, "Random draws per case")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tol", gc_tol, "Maximum relative error")->check(CLI::PositiveNumber);
  gradcheck->add_flag("--verbose,-v", gc_verbose, "Print every case");

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Write SVG plots for a bundle");
  report->add_option("bundle", report_dir, "Bundle directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  if (*validate) {
    tsfuse_config* cfg = nullptr;
    int st = tsfuse_config_load(config_path.c_str(), &cfg);
    if (st) return report_status(st, "validate");
    uint64_t digest = 0;
    tsfuse_config_digest(cfg, &digest);
    std::printf("config ok: %s (digest %016" PRIx64 ")\n", config_path.c_str(), digest);
    if (print_config) {
      char* json = nullptr;
      if (tsfuse_config_json(cfg, &json) == TSFUSE_OK) {
        std::printf("%s\n", json);
        tsfuse_string_free(json);
      }
    }
    tsfuse_config_free(cfg);
    return 0;
  }

  if (*run) {
    tsfuse_config* cfg = nullptr;
    int st = tsfuse_config_load(config_path.c_str(), &cfg);
    if (st) return report_status(st, "run");
    st = run_config(cfg, run_opts);
    tsfuse_config_free(cfg);
    return st;
  }

  if (*aggregate) {
    std::vector<const char*> dirs;
    for (const auto& b : bundles) dirs.push_back(b.c_str());
    const int st = tsfuse_aggregate(dirs.data(), dirs.size(), agg_out.c_str());
    if (st) return report_status(st, "aggregate");
    std::printf("tables written to %s/tables\n", agg_out.c_str());
    return 0;
  }

  if (*toy) {
    tsfuse_config* cfg = nullptr;
    int st = tsfuse_config_toy(repeats, &cfg);
    if (st) return report_status(st, "toy");
    st = run_config(cfg, toy_opts);
    const std::string dir = output_dir(cfg);
    tsfuse_config_free(cfg);
    if (st == TSFUSE_OK || st == TSFUSE_PARTIAL) {
      std::printf("per-type test MSE (mean over seeds):\n");
      print_file(dir + "/tables/per_type_mse.csv");
      std::printf("method comparison:\n");
      print_file(dir + "/tables/comparison.csv");
    }
    return st;
  }

  if (*gradcheck) {
    struct Ctx {
      bool verbose;
    } ctx{gc_verbose};
    auto line = [](const char* text, void* user) {
      if (static_cast<Ctx*>(user)->verbose || std::string(text).rfind("FAIL", 0) == 0) std::printf("%s\n", text);
    };
    size_t failures = 0;
    const int st = tsfuse_gradcheck(gc_seeds, gc_tol, line, &ctx, &failures);
    if (st == TSFUSE_OK) std::printf("gradient checks passed\n");
    return report_status(st, "gradcheck");
  }

  if (*report) {
    const int st = tsfuse_report(report_dir.c_str());
    if (st) return report_status(st, "report");
    std::printf("plots written to %s/plots\n", report_dir.c_str());
    return 0;
  }
  return 0;
}
