#include "tsfuse.h"

#include <cstring>
#include <exception>
#include <filesystem>
#include <new>
#include <string>

#include "tsfuse/error.hpp"
#include "tsfuse/experiment.hpp"

struct tsfuse_config {
  tsfuse::ExperimentConfig value;
};

struct tsfuse_dataset {
  tsfuse::MultimodalDataset value;
};

struct tsfuse_model {
  tsfuse::ForecastModel value;
};

namespace {

thread_local std::string g_last_error;

int fail(int status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename F>
int guarded(F&& body) {
  g_last_error.clear();
  try {
    return body();
  } catch (const tsfuse::ConfigError& e) {
    return fail(TSFUSE_ERR_CONFIG, e.what());
  } catch (const tsfuse::IoError& e) {
    return fail(TSFUSE_ERR_IO, e.what());
  } catch (const tsfuse::DataError& e) {
    return fail(TSFUSE_ERR_DATA, e.what());
  } catch (const tsfuse::ShapeError& e) {
    return fail(TSFUSE_ERR_SHAPE, e.what());
  } catch (const tsfuse::NumericError& e) {
    return fail(TSFUSE_ERR_NUMERIC, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(TSFUSE_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(TSFUSE_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(TSFUSE_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(TSFUSE_ERR_INTERNAL, "unknown error");
  }
}

#define REQUIRE(cond, what) \
  if (!(cond)) return fail(TSFUSE_ERR_INVALID_ARGUMENT, what)

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

tsfuse::ModelConfig to_model_config(const tsfuse_model_spec& s) {
  tsfuse::ModelConfig c;
  c.backbone.kind = tsfuse::parse_backbone(s.backbone ? s.backbone : "mlp");
  c.backbone.lookback = s.lookback;
  c.backbone.horizon = s.horizon;
  c.backbone.channels = s.channels;
  c.backbone.hidden = s.hidden;
  c.backbone.layers = s.layers;
  c.backbone.kernel = s.kernel;
  c.backbone.center = s.center != 0;
  c.fusion = tsfuse::FusionSpec::parse(s.fusion ? s.fusion : "none");
  c.text_dim = s.text_dim;
  c.validate();
  return c;
}

}  // namespace

extern "C" {

const char* tsfuse_version(void) { return tsfuse::kToolVersion; }

const char* tsfuse_status_name(int status) {
  switch (status) {
    case TSFUSE_OK: return "ok";
    case TSFUSE_ERR_CONFIG: return "config error";
    case TSFUSE_PARTIAL: return "some runs failed";
    case TSFUSE_ALL_FAILED: return "all runs failed";
    case TSFUSE_ERR_INVALID_ARGUMENT: return "invalid argument";
    case TSFUSE_ERR_IO: return "i/o error";
    case TSFUSE_ERR_DATA: return "data error";
    case TSFUSE_ERR_SHAPE: return "shape error";
    case TSFUSE_ERR_NUMERIC: return "numeric error";
    default: return "internal error";
  }
}

const char* tsfuse_last_error(void) { return g_last_error.c_str(); }

void tsfuse_string_free(char* s) { std::free(s); }

int tsfuse_config_load(const char* path, tsfuse_config** out) {
  REQUIRE(path && out, "path and out must be non-null");
  return guarded([&] {
    *out = new tsfuse_config{tsfuse::ExperimentConfig::load(path)};
    return TSFUSE_OK;
  });
}

int tsfuse_config_parse(const char* yaml, const char* base_dir, tsfuse_config** out) {
  REQUIRE(yaml && out, "yaml and out must be non-null");
  return guarded([&] {
    *out = new tsfuse_config{tsfuse::ExperimentConfig::parse(yaml, base_dir ? base_dir : ".")};
    return TSFUSE_OK;
  });
}

int tsfuse_config_toy(size_t repeats, tsfuse_config** out) {
  REQUIRE(out, "out must be non-null");
  REQUIRE(repeats > 0, "repeats must be > 0");
  return guarded([&] {
    *out = new tsfuse_config{tsfuse::ExperimentConfig::toy_study(repeats)};
    return TSFUSE_OK;
  });
}

void tsfuse_config_free(tsfuse_config* config) { delete config; }

int tsfuse_config_set_output(tsfuse_config* config, const char* dir) {
  REQUIRE(config && dir && *dir, "config and a non-empty dir are required");
  config->value.output_dir = dir;
  return TSFUSE_OK;
}

int tsfuse_config_set_workers(tsfuse_config* config, size_t workers) {
  REQUIRE(config && workers > 0, "config must be non-null and workers > 0");
  config->value.workers = workers;
  return TSFUSE_OK;
}

int tsfuse_config_set_seed(tsfuse_config* config, uint64_t seed) {
  REQUIRE(config, "config must be non-null");
  config->value.seed = seed;
  return TSFUSE_OK;
}

int tsfuse_config_set_sweep(tsfuse_config* config, int enabled) {
  REQUIRE(config, "config must be non-null");
  config->value.sweep = enabled != 0;
  return TSFUSE_OK;
}

int tsfuse_config_digest(const tsfuse_config* config, uint64_t* out) {
  REQUIRE(config && out, "config and out must be non-null");
  return guarded([&] {
    *out = config->value.digest();
    return TSFUSE_OK;
  });
}

int tsfuse_config_json(const tsfuse_config* config, char** out) {
  REQUIRE(config && out, "config and out must be non-null");
  return guarded([&] {
    *out = dup_string(config->value.to_json().dump(2));
    return TSFUSE_OK;
  });
}

int tsfuse_config_output(const tsfuse_config* config, char** out) {
  REQUIRE(config && out, "config and out must be non-null");
  return guarded([&] {
    *out = dup_string(config->value.output_dir);
    return TSFUSE_OK;
  });
}

int tsfuse_run(const tsfuse_config* config, tsfuse_line_fn progress, void* user, size_t* failed_runs,
               size_t* total_runs) {
  REQUIRE(config, "config must be non-null");
  return guarded([&] {
    tsfuse::ProgressFn fn;
    if (progress) fn = [&](const std::string& line) { progress(line.c_str(), user); };
    const auto outcome = tsfuse::run_experiment(config->value, fn);
    if (failed_runs) *failed_runs = outcome.failed_runs;
    if (total_runs) *total_runs = outcome.total_runs;
    if (outcome.exit_code == 4) g_last_error = "every run failed numerically";
    else if (outcome.exit_code == 3) g_last_error = std::to_string(outcome.failed_runs) + " runs failed numerically";
    return outcome.exit_code;
  });
}

int tsfuse_aggregate(const char* const* bundle_dirs, size_t count, const char* out_dir) {
  REQUIRE(bundle_dirs && count > 0 && out_dir, "at least one bundle and an output dir are required");
  std::vector<std::string> dirs;
  for (size_t i = 0; i < count; ++i) {
    REQUIRE(bundle_dirs[i], "bundle path must be non-null");
    dirs.emplace_back(bundle_dirs[i]);
  }
  return guarded([&] {
    tsfuse::aggregate_bundles(dirs, out_dir);
    return TSFUSE_OK;
  });
}

int tsfuse_report(const char* bundle_dir) {
  REQUIRE(bundle_dir, "bundle_dir must be non-null");
  return guarded([&] {
    tsfuse::write_report(bundle_dir);
    return TSFUSE_OK;
  });
}

int tsfuse_gradcheck(size_t seeds, double tolerance, tsfuse_line_fn line, void* user, size_t* failures) {
  REQUIRE(seeds > 0 && tolerance > 0, "seeds and tolerance must be positive");
  return guarded([&] {
    const auto results = tsfuse::gradient_suite(seeds, tolerance);
    size_t bad = 0;
    for (const auto& r : results) {
      if (!r.passed) ++bad;
      if (line) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s %s seed=%llu err=%.3e", r.passed ? "ok  " : "FAIL", r.name.c_str(),
                      static_cast<unsigned long long>(r.seed), r.error);
        line(buf, user);
      }
    }
    if (failures) *failures = bad;
    if (bad) return fail(TSFUSE_ERR_NUMERIC, std::to_string(bad) + " gradient checks exceeded tolerance");
    return static_cast<int>(TSFUSE_OK);
  });
}

int tsfuse_dataset_load(const char* series_path, const char* embedding_path, const char* frequency,
                        tsfuse_dataset** out) {
  REQUIRE(series_path && embedding_path && frequency && out, "paths, frequency and out must be non-null");
  return guarded([&] {
    tsfuse::SeriesSchema schema{std::filesystem::path(series_path).stem().string(),
                                tsfuse::parse_frequency(frequency)};
    *out = new tsfuse_dataset{tsfuse::load_dataset(series_path, embedding_path, schema)};
    return TSFUSE_OK;
  });
}

int tsfuse_dataset_toy(uint64_t seed, size_t length, size_t text_dim, tsfuse_dataset** out) {
  REQUIRE(out, "out must be non-null");
  return guarded([&] {
    tsfuse::ToyOptions opt;
    opt.length = length;
    opt.text_dim = text_dim;
    *out = new tsfuse_dataset{tsfuse::generate_toy_dataset(seed, opt)};
    return TSFUSE_OK;
  });
}

void tsfuse_dataset_free(tsfuse_dataset* dataset) { delete dataset; }
size_t tsfuse_dataset_length(const tsfuse_dataset* d) { return d ? d->value.length() : 0; }
size_t tsfuse_dataset_channels(const tsfuse_dataset* d) { return d ? d->value.channels() : 0; }
size_t tsfuse_dataset_text_dim(const tsfuse_dataset* d) { return d ? d->value.text_dim() : 0; }

int tsfuse_dataset_save(const tsfuse_dataset* dataset, const char* series_path, const char* embedding_path) {
  REQUIRE(dataset && series_path && embedding_path, "dataset and paths must be non-null");
  return guarded([&] {
    tsfuse::write_series_csv(series_path, dataset->value);
    const bool binary = std::filesystem::path(embedding_path).extension() == ".bin";
    tsfuse::write_embeddings(embedding_path, dataset->value.text,
                             binary ? tsfuse::EmbeddingFormat::kBinary : tsfuse::EmbeddingFormat::kCsv);
    return TSFUSE_OK;
  });
}

tsfuse_model_spec tsfuse_model_spec_default(void) {
  return tsfuse_model_spec{"mlp", "none", 8, 8, 1, 64, 2, 25, 32, 0};
}

int tsfuse_model_create(const tsfuse_model_spec* spec, uint64_t seed, tsfuse_model** out) {
  REQUIRE(spec && out, "spec and out must be non-null");
  return guarded([&] {
    *out = new tsfuse_model{tsfuse::ForecastModel(to_model_config(*spec), seed)};
    return TSFUSE_OK;
  });
}

void tsfuse_model_free(tsfuse_model* model) { delete model; }

int tsfuse_model_param_count(const tsfuse_model* model, uint64_t* total, uint64_t* fusion) {
  REQUIRE(model, "model must be non-null");
  return guarded([&] {
    const auto card = tsfuse::count_params(model->value.config());
    if (total) *total = card.parameters;
    if (fusion) *fusion = card.fusion_parameters;
    return TSFUSE_OK;
  });
}

int tsfuse_model_flops(const tsfuse_model* model, size_t batch, uint64_t* total, uint64_t* fusion) {
  REQUIRE(model && batch > 0, "model must be non-null and batch > 0");
  return guarded([&] {
    const auto card = tsfuse::count_flops(model->value.config(), batch);
    if (total) *total = card.flops;
    if (fusion) *fusion = card.fusion_flops;
    return TSFUSE_OK;
  });
}

int tsfuse_model_predict(const tsfuse_model* model, const double* x, const double* text, size_t batch,
                         double* out) {
  REQUIRE(model && x && out && batch > 0, "model, x, out must be non-null and batch > 0");
  const auto& c = model->value.config();
  const bool fused = c.fusion.strategy != tsfuse::Strategy::kNone;
  REQUIRE(text || !fused, "fused models need text");
  return guarded([&] {
    const std::size_t L = c.backbone.lookback, C = c.backbone.channels, Dt = c.text_dim;
    tsfuse::Tensor tx({batch, L, C}, std::vector<double>(x, x + batch * L * C));
    tsfuse::Tensor tt;
    if (fused) tt = tsfuse::Tensor({batch, L, Dt}, std::vector<double>(text, text + batch * L * Dt));
    const auto y = model->value.predict(tx, tt);
    std::copy(y.data().begin(), y.data().end(), out);
    return TSFUSE_OK;
  });
}

int tsfuse_model_save(const tsfuse_model* model, const char* path) {
  REQUIRE(model && path, "model and path must be non-null");
  return guarded([&] {
    tsfuse::save_checkpoint(path, model->value);
    return TSFUSE_OK;
  });
}

int tsfuse_model_load(const char* path, const tsfuse_model_spec* spec, tsfuse_model** out) {
  REQUIRE(path && spec && out, "path, spec and out must be non-null");
  return guarded([&] {
    *out = new tsfuse_model{tsfuse::load_checkpoint(path, to_model_config(*spec))};
    return TSFUSE_OK;
  });
}

}  // extern "C"
