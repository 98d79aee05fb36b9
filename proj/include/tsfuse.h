#ifndef TSFUSE_H
#define TSFUSE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TSFUSE_API __declspec(dllexport)
#else
#define TSFUSE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum tsfuse_status {
  TSFUSE_OK = 0,
  TSFUSE_ERR_CONFIG = 2,
  TSFUSE_PARTIAL = 3,    /* some runs failed numerically */
  TSFUSE_ALL_FAILED = 4, /* every run failed numerically */
  TSFUSE_ERR_INVALID_ARGUMENT = 10,
  TSFUSE_ERR_IO = 11,
  TSFUSE_ERR_DATA = 12,
  TSFUSE_ERR_SHAPE = 13,
  TSFUSE_ERR_NUMERIC = 14,
  TSFUSE_ERR_INTERNAL = 99
} tsfuse_status;

typedef struct tsfuse_config tsfuse_config;
typedef struct tsfuse_dataset tsfuse_dataset;
typedef struct tsfuse_model tsfuse_model;

/* Receives one line of progress or result text. */
typedef void (*tsfuse_line_fn)(const char* line, void* user);

TSFUSE_API const char* tsfuse_version(void);
TSFUSE_API const char* tsfuse_status_name(int status);
/* Message of the last failed call on this thread, "" if none. */
TSFUSE_API const char* tsfuse_last_error(void);
TSFUSE_API void tsfuse_string_free(char* s);

/* ---- experiment configuration ---- */

TSFUSE_API int tsfuse_config_load(const char* path, tsfuse_config** out);
TSFUSE_API int tsfuse_config_parse(const char* yaml, const char* base_dir, tsfuse_config** out);
/* Toy study: none, additive@middle and cfa(r=8) over `repeats` seeds. */
TSFUSE_API int tsfuse_config_toy(size_t repeats, tsfuse_config** out);
TSFUSE_API void tsfuse_config_free(tsfuse_config* config);

TSFUSE_API int tsfuse_config_set_output(tsfuse_config* config, const char* dir);
TSFUSE_API int tsfuse_config_set_workers(tsfuse_config* config, size_t workers);
TSFUSE_API int tsfuse_config_set_seed(tsfuse_config* config, uint64_t seed);
TSFUSE_API int tsfuse_config_set_sweep(tsfuse_config* config, int enabled);
TSFUSE_API int tsfuse_config_digest(const tsfuse_config* config, uint64_t* out);
/* Normalized config as JSON; free with tsfuse_string_free. */
TSFUSE_API int tsfuse_config_json(const tsfuse_config* config, char** out);
TSFUSE_API int tsfuse_config_output(const tsfuse_config* config, char** out);

/* Runs every (setting, seed, fusion, multiplier) and writes the bundle.
   Returns TSFUSE_OK, TSFUSE_PARTIAL or TSFUSE_ALL_FAILED on completion. */
TSFUSE_API int tsfuse_run(const tsfuse_config* config, tsfuse_line_fn progress, void* user, size_t* failed_runs,
                          size_t* total_runs);
TSFUSE_API int tsfuse_aggregate(const char* const* bundle_dirs, size_t count, const char* out_dir);
TSFUSE_API int tsfuse_report(const char* bundle_dir);

/* Central-difference gradient checks. One line per case and seed. */
TSFUSE_API int tsfuse_gradcheck(size_t seeds, double tolerance, tsfuse_line_fn line, void* user, size_t* failures);

/* ---- datasets ---- */

/* frequency: "daily", "weekly", "monthly" or "toy". */
TSFUSE_API int tsfuse_dataset_load(const char* series_path, const char* embedding_path, const char* frequency,
                                   tsfuse_dataset** out);
TSFUSE_API int tsfuse_dataset_toy(uint64_t seed, size_t length, size_t text_dim, tsfuse_dataset** out);
TSFUSE_API void tsfuse_dataset_free(tsfuse_dataset* dataset);
TSFUSE_API size_t tsfuse_dataset_length(const tsfuse_dataset* dataset);
TSFUSE_API size_t tsfuse_dataset_channels(const tsfuse_dataset* dataset);
TSFUSE_API size_t tsfuse_dataset_text_dim(const tsfuse_dataset* dataset);
TSFUSE_API int tsfuse_dataset_save(const tsfuse_dataset* dataset, const char* series_path,
                                   const char* embedding_path);

/* ---- models ---- */

typedef struct tsfuse_model_spec {
  const char* backbone; /* "mlp" or "dlinear" */
  const char* fusion;   /* label such as "none", "additive@middle", "cfa(r=8)" */
  size_t lookback;
  size_t horizon;
  size_t channels;
  size_t hidden;
  size_t layers;
  size_t kernel;
  size_t text_dim;
  int center;
} tsfuse_model_spec;

TSFUSE_API tsfuse_model_spec tsfuse_model_spec_default(void);
TSFUSE_API int tsfuse_model_create(const tsfuse_model_spec* spec, uint64_t seed, tsfuse_model** out);
TSFUSE_API void tsfuse_model_free(tsfuse_model* model);
TSFUSE_API int tsfuse_model_param_count(const tsfuse_model* model, uint64_t* total, uint64_t* fusion);
TSFUSE_API int tsfuse_model_flops(const tsfuse_model* model, size_t batch, uint64_t* total, uint64_t* fusion);
/* x: batch*lookback*channels, text: batch*lookback*text_dim (ignored without
   fusion), out: batch*horizon*channels; all row-major. */
TSFUSE_API int tsfuse_model_predict(const tsfuse_model* model, const double* x, const double* text, size_t batch,
                                    double* out);
TSFUSE_API int tsfuse_model_save(const tsfuse_model* model, const char* path);
TSFUSE_API int tsfuse_model_load(const char* path, const tsfuse_model_spec* spec, tsfuse_model** out);

#ifdef __cplusplus
}
#endif

#endif
