#ifndef MEMFUSE_H
#define MEMFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum MfStatus {
  MF_STATUS_OK = 0,
  MF_STATUS_NULL_ARGUMENT = 1,
  MF_STATUS_INVALID_UTF8 = 2,
  MF_STATUS_DIMENSION = 3,
  MF_STATUS_PARAMETER = 4,
  MF_STATUS_DEGENERATE_INPUT = 5,
  MF_STATUS_VOCABULARY = 6,
  MF_STATUS_VALIDATION = 7,
  MF_STATUS_PARSE = 8,
  MF_STATUS_CAPACITY = 9,
  MF_STATUS_TAPE = 10,
  MF_STATUS_VERSION = 11,
  MF_STATUS_TRUNCATED = 12,
  MF_STATUS_CHECKSUM = 13,
  MF_STATUS_SHAPE = 14,
  MF_STATUS_DIVERGENCE = 15,
  MF_STATUS_CONFIG = 16,
  MF_STATUS_IO = 17,
  MF_STATUS_PANIC = 18,
} MfStatus;

/*
 Opaque model handle.
 */
typedef struct MfModel MfModel;

/*
 Opaque evaluation report handle.
 */
typedef struct MfReport MfReport;

/*
 Aggregate metrics of a report. `rr` is meaningful only when `rr_defined` is true.
 */
typedef struct MfMetrics {
  double accuracy;
  double f1;
  double rr;
  bool rr_defined;
  double krs;
  size_t samples;
} MfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *mf_version(void);

/*
 Message of the most recent failure on this thread, empty after a success.
 The pointer stays valid until the next library call on this thread.
 */
const char *mf_last_error(void);

/*
 Releases a string returned by the library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void mf_string_free(char *s);

/*
 Creates a freshly initialized model. `config_toml` may be null for the defaults.

 # Safety
 `config_toml` is null or a NUL-terminated string; `out` is writable.
 */
enum MfStatus mf_model_new(const char *config_toml, struct MfModel **out);

/*
 Trains a model on a JSONL dataset.

 # Safety
 String arguments are null (config only) or NUL-terminated; `out` is writable.
 */
enum MfStatus mf_model_train(const char *config_toml,
                             const char *dataset_path,
                             struct MfModel **out);

/*
 Loads a checkpoint. `*out` is untouched on failure.

 # Safety
 `path` is NUL-terminated; `out` is writable.
 */
enum MfStatus mf_model_load(const char *path, struct MfModel **out);

/*
 # Safety
 `model` is a live handle; `path` is NUL-terminated.
 */
enum MfStatus mf_model_save(const struct MfModel *model, const char *path);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` comes from this library and has not been freed.
 */
void mf_model_free(struct MfModel *model);

/*
 Number of scalar parameters, 0 for a null handle.

 # Safety
 `model` is null or a live handle.
 */
size_t mf_model_num_parameters(const struct MfModel *model);

/*
 Answers `query` over `n_docs` documents. `*out_text` receives a string to
 release with [`mf_string_free`]; `*out_rejected` is set when the output
 opens with the refusal token.

 # Safety
 `model` is live; `query` and each of `docs[0..n_docs]` are NUL-terminated;
 out pointers are writable.
 */
enum MfStatus mf_model_answer(const struct MfModel *model,
                              const char *query,
                              const char *const *docs,
                              size_t n_docs,
                              char **out_text,
                              bool *out_rejected);

/*
 Evaluates a model on a JSONL dataset.

 # Safety
 `model` is live; `dataset_path` is NUL-terminated; `out` is writable.
 */
enum MfStatus mf_model_evaluate(const struct MfModel *model,
                                const char *dataset_path,
                                struct MfReport **out);

/*
 # Safety
 `report` is live; `out` is writable.
 */
enum MfStatus mf_report_metrics(const struct MfReport *report, struct MfMetrics *out);

/*
 Full report as JSON; release with [`mf_string_free`].

 # Safety
 `report` is live; `out` is writable.
 */
enum MfStatus mf_report_json(const struct MfReport *report, char **out);

/*
 # Safety
 `report` comes from this library and has not been freed.
 */
void mf_report_free(struct MfReport *report);

/*
 Writes `train.jsonl`, `val.jsonl` and `test.jsonl` under `out_dir`.
 `generator_toml` may be null for the defaults.

 # Safety
 String arguments are null (generator only) or NUL-terminated.
 */
enum MfStatus mf_generate_corpus(const char *generator_toml, const char *out_dir);

/*
 Temperature softmax of `n` scores into `out`.

 # Safety
 `scores` and `out` hold `n` values.
 */
enum MfStatus mf_softmax(const double *scores, size_t n, double tau, double *out);

/*
 Cosine similarity of two `n`-vectors.

 # Safety
 `a` and `b` hold `n` values; `out` is writable.
 */
enum MfStatus mf_cosine_similarity(const double *a, const double *b, size_t n, double *out);

/*
 Default model configuration as TOML; release with [`mf_string_free`].
 */
char *mf_default_config(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEMFUSE_H */
