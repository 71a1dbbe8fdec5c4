/* C interface to pmp-core: partitioning message passing for graph fraud detection. */

#ifndef PMP_H
#define PMP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PMP_OK 0

#define PMP_ERR_NULL_ARGUMENT 1

#define PMP_ERR_VALIDATION 2

#define PMP_ERR_NUMERIC 3

#define PMP_ERR_RESOURCE_CAP 4

#define PMP_ERR_PANIC 5

#define PMP_SPLIT_TRAIN 0

#define PMP_SPLIT_VAL 1

#define PMP_SPLIT_TEST 2

// A loaded or generated graph with node features, labels and splits.
typedef struct PmpBundle PmpBundle;

// A trained or loaded model.
typedef struct PmpModel PmpModel;

// Threshold metrics plus AUC for one split.
typedef struct PmpMetrics {
  double auc;
  double f1_macro;
  double g_mean;
  double threshold;
  size_t tp;
  size_t fp;
  size_t tn;
  size_t fn_;
} PmpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent call on this thread; empty after success.
// The pointer stays valid until the next pmp_* call on the same thread.
const char *pmp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *pmp_version(void);

// Loads a bundle directory.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
int32_t pmp_bundle_load(const char *dir, struct PmpBundle **out);

// Generates a synthetic bundle from a JSON object with the `pmp synth`
// options (`nodes`, `attach`, `fraud_fraction`, `dim`, `mu_benign`,
// `mu_fraud`, `sigma`, `relations`, `train`, `val`, `test`,
// `plant_fraud_links`, `seed`); every field is required.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
int32_t pmp_bundle_synth(const char *config_json, struct PmpBundle **out);

// Shape of a bundle. Any output pointer may be NULL.
//
// # Safety
// `bundle` must be a live handle.
int32_t pmp_bundle_info(const struct PmpBundle *bundle,
                        size_t *num_nodes,
                        size_t *num_relations,
                        size_t *feature_dim);

// Copies the 0/1 labels of all nodes into `out` (length `len` ≥ node count).
//
// # Safety
// `bundle` must be a live handle; `out` must hold `len` bytes.
int32_t pmp_bundle_labels(const struct PmpBundle *bundle, uint8_t *out, size_t len);

// Imbalance-corrected homophily of one relation (`relation < 0`: union).
//
// # Safety
// `bundle` must be a live handle; `out` must be writable.
int32_t pmp_bundle_homophily(const struct PmpBundle *bundle, int64_t relation, double *out);

// # Safety
// `bundle` must be NULL or a handle not yet freed.
void pmp_bundle_free(struct PmpBundle *bundle);

// Trains a model on `bundle`. `config_json` is a run configuration object
// as written by `pmp train` into `config.json` (NULL or "{}" for defaults).
//
// # Safety
// `bundle` must be a live handle; `config_json` NULL or NUL-terminated;
// `out` writable.
int32_t pmp_model_train(const struct PmpBundle *bundle,
                        const char *config_json,
                        struct PmpModel **out);

// Loads the `model` checkpoint of a run directory.
//
// # Safety
// `dir` must be NUL-terminated; `out` writable.
int32_t pmp_model_load(const char *dir, struct PmpModel **out);

// Writes the model as the `model` checkpoint into `dir` (created if needed).
//
// # Safety
// `model` must be a live handle; `dir` NUL-terminated.
int32_t pmp_model_save(const struct PmpModel *model, const char *dir);

// Fraud probabilities for `count` node indices, written to `out`.
//
// # Safety
// Handles must be live; `nodes` and `out` must hold `count` elements.
int32_t pmp_model_predict(const struct PmpModel *model,
                          const struct PmpBundle *bundle,
                          const size_t *nodes,
                          size_t count,
                          double *out);

// Metrics on one split (`PMP_SPLIT_*`).
//
// # Safety
// Handles must be live; `out` writable.
int32_t pmp_model_evaluate(const struct PmpModel *model,
                           const struct PmpBundle *bundle,
                           int32_t split,
                           struct PmpMetrics *out);

// # Safety
// `model` must be NULL or a handle not yet freed.
void pmp_model_free(struct PmpModel *model);

// ROC AUC of `scores` against 0/1 `labels` (average ranks for ties).
//
// # Safety
// `scores` and `labels` must hold `count` elements; `out` writable.
int32_t pmp_auc(const double *scores, const uint8_t *labels, size_t count, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PMP_H */
