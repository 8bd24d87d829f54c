/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef ADVLAB_H
#define ADVLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum AdvlabStatus {
  ADVLAB_STATUS_OK = 0,
  ADVLAB_STATUS_NULL_POINTER = 1,
  ADVLAB_STATUS_INVALID_ARGUMENT = 2,
  ADVLAB_STATUS_SHAPE = 3,
  ADVLAB_STATUS_CONFIG = 4,
  ADVLAB_STATUS_PARSE = 5,
  ADVLAB_STATUS_IO = 6,
  ADVLAB_STATUS_NUMERICAL = 7,
  ADVLAB_STATUS_MISSING_ARTIFACT = 8,
  ADVLAB_STATUS_FORMAT_VERSION = 9,
  // Output buffer too small; nothing was written.
  ADVLAB_STATUS_BUFFER_TOO_SMALL = 10,
  ADVLAB_STATUS_PANIC = 11,
} AdvlabStatus;

// Opaque experiment config.
typedef struct AdvlabConfig AdvlabConfig;

// Opaque classifier.
typedef struct AdvlabNetwork AdvlabNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null. Owned by the
// library and valid until the next failing call on this thread.
const char *advlab_last_error(void);

// Library version as a static NUL-terminated string.
const char *advlab_version(void);

// Frees a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void advlab_string_free(char *s);

// Loads and validates a TOML experiment config.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum AdvlabStatus advlab_config_load(const char *path, struct AdvlabConfig **out);

// Parses and validates a config from TOML text.
//
// # Safety
// `text` is a NUL-terminated string; `out` is writable.
enum AdvlabStatus advlab_config_from_toml(const char *text, struct AdvlabConfig **out);

// Writes the 64-character hex config hash and a terminating NUL into
// `buf`, which must hold at least 65 bytes.
//
// # Safety
// `cfg` is a live handle; `buf` points to `len` writable bytes.
enum AdvlabStatus advlab_config_hash(const struct AdvlabConfig *cfg, char *buf, size_t len);

// Sets the top-level seed.
//
// # Safety
// `cfg` is a live handle.
enum AdvlabStatus advlab_config_set_seed(struct AdvlabConfig *cfg, uint64_t seed);

// # Safety
// `cfg` is null or a live handle, not used afterwards.
void advlab_config_free(struct AdvlabConfig *cfg);

// Runs the white-box experiment of `cfg` and returns the report as JSON
// (free with [`advlab_string_free`]).
//
// # Safety
// `cfg` is a live handle; `out_json` is writable.
enum AdvlabStatus advlab_run_experiment(const struct AdvlabConfig *cfg, char **out_json);

// Loads a classifier saved as JSON.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum AdvlabStatus advlab_network_load(const char *path, struct AdvlabNetwork **out);

// Trains the classifier of `cfg` on its Train split.
//
// # Safety
// `cfg` is a live handle; `out` is writable.
enum AdvlabStatus advlab_network_train(const struct AdvlabConfig *cfg, struct AdvlabNetwork **out);

// # Safety
// `net` is a live handle; `path` is a NUL-terminated string.
enum AdvlabStatus advlab_network_save(const struct AdvlabNetwork *net, const char *path);

// # Safety
// `net` is null or a live handle, not used afterwards.
void advlab_network_free(struct AdvlabNetwork *net);

// Number of input values (product of the input shape); 0 for null.
//
// # Safety
// `net` is null or a live handle.
size_t advlab_network_input_len(const struct AdvlabNetwork *net);

// Number of classes; 0 for null.
//
// # Safety
// `net` is null or a live handle.
size_t advlab_network_num_classes(const struct AdvlabNetwork *net);

// Class probabilities of one input (row-major, input shape of the
// network) into `probs` (`probs_len >= num_classes`), and the predicted
// class into `out_class` when non-null.
//
// # Safety
// `x` holds `len` values; `probs` holds `probs_len` writable values.
enum AdvlabStatus advlab_network_predict(const struct AdvlabNetwork *net,
                                         const double *x,
                                         size_t len,
                                         double *probs,
                                         size_t probs_len,
                                         size_t *out_class);

// Targeted L∞ attack on one input. `kind` is `fgsm`, `bim`, `pgd`, `mim`,
// `tim` or `cw` (CW with margin cap 0). `alpha <= 0` and
// `iterations == 0` select the defaults for `epsilon`. The AE is written
// to `out_x` (`len` values) and `out_success` tells whether it reaches
// `target`.
//
// # Safety
// `x` and `out_x` hold `len` values; `kind` is NUL-terminated.
enum AdvlabStatus advlab_attack(const struct AdvlabNetwork *net,
                                const char *kind,
                                const double *x,
                                size_t len,
                                size_t target,
                                double epsilon,
                                double alpha,
                                size_t iterations,
                                uint64_t seed,
                                double *out_x,
                                bool *out_success);

// ROC AUC of positive versus negative scores (ties count one half).
//
// # Safety
// `pos` holds `npos` values and `neg` holds `nneg`; `out` is writable.
enum AdvlabStatus advlab_auc(const double *pos,
                             size_t npos,
                             const double *neg,
                             size_t nneg,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVLAB_H */
