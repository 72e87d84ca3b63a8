/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef GRADLEAK_H
#define GRADLEAK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function in this interface.
typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_INVALID_ARGUMENT = 2,
  GL_STATUS_SHAPE = 3,
  GL_STATUS_CHECKPOINT = 4,
  GL_STATUS_IO = 5,
  GL_STATUS_CONFIG = 6,
  GL_STATUS_NUMERIC = 7,
  GL_STATUS_PANIC = 8,
} GlStatus;

// Deduplicated IR candidates recovered from an update.
typedef struct GlCandidates GlCandidates;

// A classifier: feature extractor plus head.
typedef struct GlModel GlModel;

// A head gradient update as uploaded by a client.
typedef struct GlUpdate GlUpdate;

// Summary of an entropy scan.
typedef struct GlScanSummary {
  bool anomalous;
  double min_entropy;
  double p3_entropy;
  size_t flagged_vectors;
  size_t total_vectors;
  uint64_t checksum;
} GlScanSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *gl_version(void);

// Copies the calling thread's last error message into `buf` (always
// NUL-terminated when `cap > 0`) and returns the full message length.
//
// # Safety
// `buf` must be null or valid for `cap` bytes.
size_t gl_last_error(char *buf, size_t cap);

// Loads a classifier checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
enum GlStatus gl_model_load(const char *path, struct GlModel **out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from [`gl_model_load`] not yet freed.
void gl_model_free(struct GlModel *model);

// Length of the model's intermediate representation.
//
// # Safety
// Pointers must be null or valid.
enum GlStatus gl_model_ir_dim(const struct GlModel *model, size_t *out);

// Entropy scan of every weight vector.
//
// # Safety
// Pointers must be null or valid.
enum GlStatus gl_model_scan(const struct GlModel *model,
                            double bin_width,
                            double threshold,
                            struct GlScanSummary *out);

// Writes `n * ir_dim` IR values for `n` images of shape `[C,H,W]` laid out
// contiguously in `images`.
//
// # Safety
// `images` must hold `images_len` values; `out` must hold `out_len`.
enum GlStatus gl_model_irs(const struct GlModel *model,
                           const double *images,
                           size_t images_len,
                           double *out,
                           size_t out_len);

// Loads a gradient update checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
enum GlStatus gl_update_load(const char *path, struct GlUpdate **out);

// # Safety
// `update` must be null or a live handle.
void gl_update_free(struct GlUpdate *update);

// Global L2 norm over all tensors of the update.
//
// # Safety
// Pointers must be null or valid.
enum GlStatus gl_update_l2_norm(const struct GlUpdate *update, double *out);

// Clips the update to `clip` and adds Gaussian noise calibrated to
// `(epsilon, delta)`, producing a new handle.
//
// # Safety
// Pointers must be null or valid.
enum GlStatus gl_update_apply_dp(const struct GlUpdate *update,
                                 double epsilon,
                                 double delta,
                                 double clip,
                                 uint64_t seed,
                                 struct GlUpdate **out);

// Noise scale of the Gaussian mechanism.
//
// # Safety
// `out` must be null or valid for writes.
enum GlStatus gl_dp_sigma(double epsilon, double delta, double clip, double *out);

// Recovers candidate IRs from the update and merges near-duplicates.
//
// # Safety
// Pointers must be null or valid.
enum GlStatus gl_extract_candidates(const struct GlUpdate *update,
                                    double tol,
                                    double cos_threshold,
                                    struct GlCandidates **out);

// # Safety
// `cands` must be null or a live handle.
void gl_candidates_free(struct GlCandidates *cands);

// Number of candidates; 0 for a null handle.
//
// # Safety
// `cands` must be null or a live handle.
size_t gl_candidates_len(const struct GlCandidates *cands);

// Copies candidate `index` into `buf` and reports its source column and
// bias-gradient magnitude.
//
// # Safety
// `buf` must hold `cap` values; the other out-pointers must be null or valid.
enum GlStatus gl_candidates_get(const struct GlCandidates *cands,
                                size_t index,
                                double *buf,
                                size_t cap,
                                size_t *out_column,
                                double *out_bias_grad);

// Normalized entropy of one weight vector.
//
// # Safety
// `values` must hold `len` values; `out` must be null or valid.
enum GlStatus gl_normalized_entropy(const double *values,
                                    size_t len,
                                    double bin_width,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADLEAK_H */
