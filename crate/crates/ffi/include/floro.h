#ifndef FLORO_H
#define FLORO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FloroStatus {
  FLORO_STATUS_OK = 0,
  FLORO_STATUS_NULL_POINTER = 1,
  FLORO_STATUS_INVALID_ARGUMENT = 2,
  FLORO_STATUS_BUFFER_TOO_SMALL = 3,
  FLORO_STATUS_SHAPE = 4,
  FLORO_STATUS_CONTRACT = 5,
  FLORO_STATUS_NUMERIC = 6,
  FLORO_STATUS_DOMAIN = 7,
  FLORO_STATUS_FORMAT = 8,
  FLORO_STATUS_IO = 9,
  FLORO_STATUS_INTERNAL = 10,
} FloroStatus;

/**
 * Frozen encoder loaded from a checkpoint.
 */
typedef struct FloroEncoder FloroEncoder;

/**
 * Token mask of one branch.
 */
typedef struct FloroMaskPlan FloroMaskPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the
 * length the full message needs including the terminator, so a call with
 * `len == 0` sizes the buffer.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t floro_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *floro_version(void);

/**
 * Linear SAR backscatter to decibels, `10 log10(x)`.
 *
 * # Safety
 * `out` must point to one writable double.
 */
enum FloroStatus floro_sar_to_db(double linear, double *out);

/**
 * Normalizes `n` Web Mercator points, given as interleaved `x, y` pairs in
 * `coords`, into `[0, 1]` pairs written to `out` (`2 n` doubles).
 *
 * # Safety
 * `coords` and `out` must each point to `2 n` doubles.
 */
enum FloroStatus floro_normalize_mercator(const double *coords,
                                          size_t n,
                                          double *out,
                                          size_t out_len);

/**
 * Map coordinates of patch centres in row-major order, as interleaved
 * `x, y` pairs (`2 rows cols` doubles).
 *
 * # Safety
 * `gt` must point to six doubles; `out` to `out_len` doubles.
 */
enum FloroStatus floro_patch_centroids(const double *gt,
                                       size_t rows,
                                       size_t cols,
                                       size_t patch_size,
                                       double *out,
                                       size_t out_len);

/**
 * Geographic sin-cos embedding of every patch of a georeferenced chip,
 * `[rows cols, dim]` row-major.
 *
 * # Safety
 * `gt` must point to six doubles; `out` to `out_len` doubles.
 */
enum FloroStatus floro_geo_embedding(const double *gt,
                                     size_t rows,
                                     size_t cols,
                                     size_t patch_size,
                                     size_t dim,
                                     double *out,
                                     size_t out_len);

/**
 * Fixed 2D sin-cos embedding of patch grid positions, `[rows cols, dim]`.
 *
 * # Safety
 * `out` must point to `out_len` doubles.
 */
enum FloroStatus floro_abs_embedding(size_t rows,
                                     size_t cols,
                                     size_t dim,
                                     double *out,
                                     size_t out_len);

/**
 * Loads the encoder part of a checkpoint file. Full checkpoints are
 * accepted; their decoder and optimizer state are dropped.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to a writable
 * handle pointer.
 */
enum FloroStatus floro_encoder_load(const char *path, struct FloroEncoder **out);

/**
 * Length of feature vectors, or 0 for a null handle.
 *
 * # Safety
 * `enc` must be null or a live handle.
 */
size_t floro_encoder_feature_dim(const struct FloroEncoder *enc);

/**
 * Patch size the encoder expects, or 0 for a null handle.
 *
 * # Safety
 * `enc` must be null or a live handle.
 */
size_t floro_encoder_patch_size(const struct FloroEncoder *enc);

/**
 * Mean-pooled features of the chip stored in directory `chip_dir`.
 * With `use_geo` non-zero the geographic encoding is added when the chip
 * is georeferenced.
 *
 * # Safety
 * `enc` must be a live handle, `chip_dir` a NUL-terminated string and
 * `out` must point to `out_len` doubles.
 */
enum FloroStatus floro_encoder_extract(const struct FloroEncoder *enc,
                                       const char *chip_dir,
                                       int use_geo,
                                       double *out,
                                       size_t out_len);

/**
 * Releases an encoder handle. Null is ignored.
 *
 * # Safety
 * `enc` must be null or a handle not yet freed.
 */
void floro_encoder_free(struct FloroEncoder *enc);

/**
 * Mask plan the trainer would draw for `branch` (0 optical, 1 auxiliary)
 * of micro-batch `batch` in `epoch`.
 *
 * # Safety
 * `out` must point to a writable handle pointer.
 */
enum FloroStatus floro_mask_plan_new(size_t len,
                                     double ratio,
                                     uint64_t seed,
                                     size_t epoch,
                                     size_t batch,
                                     int branch,
                                     struct FloroMaskPlan **out);

/**
 * Number of tokens, or 0 for a null handle.
 *
 * # Safety
 * `plan` must be null or a live handle.
 */
size_t floro_mask_plan_len(const struct FloroMaskPlan *plan);

/**
 * Number of visible tokens, or 0 for a null handle.
 *
 * # Safety
 * `plan` must be null or a live handle.
 */
size_t floro_mask_plan_visible_count(const struct FloroMaskPlan *plan);

/**
 * Writes `len` flags, 1 for masked tokens and 0 for visible ones.
 *
 * # Safety
 * `plan` must be a live handle; `out` must point to `out_len` bytes.
 */
enum FloroStatus floro_mask_plan_masked(const struct FloroMaskPlan *plan,
                                        uint8_t *out,
                                        size_t out_len);

/**
 * Writes the token permutation; its first `visible_count` entries are
 * the visible tokens.
 *
 * # Safety
 * `plan` must be a live handle; `out` must point to `out_len` values.
 */
enum FloroStatus floro_mask_plan_shuffle(const struct FloroMaskPlan *plan,
                                         size_t *out,
                                         size_t out_len);

/**
 * Writes the inverse of the shuffle permutation.
 *
 * # Safety
 * `plan` must be a live handle; `out` must point to `out_len` values.
 */
enum FloroStatus floro_mask_plan_restore(const struct FloroMaskPlan *plan,
                                         size_t *out,
                                         size_t out_len);

/**
 * Releases a mask plan handle. Null is ignored.
 *
 * # Safety
 * `plan` must be null or a handle not yet freed.
 */
void floro_mask_plan_free(struct FloroMaskPlan *plan);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLORO_H */
