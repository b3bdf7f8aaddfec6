#ifndef PETDIFF_H
#define PETDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum PdStatus {
  PD_OK = 0,
  /**
   * A required pointer argument was null or a string was not UTF-8.
   */
  PD_ERR_ARGUMENT = 1,
  PD_ERR_CONFIG = 2,
  PD_ERR_DATA = 3,
  PD_ERR_NUMERIC = 4,
  PD_ERR_IO = 5,
  /**
   * The library panicked; the handle arguments should not be reused.
   */
  PD_ERR_INTERNAL = 6,
} PdStatus;

/**
 * Label volume.
 */
typedef struct PdLabels PdLabels;

/**
 * Trained model loaded from a checkpoint.
 */
typedef struct PdModel PdModel;

/**
 * SUV volume.
 */
typedef struct PdVolume PdVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * success. Valid until the next call on the same thread.
 */
const char *pd_last_error(void);

/**
 * Library version as a static string.
 */
const char *pd_version(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void pd_string_free(char *s);

/**
 * Builds a volume from `dims[0]·dims[1]·dims[2]` values, x fastest.
 *
 * # Safety
 * `dims` and `voxel_mm` point to three values each, `data` to `len`
 * floats, `out` to writable storage.
 */
enum PdStatus pd_volume_new(const size_t *dims,
                            const double *voxel_mm,
                            const float *data,
                            size_t len,
                            struct PdVolume **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PdStatus pd_volume_read(const char *path, struct PdVolume **out);

/**
 * # Safety
 * `volume` is a live handle; `path` is a NUL-terminated string.
 */
enum PdStatus pd_volume_write(const struct PdVolume *volume, const char *path);

/**
 * Writes `[nx, ny, nz]` into `dims`.
 *
 * # Safety
 * `volume` is a live handle; `dims` has room for three values.
 */
enum PdStatus pd_volume_dims(const struct PdVolume *volume, size_t *dims);

/**
 * Copies the voxel values; `len` must equal the voxel count.
 *
 * # Safety
 * `volume` is a live handle; `buf` has room for `len` floats.
 */
enum PdStatus pd_volume_copy_data(const struct PdVolume *volume, float *buf, size_t len);

/**
 * # Safety
 * `volume` is null or a handle not yet freed.
 */
void pd_volume_free(struct PdVolume *volume);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PdStatus pd_labels_read(const char *path, struct PdLabels **out);

/**
 * # Safety
 * `labels` is a live handle; `path` is a NUL-terminated string.
 */
enum PdStatus pd_labels_write(const struct PdLabels *labels, const char *path);

/**
 * Copies the class indices; `len` must equal the voxel count.
 *
 * # Safety
 * `labels` is a live handle; `buf` has room for `len` bytes.
 */
enum PdStatus pd_labels_copy_data(const struct PdLabels *labels, uint8_t *buf, size_t len);

/**
 * # Safety
 * `labels` is null or a handle not yet freed.
 */
void pd_labels_free(struct PdLabels *labels);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PdStatus pd_model_load(const char *path, struct PdModel **out);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void pd_model_free(struct PdModel *model);

/**
 * Denoises a low-count volume patch by patch (`[x, y, z]` sizes).
 * `one_step` selects the single-estimate path instead of the full chain.
 *
 * # Safety
 * Handles are live; `patch` and `stride` point to three values; `out` is writable.
 */
enum PdStatus pd_denoise(const struct PdModel *model,
                         const struct PdVolume *low_count,
                         const size_t *patch,
                         const size_t *stride,
                         bool one_step,
                         uint64_t seed,
                         struct PdVolume **out);

/**
 * Full inference: revised full-range image and fused labels.
 *
 * # Safety
 * Handles are live; `patch` and `stride` point to three values; outputs are writable.
 */
enum PdStatus pd_segment(const struct PdModel *model,
                         const struct PdVolume *low_count,
                         const size_t *patch,
                         const size_t *stride,
                         bool one_step,
                         uint64_t seed,
                         struct PdVolume **revised_out,
                         struct PdLabels **labels_out);

/**
 * MTV in mL and TLG of the lesion class (label 1).
 *
 * # Safety
 * Handles are live; outputs are writable.
 */
enum PdStatus pd_quantify(const struct PdVolume *image,
                          const struct PdLabels *labels,
                          double *mtv_ml,
                          double *tlg);

/**
 * Full quantification report as JSON; release it with `pd_string_free`.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum PdStatus pd_quantify_json(const struct PdVolume *image,
                               const struct PdLabels *labels,
                               char **out);

/**
 * Whole-volume NRMSE of `pred` against `reference`.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum PdStatus pd_nrmse(const struct PdVolume *pred, const struct PdVolume *reference, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PETDIFF_H */
