#ifndef ICM_H
#define ICM_H

/* Generated by cbindgen from the icm-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define ICM_OK 0

#define ICM_ERR_USAGE 2

#define ICM_ERR_DATA 3

#define ICM_ERR_MODEL 4

/**
 * Opaque handle to a loaded model (pipeline + parameters).
 */
typedef struct IcmModel IcmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *icm_last_error_message(void);

/**
 * Load a trained model from a checkpoint file. `backbone_path` may be null
 * for models trained from scratch; all other modes need the pretrained
 * backbone file the checkpoint references.
 *
 * # Safety
 * `ckpt_path` (and `backbone_path` when non-null) must be valid C strings;
 * `out_model` must be a valid pointer.
 */
int32_t icm_model_load(const char *ckpt_path,
                       const char *backbone_path,
                       struct IcmModel **out_model);

/**
 * Free a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer returned by `icm_model_load` (or null) and must
 * not be used afterwards.
 */
void icm_model_free(struct IcmModel *model);

/**
 * Task identifier of a loaded model ("semseg", "depth", "normal",
 * "boundary" or "saliency"); the pointer is static.
 *
 * # Safety
 * `model` must be a valid handle.
 */
const char *icm_model_task(const struct IcmModel *model);

/**
 * Generate a deterministic synthetic scene and write its image into
 * `out_image` as `3 * height * width` doubles in (channel, row, col) order.
 *
 * # Safety
 * `out_image` must point to at least `3 * height * width` doubles.
 */
int32_t icm_scene_generate(uint64_t seed,
                           uintptr_t height,
                           uintptr_t width,
                           uintptr_t k_shapes,
                           double *out_image);

/**
 * Compress one image (`3 * height * width` doubles, (c, y, x) order) into a
 * standalone bitstream. The buffer written to `out_bytes` must be freed with
 * `icm_bytes_free`.
 *
 * # Safety
 * `model` must be a valid handle, `image` must point to `3 * height * width`
 * doubles, and `out_bytes` / `out_len` must be valid pointers.
 */
int32_t icm_compress(struct IcmModel *model,
                     const double *image,
                     uintptr_t height,
                     uintptr_t width,
                     uint8_t lambda_index,
                     uint8_t **out_bytes,
                     uintptr_t *out_len);

/**
 * Decompress a bitstream into the model's dense prediction. On success
 * `out_pred` holds `channels * height * width` doubles ((c, y, x) order,
 * free with `icm_doubles_free`) and the dims are written to the out
 * parameters.
 *
 * # Safety
 * `model` must be a valid handle, `bytes` must point to `len` readable
 * bytes, and all out pointers must be valid.
 */
int32_t icm_decompress(struct IcmModel *model,
                       const uint8_t *bytes,
                       uintptr_t len,
                       double **out_pred,
                       uintptr_t *out_channels,
                       uintptr_t *out_height,
                       uintptr_t *out_width);

/**
 * Free a byte buffer returned by this library.
 *
 * # Safety
 * `(ptr, len)` must come from a successful `icm_compress`; null is a no-op.
 */
void icm_bytes_free(uint8_t *ptr, uintptr_t len);

/**
 * Free a double buffer returned by this library.
 *
 * # Safety
 * `(ptr, len)` must come from a successful `icm_decompress` with
 * `len = channels * height * width`; null is a no-op.
 */
void icm_doubles_free(double *ptr, uintptr_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICM_H */
