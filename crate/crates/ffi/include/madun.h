/* C ABI for the madun compressive-sensing reconstruction library. */

#ifndef MADUN_H
#define MADUN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every fallible API call.
typedef enum MadunStatus {
  // Success.
  MADUN_STATUS_OK = 0,
  // Tensor or buffer shapes do not line up.
  MADUN_STATUS_SHAPE = 1,
  // An API contract was violated (wrong call order, missing state).
  MADUN_STATUS_CONTRACT = 2,
  // A configuration value is out of range or inconsistent.
  MADUN_STATUS_CONFIG = 3,
  // Input data is unusable.
  MADUN_STATUS_DATA = 4,
  // A checkpoint file is corrupt, truncated, or has an unknown version.
  MADUN_STATUS_CHECKPOINT = 5,
  // An I/O operation failed.
  MADUN_STATUS_IO = 6,
  // A required pointer argument was null.
  MADUN_STATUS_NULL_ARGUMENT = 7,
  // A string argument was not valid UTF-8.
  MADUN_STATUS_INVALID_UTF8 = 8,
  // An internal invariant failed; the handle should be discarded.
  MADUN_STATUS_INTERNAL = 9,
} MadunStatus;

// An opaque, loaded reconstruction model (checkpoint + sampling operator).
typedef struct MadunModel MadunModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the thread-local message of the most recent failure, or an empty
// string when no failure has been recorded. The pointer stays valid until
// the next failing call on the same thread; do not free it.
const char *madun_last_error_message(void);

// Returns the library version as a static NUL-terminated string.
const char *madun_version(void);

// Loads a model checkpoint.
//
// `mask_path` supplies the k-space sampling mask (8-bit PGM, nonzero =
// sampled) for MRI models and must be null for Gaussian models (it is
// ignored there). On success `*out` owns the handle; free it with
// [`madun_model_free`].
//
// # Safety
// `path` (and `mask_path` when non-null) must be NUL-terminated strings;
// `out` must be a valid pointer.
enum MadunStatus madun_model_load(const char *path, const char *mask_path, struct MadunModel **out);

// Releases a model handle. Passing null is a no-op.
//
// # Safety
// `model` must be null or a pointer returned by [`madun_model_load`] that
// has not already been freed.
void madun_model_free(struct MadunModel *model);

// Number of unfolded stages (K). Returns 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t madun_model_stages(const struct MadunModel *model);

// Feature channels per stage (C). Returns 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t madun_model_channels(const struct MadunModel *model);

// Measurement ratio M/N. Returns 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
double madun_model_ratio(const struct MadunModel *model);

// Sampling block edge in pixels for Gaussian models; 0 for MRI models
// (they sample whole images at the mask size) and null handles.
//
// # Safety
// `model` must be null or a live handle.
size_t madun_model_block(const struct MadunModel *model);

// 0 for Gaussian models, 1 for MRI models, -1 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
int32_t madun_model_kind(const struct MadunModel *model);

// Reconstructs one image through the model.
//
// `pixels` holds `height * width` row-major luminance samples on the 8-bit
// scale; the reconstruction is written to `out_pixels` (same layout, same
// size, clamped to [0, 255]). `stride` is the overlapping-block stride for
// Gaussian models (1..=block edge; the published setting is 22) and is
// ignored for MRI models, which require `height`/`width` to equal the mask
// size.
//
// # Safety
// `model` must be a live handle; `pixels` and `out_pixels` must reference
// `height * width` readable/writable doubles.
enum MadunStatus madun_reconstruct(const struct MadunModel *model,
                                   const double *pixels,
                                   size_t height,
                                   size_t width,
                                   size_t stride,
                                   double *out_pixels);

// Peak signal-to-noise ratio between two 8-bit-scale images, in dB, written
// to `*out`. Identical images yield +infinity.
//
// # Safety
// `reference` and `test` must reference `height * width` doubles; `out`
// must be valid.
enum MadunStatus madun_psnr(const double *reference,
                            const double *test,
                            size_t height,
                            size_t width,
                            double *out);

// Structural similarity between two 8-bit-scale images (11×11 Gaussian
// window, σ = 1.5), written to `*out`. Both dimensions must be at least 11.
//
// # Safety
// `reference` and `test` must reference `height * width` doubles; `out`
// must be valid.
enum MadunStatus madun_ssim(const double *reference,
                            const double *test,
                            size_t height,
                            size_t width,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MADUN_H */
