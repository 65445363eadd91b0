/* C interface for the georefine depth/normal refiner. */

#ifndef GEOREFINE_H
#define GEOREFINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define GRF_OK 0

/**
 * A required pointer argument was null.
 */
#define GRF_ERR_NULL 1

/**
 * The checkpoint could not be read or is not a valid checkpoint.
 */
#define GRF_ERR_FORMAT 2

/**
 * Buffer extents are unusable (zero, overflowing, or not divisible by the
 * model's token cell).
 */
#define GRF_ERR_SHAPE 3

/**
 * Inference failed at runtime (non-finite values, internal panic).
 */
#define GRF_ERR_RUNTIME 4

/**
 * Opaque handle owning a loaded refiner model.
 */
typedef struct grf_refiner grf_refiner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on the calling thread, as a
 * NUL-terminated string. Empty if no call has failed yet. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *grf_last_error(void);

/**
 * Load a refiner from a checkpoint file.
 *
 * On success writes a handle to `*out` and returns `GRF_OK`. The handle
 * must be released with `grf_refiner_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer.
 */
int32_t grf_refiner_load(const char *path, struct grf_refiner **out);

/**
 * Release a handle returned by `grf_refiner_load`. Null is a no-op.
 *
 * # Safety
 * `handle` must be null or a pointer returned by `grf_refiner_load` that
 * has not been freed yet.
 */
void grf_refiner_free(struct grf_refiner *handle);

/**
 * Refine one frame.
 *
 * Inputs: `rgb` and `coarse_normal` are `[3 * h * w]`, `coarse_depth` is
 * `[h * w]`; see the module docs for the layout. Outputs are written to
 * `out_depth` (`[h * w]`) and `out_normal` (`[3 * h * w]`, unit vectors).
 * `h` and `w` must be divisible by the model's token cell.
 *
 * # Safety
 * All pointers must be non-null and the buffers behind them at least the
 * sizes stated above; `out_depth` and `out_normal` must be writable.
 */
int32_t grf_refiner_infer(const struct grf_refiner *handle,
                          const float *rgb,
                          const float *coarse_depth,
                          const float *coarse_normal,
                          uintptr_t h,
                          uintptr_t w,
                          float *out_depth,
                          float *out_normal);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOREFINE_H */
