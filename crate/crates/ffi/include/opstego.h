#ifndef OPSTEGO_H
#define OPSTEGO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum OpstegoStatus {
  OPSTEGO_STATUS_OK = 0,
  OPSTEGO_STATUS_NULL_POINTER = 1,
  OPSTEGO_STATUS_INVALID_ARGUMENT = 2,
  OPSTEGO_STATUS_IO = 3,
  OPSTEGO_STATUS_FORMAT = 4,
  OPSTEGO_STATUS_CONFIG = 5,
  OPSTEGO_STATUS_LAYOUT = 6,
  OPSTEGO_STATUS_DIMENSION = 7,
  OPSTEGO_STATUS_DATA = 8,
  OPSTEGO_STATUS_NUMERIC = 9,
  OPSTEGO_STATUS_STATE = 10,
  OPSTEGO_STATUS_IMAGE = 11,
  OPSTEGO_STATUS_PANIC = 12,
} OpstegoStatus;

/**
 * Opaque model handle.
 */
typedef struct OpstegoModel OpstegoModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OpstegoStatus opstego_model_load(const char *path, struct OpstegoModel **out);

/**
 * Creates an untrained model with default settings except the given sizes.
 *
 * # Safety
 * `out` must be writable.
 */
enum OpstegoStatus opstego_model_new(uint32_t l_ms,
                                     uint32_t n_r,
                                     uint32_t height,
                                     uint32_t width,
                                     uint32_t window,
                                     uint64_t seed,
                                     struct OpstegoModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum OpstegoStatus opstego_model_save(const struct OpstegoModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void opstego_model_free(struct OpstegoModel *model);

/**
 * Image height, width and message length in bits of a model.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be writable.
 */
enum OpstegoStatus opstego_model_dims(const struct OpstegoModel *model,
                                      size_t *height,
                                      size_t *width,
                                      size_t *bits);

/**
 * Bits per pixel carried by segment length `l_ms` and element range `n_r`.
 *
 * # Safety
 * `out` must be writable.
 */
enum OpstegoStatus opstego_capacity_bpp(uint32_t l_ms, uint32_t n_r, double *out);

/**
 * Conceals `bits` in `cover` and writes the quantized stego image to `stego_out`.
 *
 * # Safety
 * Buffers must be valid for their stated lengths.
 */
enum OpstegoStatus opstego_conceal(const struct OpstegoModel *model,
                                   const uint8_t *cover,
                                   size_t cover_len,
                                   const uint8_t *bits,
                                   size_t bits_len,
                                   uint8_t *stego_out,
                                   size_t stego_len);

/**
 * Recovers the message carried by `stego` into `bits_out`, one byte per bit.
 *
 * # Safety
 * Buffers must be valid for their stated lengths.
 */
enum OpstegoStatus opstego_recover(const struct OpstegoModel *model,
                                   const uint8_t *stego,
                                   size_t stego_len,
                                   uint8_t *bits_out,
                                   size_t bits_len);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t opstego_last_error(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPSTEGO_H */
