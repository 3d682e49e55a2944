#ifndef PGCR_H
#define PGCR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PgcrStatus {
  PGCR_STATUS_OK = 0,
  PGCR_STATUS_NULL_POINTER = 1,
  PGCR_STATUS_INVALID_ARGUMENT = 2,
  PGCR_STATUS_SHAPE = 3,
  PGCR_STATUS_IO = 4,
  PGCR_STATUS_CHECKPOINT = 5,
  PGCR_STATUS_DATA = 6,
  PGCR_STATUS_NON_FINITE = 7,
  PGCR_STATUS_PANIC = 8,
  PGCR_STATUS_OTHER = 9,
} PgcrStatus;

/**
 * A loaded discriminator.
 */
typedef struct PgcrDiscriminator PgcrDiscriminator;

/**
 * A loaded generator.
 */
typedef struct PgcrGenerator PgcrGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *pgcr_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *pgcr_version(void);

/**
 * Loads a generator checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum PgcrStatus pgcr_generator_load(const char *path, struct PgcrGenerator **out);

/**
 * # Safety
 * `handle` must come from [`pgcr_generator_load`] and not be used afterwards.
 */
void pgcr_generator_free(struct PgcrGenerator *handle);

/**
 * Side length of the square images the generator produces, or 0 for null.
 *
 * # Safety
 * `handle` must be null or a live generator.
 */
size_t pgcr_generator_image_size(const struct PgcrGenerator *handle);

/**
 * Removes clouds from a `width`×`height` image. Larger inputs are centre
 * cropped to the generator's size `S`; `out` receives `S·S·3` bytes.
 *
 * # Safety
 * `rgb` must hold `width·height·3` bytes and `out` at least `out_len`.
 */
enum PgcrStatus pgcr_generator_run(const struct PgcrGenerator *handle,
                                   const uint8_t *rgb,
                                   size_t width,
                                   size_t height,
                                   uint8_t *out,
                                   size_t out_len);

/**
 * Loads a discriminator checkpoint into `*out`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum PgcrStatus pgcr_discriminator_load(const char *path, struct PgcrDiscriminator **out);

/**
 * # Safety
 * `handle` must come from [`pgcr_discriminator_load`] and not be used
 * afterwards.
 */
void pgcr_discriminator_free(struct PgcrDiscriminator *handle);

/**
 * Number of patch scores per image, or 0 for null.
 *
 * # Safety
 * `handle` must be null or a live discriminator.
 */
size_t pgcr_discriminator_num_patches(const struct PgcrDiscriminator *handle);

/**
 * Per-patch probabilities that an image is real, in raster patch order.
 * The image must match the discriminator's grid exactly.
 *
 * # Safety
 * `rgb` must hold `width·height·3` bytes and `scores` at least `scores_len`
 * floats.
 */
enum PgcrStatus pgcr_discriminator_run(const struct PgcrDiscriminator *handle,
                                       const uint8_t *rgb,
                                       size_t width,
                                       size_t height,
                                       float *scores,
                                       size_t scores_len);

/**
 * PSNR in dB between two images of the same size; identical images give
 * positive infinity.
 *
 * # Safety
 * `a` and `b` must each hold `width·height·3` bytes; `out` must be writable.
 */
enum PgcrStatus pgcr_psnr(const uint8_t *a,
                          const uint8_t *b,
                          size_t width,
                          size_t height,
                          double *out);

/**
 * Mean SSIM between two images of the same size, at least 11×11.
 *
 * # Safety
 * `a` and `b` must each hold `width·height·3` bytes; `out` must be writable.
 */
enum PgcrStatus pgcr_ssim(const uint8_t *a,
                          const uint8_t *b,
                          size_t width,
                          size_t height,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGCR_H */
