#ifndef TESSERA_H
#define TESSERA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  TESSERA_STATUS_OK = 0,
  TESSERA_STATUS_NULL_ARGUMENT = 1,
  TESSERA_STATUS_INVALID_ARGUMENT = 2,
  TESSERA_STATUS_CONTRACT = 3,
  TESSERA_STATUS_MISSING_MAP = 4,
  TESSERA_STATUS_PATTERN_REQUIRED = 5,
  TESSERA_STATUS_CONFIG = 6,
  TESSERA_STATUS_SCHEMA = 7,
  TESSERA_STATUS_NON_FINITE = 8,
  TESSERA_STATUS_IMAGE = 9,
  TESSERA_STATUS_IO = 10,
  TESSERA_STATUS_BUFFER_TOO_SMALL = 11,
  TESSERA_STATUS_PANIC = 12,
} TesseraStatus;

/**
 * Generator loaded from a checkpoint.
 */
typedef struct TesseraGenerator TesseraGenerator;

/**
 * Material maps with their optional condition pattern.
 */
typedef struct TesseraMaterial TesseraMaterial;

typedef struct {
  size_t out_resolution;
  size_t out_channels;
  size_t pattern_channels;
  size_t latent_dim;
  /**
   * Nonzero when sampling needs a condition pattern.
   */
  uint8_t conditional;
} TesseraGeneratorInfo;

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *tessera_last_error(void);

void tessera_clear_error(void);

/**
 * Static, NUL-terminated crate version.
 */
const char *tessera_version(void);

/**
 * Loads the generator (EMA weights when `use_ema` is nonzero) from a
 * training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
TesseraStatus tessera_generator_load(const char *path, uint8_t use_ema, TesseraGenerator **out);

/**
 * # Safety
 * `gen` must come from [`tessera_generator_load`] and not be used afterwards.
 */
void tessera_generator_free(TesseraGenerator *gen);

/**
 * # Safety
 * `gen` must be a live handle and `info` a writable pointer.
 */
TesseraStatus tessera_generator_info(const TesseraGenerator *gen, TesseraGeneratorInfo *info);

/**
 * Samples one material. Conditional generators need `pattern`, a
 * `pattern_channels x resolution x resolution` array in `[0, 1]`, row-major;
 * unconditional ones take null and `resolution` 0 for the training size.
 *
 * # Safety
 * `gen` must be a live handle, `pattern` null or readable for
 * `pattern_len` floats, and `out` writable.
 */
TesseraStatus tessera_generator_sample(const TesseraGenerator *gen,
                                       uint64_t seed,
                                       const float *pattern,
                                       size_t pattern_len,
                                       size_t resolution,
                                       TesseraMaterial **out);

/**
 * Reads a material directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
TesseraStatus tessera_material_load(const char *dir, TesseraMaterial **out);

/**
 * Writes the maps, pattern and metadata as a material directory.
 *
 * # Safety
 * `mat` must be a live handle and `dir` a NUL-terminated string.
 */
TesseraStatus tessera_material_save(const TesseraMaterial *mat, const char *dir);

/**
 * # Safety
 * `mat` must come from this library and not be used afterwards.
 */
void tessera_material_free(TesseraMaterial *mat);

/**
 * Channel count and spatial size of the maps.
 *
 * # Safety
 * `mat` must be a live handle; the outputs must be writable.
 */
TesseraStatus tessera_material_shape(const TesseraMaterial *mat,
                                     size_t *channels,
                                     size_t *height,
                                     size_t *width);

/**
 * Copies the maps, channel-major, into `buf` of `len` floats.
 *
 * # Safety
 * `mat` must be a live handle and `buf` writable for `len` floats.
 */
TesseraStatus tessera_material_copy_maps(const TesseraMaterial *mat, float *buf, size_t len);

/**
 * Repeats the maps `nx` by `ny` times into a new handle.
 *
 * # Safety
 * `mat` must be a live handle and `out` writable.
 */
TesseraStatus tessera_material_tile(const TesseraMaterial *mat,
                                    size_t nx,
                                    size_t ny,
                                    TesseraMaterial **out);

/**
 * Mean absolute jump across the wrap edges over the mean absolute jump
 * between interior neighbors; near 1 for tileable maps.
 *
 * # Safety
 * `mat` must be a live handle and `score` writable.
 */
TesseraStatus tessera_material_seam_score(const TesseraMaterial *mat, double *score);

/**
 * Renders the maps under the default flash into `buf`, an RGB
 * `3 x H x W` array of `len` floats in `[0, 1]`.
 *
 * # Safety
 * `mat` must be a live handle and `buf` writable for `len` floats.
 */
TesseraStatus tessera_material_render(const TesseraMaterial *mat, float *buf, size_t len);

#endif  /* TESSERA_H */
