#ifndef SKELGUIDE_H
#define SKELGUIDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SkgStatus {
  SKG_STATUS_OK = 0,
  SKG_STATUS_NULL_POINTER = 1,
  SKG_STATUS_INVALID_ARGUMENT = 2,
  SKG_STATUS_DATA = 3,
  SKG_STATUS_NUMERIC = 4,
  SKG_STATUS_IO = 5,
  SKG_STATUS_PANIC = 6,
} SkgStatus;

/**
 * Opaque trained codec.
 */
typedef struct SkgCodec SkgCodec;

/**
 * Opaque RGB image with values in `[0, 1]`.
 */
typedef struct SkgImage SkgImage;

/**
 * Opaque procedural articulated object.
 */
typedef struct SkgObject SkgObject;

/**
 * Orbit camera looking at the origin; angles in radians, focal in pixels.
 */
typedef struct SkgCamera {
  double azimuth;
  double elevation;
  double radius;
  double focal;
  size_t height;
  size_t width;
} SkgCamera;

typedef struct SkgMetrics {
  double l1;
  double psnr;
  double ssim;
} SkgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library from the same thread.
 */
const char *skg_last_error(void);

/**
 * Copies `height * width * 3` interleaved RGB floats into a new image.
 *
 * # Safety
 * `data` must point to that many readable floats; `out` must be writable.
 */
enum SkgStatus skg_image_new(size_t height, size_t width, const float *data, struct SkgImage **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SkgStatus skg_image_load_png(const char *path, struct SkgImage **out);

/**
 * # Safety
 * `image` must be a live handle; `path` a NUL-terminated string.
 */
enum SkgStatus skg_image_save_png(const struct SkgImage *image, const char *path);

/**
 * # Safety
 * `image` must be a live handle; `height` and `width` must be writable.
 */
enum SkgStatus skg_image_dims(const struct SkgImage *image, size_t *height, size_t *width);

/**
 * Copies the pixels into `buffer`, which holds `len` floats (at least `h * w * 3`).
 *
 * # Safety
 * `image` must be a live handle; `buffer` must have room for `len` floats.
 */
enum SkgStatus skg_image_pixels(const struct SkgImage *image, float *buffer, size_t len);

/**
 * # Safety
 * `image` must come from this library and not be used afterwards; null is ignored.
 */
void skg_image_free(struct SkgImage *image);

/**
 * Samples an articulated object from `seed` with the default generator settings.
 *
 * # Safety
 * `out` must be writable.
 */
enum SkgStatus skg_object_sample(uint64_t seed, struct SkgObject **out);

/**
 * # Safety
 * `object` must come from this library and not be used afterwards; null is ignored.
 */
void skg_object_free(struct SkgObject *object);

/**
 * Renders frame `frame` of `object`: the skinned body if `skeleton` is false,
 * otherwise its skeleton.
 *
 * # Safety
 * `object` must be a live handle; `out` must be writable.
 */
enum SkgStatus skg_render(const struct SkgObject *object,
                          size_t frame,
                          struct SkgCamera camera,
                          bool skeleton,
                          struct SkgImage **out);

/**
 * Bounding-box IoU between the foreground of an object render and a skeleton render.
 *
 * # Safety
 * Both images must be live handles; `iou` must be writable.
 */
enum SkgStatus skg_bbox_iou(const struct SkgImage *object_image,
                            const struct SkgImage *skeleton_image,
                            double *iou);

/**
 * Mean absolute error, PSNR (capped at 99 dB) and SSIM between two images.
 *
 * # Safety
 * Both images must be live handles; `out` must be writable.
 */
enum SkgStatus skg_metrics(const struct SkgImage *a,
                           const struct SkgImage *b,
                           struct SkgMetrics *out);

/**
 * One-sided Mann-Whitney U test; `greater` selects "x stochastically greater".
 *
 * # Safety
 * `x` and `y` must point to `nx` and `ny` doubles; `u` and `p` must be writable.
 */
enum SkgStatus skg_mann_whitney_u(const double *x,
                                  size_t nx,
                                  const double *y,
                                  size_t ny,
                                  bool greater,
                                  double *u,
                                  double *p);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SkgStatus skg_codec_load(const char *path, struct SkgCodec **out);

/**
 * Latent shape `(channels, height, width)` of a codec.
 *
 * # Safety
 * `codec` must be a live handle; the outputs must be writable.
 */
enum SkgStatus skg_codec_latent_dims(const struct SkgCodec *codec,
                                     size_t *channels,
                                     size_t *height,
                                     size_t *width);

/**
 * Encodes and decodes `image`.
 *
 * # Safety
 * `codec` and `image` must be live handles; `out` must be writable.
 */
enum SkgStatus skg_codec_roundtrip(const struct SkgCodec *codec,
                                   const struct SkgImage *image,
                                   struct SkgImage **out);

/**
 * # Safety
 * `codec` must come from this library and not be used afterwards; null is ignored.
 */
void skg_codec_free(struct SkgCodec *codec);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKELGUIDE_H */
