#ifndef FAITHSPLAT_H
#define FAITHSPLAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum FsStatus {
  FS_STATUS_OK = 0,
  FS_STATUS_NULL_POINTER = 1,
  FS_STATUS_IO = 2,
  FS_STATUS_PARSE = 3,
  FS_STATUS_VERSION = 4,
  FS_STATUS_MISSING_POSE = 5,
  FS_STATUS_SHAPE = 6,
  FS_STATUS_INVALID_ARGUMENT = 7,
  FS_STATUS_UNKNOWN_KEY = 8,
  FS_STATUS_BAD_VALUE = 9,
  FS_STATUS_DIVERGED = 10,
  FS_STATUS_RESTORER = 11,
  FS_STATUS_OTHER = 12,
  FS_STATUS_BUFFER_TOO_SMALL = 13,
  FS_STATUS_PANIC = 14,
} FsStatus;

/**
 * Opaque Fisher ledger handle.
 */
typedef struct FsLedger FsLedger;

/**
 * Opaque scene handle.
 */
typedef struct FsScene FsScene;

/**
 * Pinhole camera. `rotation` is the row-major world-to-camera rotation and
 * `translation` the world-to-camera translation; +x right, +y down, +z
 * forward.
 */
typedef struct FsCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
  double rotation[9];
  double translation[3];
  uint32_t timestamp;
} FsCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread; empty if none. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *fs_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fs_version(void);

/**
 * Camera at the origin looking down +z with a centered principal point.
 */
struct FsCamera fs_camera_looking_forward(uint32_t width, uint32_t height, double focal);

/**
 * Load a scene from a `.fsplat` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FsStatus fs_scene_load(const char *path, struct FsScene **out);

/**
 * Build a static scene from `count` packed parameter blocks of
 * `fs_param_dim(sh_degree)` values each, all in the background group.
 *
 * # Safety
 * `params` must hold `count * fs_param_dim(sh_degree)` values, `sky` three
 * values, and `out` must be writable.
 */
enum FsStatus fs_scene_from_params(const double *params,
                                   size_t count,
                                   uint8_t sh_degree,
                                   const double *sky,
                                   struct FsScene **out);

/**
 * Parameters per Gaussian for an SH degree in 0..=2, or 0 otherwise.
 */
size_t fs_param_dim(uint8_t sh_degree);

/**
 * Number of Gaussians in the scene; 0 for a null handle.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
size_t fs_scene_len(const struct FsScene *scene);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void fs_scene_free(struct FsScene *scene);

/**
 * Render `camera` at its timestamp. `color` receives `3·w·h` values;
 * `depth` and `opacity` receive `w·h` values each and may be null.
 *
 * # Safety
 * Handles must be live and each non-null buffer must hold its stated length.
 */
enum FsStatus fs_render(const struct FsScene *scene,
                        const struct FsCamera *camera,
                        double *color,
                        size_t color_len,
                        double *depth,
                        size_t depth_len,
                        double *opacity,
                        size_t opacity_len);

/**
 * Load a ledger from a `.fledg` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FsStatus fs_ledger_load(const char *path, struct FsLedger **out);

/**
 * Accumulate and finalize a ledger over `count` training cameras.
 *
 * # Safety
 * `scene` must be live, `cameras` must hold `count` cameras and `out` must
 * be writable.
 */
enum FsStatus fs_ledger_build(const struct FsScene *scene,
                              const struct FsCamera *cameras,
                              size_t count,
                              struct FsLedger **out);

/**
 * Number of ledger entries (one per Gaussian); 0 for a null handle.
 *
 * # Safety
 * `ledger` must be null or a live handle.
 */
size_t fs_ledger_len(const struct FsLedger *ledger);

/**
 * # Safety
 * `ledger` must be null or a handle not yet freed.
 */
void fs_ledger_free(struct FsLedger *ledger);

/**
 * Pixel-wise EIG of `camera`. `raw` receives `w·h` values; `normalized`
 * may be null. `scale`, if non-null, receives the normalizer.
 *
 * # Safety
 * Handles must be live and each non-null buffer must hold its stated length.
 */
enum FsStatus fs_eig_map(const struct FsScene *scene,
                         const struct FsLedger *ledger,
                         const struct FsCamera *camera,
                         double *raw,
                         size_t raw_len,
                         double *normalized,
                         size_t normalized_len,
                         double *scale);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAITHSPLAT_H */
