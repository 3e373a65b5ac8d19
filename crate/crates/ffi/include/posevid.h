#ifndef POSEVID_H
#define POSEVID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Where the driving poses of a generation come from.
 */
typedef enum PvPoseSource {
  /**
   * The clip's own future poses.
   */
  PV_POSE_SOURCE_SAME = 0,
  /**
   * Another clip's future poses, given by `pose_clip`.
   */
  PV_POSE_SOURCE_OTHER_CLIP = 1,
  /**
   * The last context pose held still.
   */
  PV_POSE_SOURCE_STATIC = 2,
} PvPoseSource;

typedef enum PvSplit {
  PV_SPLIT_TRAIN = 0,
  PV_SPLIT_VAL = 1,
  PV_SPLIT_TEST = 2,
} PvSplit;

/**
 * Result code of every fallible call.
 */
typedef enum PvStatus {
  PV_STATUS_OK = 0,
  PV_STATUS_NULL_ARGUMENT = 1,
  PV_STATUS_INVALID_ARGUMENT = 2,
  PV_STATUS_IO = 3,
  PV_STATUS_FORMAT = 4,
  PV_STATUS_CONFIG = 5,
  PV_STATUS_GEOMETRY = 6,
  PV_STATUS_NUMERIC = 7,
  PV_STATUS_DATA = 8,
  PV_STATUS_PANIC = 9,
} PvStatus;

typedef enum PvVariant {
  PV_VARIANT_FULL_BODY = 0,
  PV_VARIANT_HEAD_ONLY = 1,
  PV_VARIANT_NONE = 2,
  PV_VARIANT_CUMULATIVE_HEAD = 3,
  PV_VARIANT_PER_JOINT_DELTA = 4,
} PvVariant;

/**
 * Opaque dataset handle.
 */
typedef struct PvDataset PvDataset;

/**
 * Opaque model handle.
 */
typedef struct PvModel PvModel;

typedef struct PvDatasetInfo {
  size_t clips;
  size_t width;
  size_t height;
  size_t clip_len;
  size_t context_frames;
} PvDatasetInfo;

typedef struct PvModelInfo {
  size_t d;
  size_t depth;
  size_t past_frames;
  size_t future_frames;
  size_t parameters;
} PvModelInfo;

/**
 * Sampler settings for [`pv_sample`].
 */
typedef struct PvSampleOptions {
  enum PvVariant variant;
  enum PvPoseSource pose_source;
  /**
   * Clip whose poses drive the generation when `pose_source` is `OtherClip`.
   */
  size_t pose_clip;
  uint64_t seed;
  size_t steps;
  double guidance_weight;
} PvSampleOptions;

typedef struct PvMetrics {
  double ssim;
  double trans_error;
  double rot_error;
  double miou;
  double presence_accuracy;
} PvMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pv_version(void);

/**
 * Row-major 4×4 rigid transform to (tx, ty, tz, roll, pitch, yaw).
 *
 * # Safety
 * `matrix` must point to 16 doubles and `out` to 6.
 */
enum PvStatus pv_pose_to_6d(const double *matrix, double *out);

/**
 * Inverse of [`pv_pose_to_6d`].
 *
 * # Safety
 * `v` must point to 6 doubles and `matrix` to 16.
 */
enum PvStatus pv_pose_from_6d(const double *v, double *matrix);

/**
 * Renders a dataset into `out_dir`. `config_toml` may be null for the
 * default configuration.
 *
 * # Safety
 * String arguments must be NUL-terminated or null.
 */
enum PvStatus pv_dataset_generate(const char *config_toml, uint64_t seed, const char *out_dir);

/**
 * Opens a dataset directory.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum PvStatus pv_dataset_open(const char *path, struct PvDataset **out);

/**
 * Releases a dataset handle; null is ignored.
 *
 * # Safety
 * `ds` must come from [`pv_dataset_open`] and not be used afterwards.
 */
void pv_dataset_free(struct PvDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum PvStatus pv_dataset_info(const struct PvDataset *ds, struct PvDatasetInfo *out);

/**
 * Writes up to `capacity` clip ids of `split` into `ids` and their total
 * count into `count`. Pass a null `ids` to query the count.
 *
 * # Safety
 * `ds` must be live; `ids` must hold `capacity` entries when non-null.
 */
enum PvStatus pv_dataset_split(const struct PvDataset *ds,
                               enum PvSplit split,
                               size_t *ids,
                               size_t capacity,
                               size_t *count);

/**
 * Copies every frame of a clip into `out`, which must hold exactly
 * `clip_len · height · width · 3` floats.
 *
 * # Safety
 * `ds` must be live; `out` must hold `len` floats.
 */
enum PvStatus pv_dataset_frames(const struct PvDataset *ds, size_t clip, float *out, size_t len);

/**
 * Loads a checkpoint directory written by the trainer.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be writable.
 */
enum PvStatus pv_model_load(const char *dir, struct PvModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`pv_model_load`] and not be used afterwards.
 */
void pv_model_free(struct PvModel *model);

/**
 * # Safety
 * `model` must be live; `out` must be writable.
 */
enum PvStatus pv_model_info(const struct PvModel *model, struct PvModelInfo *out);

/**
 * Default sampler settings: full-body control from the clip itself, seed
 * 0, 18 steps, guidance weight 2.
 */
struct PvSampleOptions pv_sample_options_default(void);

/**
 * Generates the future frames of `clip` from its context. `out` must hold
 * exactly `future_frames · height · width · 3` floats.
 *
 * # Safety
 * Handles must be live; `opts` readable; `out` must hold `len` floats.
 */
enum PvStatus pv_sample(const struct PvModel *model,
                        const struct PvDataset *ds,
                        size_t clip,
                        const struct PvSampleOptions *opts,
                        float *out,
                        size_t len);

/**
 * SSIM ×100 between two images of `width × height` RGB floats.
 *
 * # Safety
 * `a` and `b` must each hold `width · height · 3` floats; `out` writable.
 */
enum PvStatus pv_ssim(const float *a, const float *b, size_t width, size_t height, double *out);

/**
 * Scores generated future frames of `clip` against its ground truth:
 * SSIM, recovered-camera errors and arm-mask agreement.
 *
 * # Safety
 * `ds` must be live; `frames` must hold `len` floats; `out` writable.
 */
enum PvStatus pv_evaluate_clip(const struct PvDataset *ds,
                               size_t clip,
                               const float *frames,
                               size_t len,
                               struct PvMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSEVID_H */
