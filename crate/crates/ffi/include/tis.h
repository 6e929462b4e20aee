#ifndef TIS_H
#define TIS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TisStatus {
  TIS_STATUS_OK = 0,
  TIS_STATUS_NULL_ARGUMENT = 1,
  TIS_STATUS_INVALID_ARGUMENT = 2,
  TIS_STATUS_IO = 3,
  TIS_STATUS_FORMAT = 4,
  TIS_STATUS_MISSING_CHECKPOINT = 5,
  TIS_STATUS_CONFLICT = 6,
  TIS_STATUS_BUFFER_SIZE = 7,
  TIS_STATUS_NO_GROUND_TRUTH = 8,
  TIS_STATUS_INTERNAL = 9,
} TisStatus;

/**
 * A loaded encoder/refiner pair. Safe to share between sessions.
 */
typedef struct TisModel TisModel;

/**
 * One volume with its click history. Not thread-safe.
 */
typedef struct TisSession TisSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tis_last_error(void);

/**
 * Loads `encoder.ckpt` and the refiner for `ablation` from
 * `checkpoint_dir`. `config_path` may be null for the default
 * configuration; `ablation` may be null for the full model.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum TisStatus tis_model_load(const char *checkpoint_dir,
                              const char *config_path,
                              const char *ablation,
                              struct TisModel **out);

/**
 * # Safety
 * `model` must come from [`tis_model_load`] and not be used afterwards.
 */
void tis_model_free(struct TisModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum TisStatus tis_model_classes(const struct TisModel *model, uint32_t *out);

/**
 * Starts a session from a volume file and an optional label file
 * (`gt_path` may be null).
 *
 * # Safety
 * `model` must be live, paths null or NUL-terminated, `out` writable.
 */
enum TisStatus tis_session_new(const struct TisModel *model,
                               const char *volume_path,
                               const char *gt_path,
                               struct TisSession **out);

/**
 * Starts a session from `h*w*d` intensities laid out x fastest.
 *
 * # Safety
 * `data` must point to `h*w*d` floats; `model` live; `out` writable.
 */
enum TisStatus tis_session_new_from_data(const struct TisModel *model,
                                         const float *data,
                                         uint32_t h,
                                         uint32_t w,
                                         uint32_t d,
                                         struct TisSession **out);

/**
 * # Safety
 * `session` must come from a `tis_session_new*` call and not be used
 * afterwards.
 */
void tis_session_free(struct TisSession *session);

/**
 * Appends a click and refines from the whole click list.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum TisStatus tis_session_add_click(struct TisSession *session,
                                     uint32_t x,
                                     uint32_t y,
                                     uint32_t z,
                                     uint8_t category);

/**
 * Drops the last click; fails with `Conflict` when there is none.
 *
 * # Safety
 * `session` must be a live handle.
 */
enum TisStatus tis_session_undo(struct TisSession *session);

/**
 * Number of clicks applied so far.
 *
 * # Safety
 * `session` must be live and `out` writable.
 */
enum TisStatus tis_session_steps(const struct TisSession *session, uint32_t *out);

/**
 * Writes the volume extents `[h, w, d]` into `out`.
 *
 * # Safety
 * `session` must be live and `out` must hold three values.
 */
enum TisStatus tis_session_dims(const struct TisSession *session, uint32_t *out);

/**
 * Copies the current mask (one class byte per voxel, x fastest) into
 * `buf`, which must hold exactly `h*w*d` bytes.
 *
 * # Safety
 * `session` must be live and `buf` writable for `len` bytes.
 */
enum TisStatus tis_session_mask(const struct TisSession *session, uint8_t *buf, size_t len);

/**
 * Per-class Dice of the current mask against the session's ground truth;
 * `buf` must hold exactly one value per class.
 *
 * # Safety
 * `session` must be live and `buf` writable for `len` doubles.
 */
enum TisStatus tis_session_dice(const struct TisSession *session, double *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TIS_H */
