#ifndef CLAMSEG_H
#define CLAMSEG_H

#include <stddef.h>
#include <stdint.h>

typedef enum ClamStatus {
  CLAM_STATUS_OK = 0,
  CLAM_STATUS_NULL_POINTER = 1,
  CLAM_STATUS_INVALID_ARGUMENT = 2,
  CLAM_STATUS_SHAPE = 3,
  CLAM_STATUS_IO = 4,
  CLAM_STATUS_FORMAT = 5,
  CLAM_STATUS_CONFIG = 6,
  CLAM_STATUS_NUMERIC = 7,
  CLAM_STATUS_PANIC = 8,
} ClamStatus;

/*
 Loaded inference model.
 */
typedef struct ClamModel ClamModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message (NUL-terminated, truncated
 to `len`) into `buf`. Returns the full message length excluding the NUL,
 so a call with `len = 0` sizes the buffer.

 # Safety
 `buf` must point to `len` writable bytes, or be null when `len` is 0.
 */
size_t clam_last_error(char *buf, size_t len);

/*
 Library version, a static NUL-terminated string.
 */
const char *clam_version(void);

/*
 Loads a checkpoint from `path` into a new handle stored in `*out`.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ClamStatus clam_model_load(const char *path, struct ClamModel **out);

/*
 Releases a handle from [`clam_model_load`]; null is a no-op.

 # Safety
 `model` must come from [`clam_model_load`] and not be used afterwards.
 */
void clam_model_free(struct ClamModel *model);

/*
 Tile side the model was trained at; image sides must be multiples of it.

 # Safety
 `model` and `out` must be valid pointers.
 */
enum ClamStatus clam_model_tile_size(const struct ClamModel *model, size_t *out);

/*
 Deepest supervision depth available (lower after pruning).

 # Safety
 `model` and `out` must be valid pointers.
 */
enum ClamStatus clam_model_depth_limit(const struct ClamModel *model, size_t *out);

/*
 Marker probabilities for a row-major `side × side` image with values in
 `[0, 1]`. `depth = 0` selects the model's default depth. Writes
 `side * side` floats to `out`.

 # Safety
 `pixels` and `out` must each hold `side * side` floats.
 */
enum ClamStatus clam_model_probability(const struct ClamModel *model,
                                       const float *pixels,
                                       size_t side,
                                       size_t depth,
                                       float *out);

/*
 Binary marker mask (0 or 1 per pixel) at `threshold`.

 # Safety
 `pixels` must hold `side * side` floats and `out` as many bytes.
 */
enum ClamStatus clam_model_infer(const struct ClamModel *model,
                                 const float *pixels,
                                 size_t side,
                                 size_t depth,
                                 float threshold,
                                 uint8_t *out);

/*
 Hybrid loss of channel-major maps: `classes` planes of `pixels` values
 each, targets and predictions in `[0, 1]`.

 # Safety
 `target` and `pred` must each hold `classes * pixels` floats.
 */
enum ClamStatus clam_hybrid_loss(const float *target,
                                 const float *pred,
                                 size_t classes,
                                 size_t pixels,
                                 double *out);

/*
 Dice overlap of two `len`-byte masks (nonzero = foreground); 1.0 when
 both are empty.

 # Safety
 `a` and `b` must each hold `len` bytes.
 */
enum ClamStatus clam_dice(const uint8_t *a, const uint8_t *b, size_t len, double *out);

/*
 Intersection over union of two `len`-byte masks; 1.0 when both are empty.

 # Safety
 `a` and `b` must each hold `len` bytes.
 */
enum ClamStatus clam_iou(const uint8_t *a, const uint8_t *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLAMSEG_H */
