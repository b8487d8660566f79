#ifndef RACAPNET_H
#define RACAPNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RacapStatus {
  RACAP_STATUS_OK = 0,
  RACAP_STATUS_NULL_POINTER = 1,
  RACAP_STATUS_INVALID_ARGUMENT = 2,
  RACAP_STATUS_IO = 3,
  RACAP_STATUS_CHECKPOINT = 4,
  /**
   * Input violates a model precondition, e.g. sentence too long.
   */
  RACAP_STATUS_CONTRACT = 5,
  RACAP_STATUS_BUFFER_TOO_SMALL = 6,
  RACAP_STATUS_METRIC = 7,
  RACAP_STATUS_PANIC = 8,
  RACAP_STATUS_INTERNAL = 9,
} RacapStatus;

/**
 * Opaque model handle.
 */
typedef struct RacapModel RacapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *racap_version(void);

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library from the same thread.
 */
const char *racap_last_error(void);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RacapStatus racap_model_load(const char *path, struct RacapModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`racap_model_load`] and not be used afterwards.
 */
void racap_model_free(struct RacapModel *model);

/**
 * Number of relation ids, NA (id 0) included. Score buffers must hold this many values.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RacapStatus racap_model_num_relations(const struct RacapModel *model, size_t *out);

/**
 * Maximum sentence length accepted by the model.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RacapStatus racap_model_max_len(const struct RacapModel *model, size_t *out);

/**
 * Copies the name of relation `id` into `buf` with a trailing NUL. `needed`
 * (optional) receives the required size including the NUL; when `buf_len`
 * is too small nothing is written and `RACAP_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `buf` must be writable for `buf_len` bytes; `needed` may be NULL.
 */
enum RacapStatus racap_model_relation_name(const struct RacapModel *model,
                                           size_t id,
                                           char *buf,
                                           size_t buf_len,
                                           size_t *needed);

/**
 * Current decision threshold.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum RacapStatus racap_model_threshold(const struct RacapModel *model, double *out);

/**
 * Relation capsule lengths for one sentence, indexed by relation id.
 * `ent1` and `ent2` are token positions; unknown words map to UNK.
 *
 * # Safety
 * `tokens` must point to `n_tokens` NUL-terminated strings and `out` must
 * be writable for `out_len` doubles.
 */
enum RacapStatus racap_model_scores(const struct RacapModel *model,
                                    const char *const *tokens,
                                    size_t n_tokens,
                                    size_t ent1,
                                    size_t ent2,
                                    double *out,
                                    size_t out_len);

/**
 * Predicted relation set as one flag per relation id (1 = present). NA is
 * flagged alone when no relation clears the threshold.
 *
 * # Safety
 * As for [`racap_model_scores`], with `out` writable for `out_len` bytes.
 */
enum RacapStatus racap_model_predict(const struct RacapModel *model,
                                     const char *const *tokens,
                                     size_t n_tokens,
                                     size_t ent1,
                                     size_t ent2,
                                     uint8_t *out,
                                     size_t out_len);

/**
 * Squash nonlinearity on one vector of length `n`; `out` may alias `v`.
 *
 * # Safety
 * `v` must be readable and `out` writable for `n` doubles.
 */
enum RacapStatus racap_squash(const double *v, size_t n, double *out);

/**
 * Area under the precision-recall curve of `n` ranked predictions.
 * `correct[i]` is non-zero when prediction `i` is a true fact; `total_gold`
 * counts all true facts, including ones never predicted. Ties in `scores`
 * keep input order.
 *
 * # Safety
 * `scores` and `correct` must be readable for `n` elements and `out` writable.
 */
enum RacapStatus racap_pr_area(const double *scores,
                               const uint8_t *correct,
                               size_t n,
                               size_t total_gold,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RACAPNET_H */
