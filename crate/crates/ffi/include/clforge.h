#ifndef CLFORGE_H
#define CLFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Pixels in one image or mask (32 × 32).
 */
#define CLFORGE_IMAGE_LEN 1024

typedef enum ClforgeStatus {
  CLFORGE_STATUS_OK = 0,
  CLFORGE_STATUS_NULL_POINTER = 1,
  CLFORGE_STATUS_INVALID_ARGUMENT = 2,
  CLFORGE_STATUS_OUT_OF_RANGE = 3,
  CLFORGE_STATUS_IO = 4,
  CLFORGE_STATUS_FORMAT = 5,
  CLFORGE_STATUS_CONFIG = 6,
  CLFORGE_STATUS_DIVERGENCE = 7,
  CLFORGE_STATUS_UTF8 = 8,
  CLFORGE_STATUS_PANIC = 9,
  CLFORGE_STATUS_INTERNAL = 10,
} ClforgeStatus;

/**
 * A trained continual-learning run. Only ever handled through a pointer.
 */
typedef struct ClforgeState ClforgeState;

/**
 * Outcome of an adapter allocation query.
 */
typedef struct ClforgeAllocation {
  /**
   * 1 when an existing adapter would be reused, 0 when a new one would be created.
   */
  uint8_t reuse;
  /**
   * The adapter that would be used (for a new adapter, the id it would receive).
   */
  size_t adapter;
  /**
   * Most similar previous task; only meaningful when `reuse` is 1.
   */
  size_t task;
  /**
   * Best cosine similarity to any previous prompt, 0 when there is none.
   */
  double similarity;
} ClforgeAllocation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL after a success.
 *
 * The pointer stays valid until the next `clforge_*` call on the same thread.
 */
const char *clforge_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *clforge_version(void);

/**
 * Loads a run checkpoint. On success `*out` owns a handle to release with
 * [`clforge_state_free`]; on failure `*out` is set to NULL.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ClforgeStatus clforge_state_load(const char *path, struct ClforgeState **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `state` must come from [`clforge_state_load`] and must not be used afterwards.
 */
void clforge_state_free(struct ClforgeState *state);

/**
 * Number of tasks trained so far.
 *
 * # Safety
 * `state` must be a live handle and `out` writable.
 */
enum ClforgeStatus clforge_state_num_tasks(const struct ClforgeState *state, size_t *out);

/**
 * Number of adapters in the bank.
 *
 * # Safety
 * `state` must be a live handle and `out` writable.
 */
enum ClforgeStatus clforge_state_num_adapters(const struct ClforgeState *state, size_t *out);

/**
 * Adapter that serves `task`.
 *
 * # Safety
 * `state` must be a live handle and `out` writable.
 */
enum ClforgeStatus clforge_state_task_adapter(const struct ClforgeState *state,
                                              size_t task,
                                              size_t *out);

/**
 * Foreground probabilities for a 32×32 image, using the prompt and adapter of `task`.
 * `image` and `out` hold [`CLFORGE_IMAGE_LEN`] row-major values each.
 *
 * # Safety
 * `image` must be readable and `out` writable for `len` doubles.
 */
enum ClforgeStatus clforge_state_predict(const struct ClforgeState *state,
                                         size_t task,
                                         const double *image,
                                         double *out,
                                         size_t len);

/**
 * Test Dice of `task` after training stage `stage` (`stage >= task`).
 *
 * # Safety
 * `state` must be a live handle and `out` writable.
 */
enum ClforgeStatus clforge_state_result(const struct ClforgeState *state,
                                        size_t stage,
                                        size_t task,
                                        double *out);

/**
 * Average forgetting rate in percent over all tasks but the last.
 *
 * # Safety
 * `state` must be a live handle and `out` writable.
 */
enum ClforgeStatus clforge_state_forgetting(const struct ClforgeState *state, double *out);

/**
 * Cosine similarity of two prompts under the run's text encoder.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated strings and `out` writable.
 */
enum ClforgeStatus clforge_state_similarity(const struct ClforgeState *state,
                                            const char *a,
                                            const char *b,
                                            double *out);

/**
 * Which adapter a new task with `prompt` would get at threshold `tau`. Nothing is modified.
 *
 * # Safety
 * `prompt` must be a NUL-terminated string and `out` writable.
 */
enum ClforgeStatus clforge_state_allocate(const struct ClforgeState *state,
                                          const char *prompt,
                                          double tau,
                                          struct ClforgeAllocation *out);

/**
 * Dice coefficient of two equal-length masks.
 *
 * # Safety
 * `pred` and `gt` must be readable for `len` doubles and `out` writable.
 */
enum ClforgeStatus clforge_dice(const double *pred, const double *gt, size_t len, double *out);

/**
 * Sampling weight of buffer `task` while training stage `t_current`.
 *
 * # Safety
 * `out` must be writable.
 */
enum ClforgeStatus clforge_replay_weight(size_t task,
                                         size_t t_current,
                                         double fisher_avg,
                                         double boost_alpha,
                                         double *out);

/**
 * Difficulty weight of a sample with `loss` given the task's maximum loss.
 *
 * # Safety
 * `out` must be writable.
 */
enum ClforgeStatus clforge_difficulty_weight(double loss, double max_loss, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLFORGE_H */
