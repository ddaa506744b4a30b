#ifndef CRN_FFI_H
#define CRN_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Operation succeeded.
 */
#define CRN_OK 0

/**
 * A required pointer argument was null.
 */
#define CRN_ERR_NULL 1

/**
 * A string argument was not valid UTF-8.
 */
#define CRN_ERR_UTF8 2

/**
 * File could not be read or parsed.
 */
#define CRN_ERR_IO 3

/**
 * Index, step or action out of range.
 */
#define CRN_ERR_RANGE 4

/**
 * Any other failure; see crn_last_error.
 */
#define CRN_ERR_INTERNAL 5

/**
 * Opaque client dataset.
 */
typedef struct CrnDataset CrnDataset;

/**
 * Opaque trained model (checkpoint).
 */
typedef struct CrnModel CrnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; do not free it.
 */
const char *crn_last_error(void);

/**
 * Library version as a static string; do not free.
 */
const char *crn_version(void);

/**
 * Loads a checkpoint file. Returns null on failure (see
 * crn_last_error); free with crn_model_free.
 *
 * # Safety
 * `path` must point to a NUL-terminated string.
 */
struct CrnModel *crn_model_load(const char *path);

/**
 * # Safety
 * `model` must be a pointer from crn_model_load, not yet freed.
 */
void crn_model_free(struct CrnModel *model);

/**
 * Loads a JSONL dataset. Returns null on failure; free with
 * crn_dataset_free.
 *
 * # Safety
 * `path` must point to a NUL-terminated string.
 */
struct CrnDataset *crn_dataset_load(const char *path);

/**
 * # Safety
 * `dataset` must be a pointer from crn_dataset_load, not yet freed.
 */
void crn_dataset_free(struct CrnDataset *dataset);

/**
 * Number of client records in the dataset; 0 if `dataset` is null.
 *
 * # Safety
 * `dataset` must be a live pointer from crn_dataset_load or null.
 */
uintptr_t crn_dataset_len(const struct CrnDataset *dataset);

/**
 * Sequence length (number of steps) of one client record.
 *
 * # Safety
 * `dataset` must be a live pointer from crn_dataset_load.
 */
uintptr_t crn_record_len(const struct CrnDataset *dataset, uintptr_t client_index);

/**
 * Predicted reward of taking `action` for the client at 1-based step
 * `step`. Writes into `out_reward`.
 *
 * # Safety
 * `model` and `dataset` must be live pointers from their loaders;
 * `out_reward` must point to writable memory for one f64.
 */
int crn_predict_reward(const struct CrnModel *model,
                       const struct CrnDataset *dataset,
                       uintptr_t client_index,
                       uintptr_t step,
                       uintptr_t action,
                       double *out_reward);

/**
 * Ranks the candidate actions of the client's final step and writes up
 * to `capacity` (action id, predicted reward) pairs. `out_len` receives
 * the number written.
 *
 * # Safety
 * `model` and `dataset` must be live pointers from their loaders;
 * `out_actions` and `out_scores` must have room for `capacity` items;
 * `out_len` must point to writable memory for one usize.
 */
int crn_recommend(const struct CrnModel *model,
                  const struct CrnDataset *dataset,
                  uintptr_t client_index,
                  uintptr_t k,
                  uintptr_t *out_actions,
                  double *out_scores,
                  uintptr_t capacity,
                  uintptr_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRN_FFI_H */
