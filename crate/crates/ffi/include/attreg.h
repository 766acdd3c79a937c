#ifndef ATTREG_H
#define ATTREG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AttregStatus {
  ATTREG_STATUS_OK = 0,
  ATTREG_STATUS_NULL_POINTER = 1,
  ATTREG_STATUS_INVALID_UTF8 = 2,
  ATTREG_STATUS_INVALID_ARGUMENT = 3,
  ATTREG_STATUS_IO = 4,
  ATTREG_STATUS_PARSE = 5,
  ATTREG_STATUS_CONFIG = 6,
  ATTREG_STATUS_NUMERIC = 7,
  ATTREG_STATUS_VOCABULARY = 8,
  ATTREG_STATUS_PANIC = 9,
} AttregStatus;

// Dataset split handle.
typedef struct AttregDataset AttregDataset;

// Trained model handle.
typedef struct AttregModel AttregModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into this library on the same thread.
const char *attreg_last_error(void);

// Library version as a static NUL-terminated string.
const char *attreg_version(void);

// Generates the benchmark with default settings except the split sizes and
// writes `train.jsonl`, `val_indomain.jsonl` and `test_ood.jsonl` to `dir`.
//
// # Safety
// `dir` must be a valid NUL-terminated string.
enum AttregStatus attreg_generate_splits(const char *dir,
                                         uint64_t seed,
                                         size_t train_size,
                                         size_t val_size,
                                         size_t test_size);

// # Safety
// `path` must be a valid NUL-terminated string and `out` writable.
enum AttregStatus attreg_dataset_load(const char *path, struct AttregDataset **out);

// Number of instances, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or a live handle.
size_t attreg_dataset_len(const struct AttregDataset *dataset);

// # Safety
// `dataset` must be null or a handle not freed before.
void attreg_dataset_free(struct AttregDataset *dataset);

// # Safety
// `path` must be a valid NUL-terminated string and `out` writable.
enum AttregStatus attreg_model_load(const char *path, struct AttregModel **out);

// # Safety
// `model` must be a live handle and `path` a valid NUL-terminated string.
enum AttregStatus attreg_model_save(const struct AttregModel *model, const char *path);

// Trains a model from scratch with the plain loss for `epochs` epochs and
// keeps the best epoch on `val`.
//
// # Safety
// `train` and `val` must be live handles and `out` writable.
enum AttregStatus attreg_pretrain(const struct AttregDataset *train,
                                  const struct AttregDataset *val,
                                  size_t epochs,
                                  uint64_t seed,
                                  struct AttregModel **out);

// # Safety
// `model` must be null or a handle not freed before.
void attreg_model_free(struct AttregModel *model);

// Number of candidate answers, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t attreg_model_num_answers(const struct AttregModel *model);

// Overall accuracy of `model` on `dataset`. A non-zero `uniform_attention`
// replaces learned attention with uniform weights over active detections.
//
// # Safety
// Handles must be live and `accuracy` writable.
enum AttregStatus attreg_evaluate(const struct AttregModel *model,
                                  const struct AttregDataset *dataset,
                                  int32_t uniform_attention,
                                  double *accuracy);

// Predicted answer index for one instance.
//
// # Safety
// Handles must be live and `answer` writable.
enum AttregStatus attreg_predict(const struct AttregModel *model,
                                 const struct AttregDataset *dataset,
                                 size_t index,
                                 size_t *answer);

// Copies the answer string for `answer` into `buf` with a trailing NUL.
// `needed` receives the required buffer size including the NUL, so a call
// with `buf_len == 0` queries the size.
//
// # Safety
// `model` must be live, `buf` writable for `buf_len` bytes, `needed` writable.
enum AttregStatus attreg_answer_text(const struct AttregModel *model,
                                     size_t answer,
                                     char *buf,
                                     size_t buf_len,
                                     size_t *needed);

// Attention weights over the detections of one instance. `weights` must hold
// at least as many entries as the scene has detections; `count` receives
// that number, and a null `weights` queries it.
//
// # Safety
// Handles must be live, `weights` null or writable for `capacity` values,
// `count` writable.
enum AttregStatus attreg_attention(const struct AttregModel *model,
                                   const struct AttregDataset *dataset,
                                   size_t index,
                                   double *weights,
                                   size_t capacity,
                                   size_t *count);

// Mean number of key objects the model ranks among its ignored detections.
//
// # Safety
// Handles must be live and `result` writable.
enum AttregStatus attreg_ignored_key_count(const struct AttregModel *model,
                                           const struct AttregDataset *dataset,
                                           double sigma,
                                           size_t top_m,
                                           double ignored_pct,
                                           double *result);

// Total variation distance between two score vectors of length `len`.
//
// # Safety
// `p` and `q` must be readable for `len` values and `result` writable.
enum AttregStatus attreg_tvd(const double *p, const double *q, size_t len, double *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTREG_H */
