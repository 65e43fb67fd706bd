#ifndef MSGCN_H
#define MSGCN_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsgcnStatus {
  MSGCN_STATUS_OK = 0,
  MSGCN_STATUS_NULL_POINTER = 1,
  MSGCN_STATUS_INVALID_ARGUMENT = 2,
  MSGCN_STATUS_IO = 3,
  MSGCN_STATUS_PARSE = 4,
  MSGCN_STATUS_DIMENSION = 5,
  MSGCN_STATUS_INTERNAL = 6,
} MsgcnStatus;

/**
 * Skeleton graph layout.
 */
typedef struct MsgcnLayout MsgcnLayout;

/**
 * Segmentation model with its parameters and normalization statistics.
 */
typedef struct MsgcnModel MsgcnModel;

/**
 * Segmental F1 counts at one IoU threshold.
 */
typedef struct MsgcnF1 {
  size_t tp;
  size_t fp;
  size_t fn_count;
  double precision;
  double recall;
  double f1;
} MsgcnF1;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *msgcn_last_error(void);

/**
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsgcnStatus msgcn_layout_preset(const char *name, struct MsgcnLayout **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsgcnStatus msgcn_layout_load(const char *path, struct MsgcnLayout **out);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `layout` must be null or a live handle.
 */
size_t msgcn_layout_num_nodes(const struct MsgcnLayout *layout);

/**
 * # Safety
 * `layout` must be null or a handle not yet freed.
 */
void msgcn_layout_free(struct MsgcnLayout *layout);

/**
 * Build a model with default hyperparameters. `kind` is one of `bilstm`,
 * `tcn`, `stgcn`, `ms-tcn`, `ms-gcn`.
 *
 * # Safety
 * Pointers must be valid; `layout` is only read.
 */
enum MsgcnStatus msgcn_model_new(const char *kind,
                                 const struct MsgcnLayout *layout,
                                 size_t in_channels,
                                 size_t num_classes,
                                 uint64_t seed,
                                 struct MsgcnModel **out);

/**
 * Build a model from a JSON model configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsgcnStatus msgcn_model_from_json(const char *config_json,
                                       uint64_t seed,
                                       struct MsgcnModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsgcnStatus msgcn_model_load(const char *path, struct MsgcnModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum MsgcnStatus msgcn_model_save(struct MsgcnModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t msgcn_model_num_classes(const struct MsgcnModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t msgcn_model_num_nodes(const struct MsgcnModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t msgcn_model_in_channels(const struct MsgcnModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t msgcn_model_parameter_count(const struct MsgcnModel *model);

/**
 * Run inference on `values`, a row-major `[frames, nodes, channels]` array.
 * Final-stage probabilities (`frames * num_classes`) go to `probs` and the
 * argmax labels (`frames`) to `labels`; either may be null.
 *
 * # Safety
 * `values` must hold `frames * nodes * channels` doubles and the output
 * buffers, when non-null, must be large enough.
 */
enum MsgcnStatus msgcn_model_predict(struct MsgcnModel *model,
                                     const double *values,
                                     size_t frames,
                                     size_t nodes,
                                     size_t channels,
                                     double *probs,
                                     uint32_t *labels);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void msgcn_model_free(struct MsgcnModel *model);

/**
 * Segmental F1 of two frame-label sequences of length `len`.
 *
 * # Safety
 * `pred` and `gt` must hold `len` values; `out` must be valid.
 */
enum MsgcnStatus msgcn_f1_at_tau(const uint32_t *pred,
                                 const uint32_t *gt,
                                 size_t len,
                                 double tau,
                                 struct MsgcnF1 *out);

/**
 * # Safety
 * `pred` and `gt` must hold `len` values; `out` must be valid.
 */
enum MsgcnStatus msgcn_sample_accuracy(const uint32_t *pred,
                                       const uint32_t *gt,
                                       size_t len,
                                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSGCN_H */
