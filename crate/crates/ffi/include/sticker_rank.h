#ifndef STICKER_RANK_H
#define STICKER_RANK_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum SrStatus {
  SR_STATUS_OK = 0,
  SR_STATUS_NULL_ARGUMENT = 1,
  SR_STATUS_CONFIG = 2,
  SR_STATUS_DATA = 3,
  SR_STATUS_NUMERIC = 4,
  SR_STATUS_CHECKPOINT = 5,
  SR_STATUS_IO = 6,
  SR_STATUS_SHAPE = 7,
  SR_STATUS_BUFFER_TOO_SMALL = 8,
  SR_STATUS_PANIC = 9,
} SrStatus;

// Samples read with a model's data layout.
typedef struct SrDataset SrDataset;

// A loaded model.
typedef struct SrModel SrModel;

// Ranking metrics. Recall at a cutoff above the candidate count is NaN.
typedef struct SrMetrics {
  double map;
  double recall_at_1;
  double recall_at_2;
  double recall_at_5;
  size_t n_samples;
  size_t abstained;
} SrMetrics;

// Message of the last failed call on this thread, or null. Valid until
// the next call on the same thread.
const char *sr_last_error(void);

// Loads a checkpoint written by training.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SrStatus sr_model_load(const char *path, struct SrModel **out);

// Number of candidates per sample the model ranks.
//
// # Safety
// `model` must be null or a handle from [`sr_model_load`].
size_t sr_model_candidates(const struct SrModel *model);

// # Safety
// `model` must be null or a handle from [`sr_model_load`], not yet freed.
void sr_model_free(struct SrModel *model);

// Reads every record of the dataset directory `dir` using the model's
// data layout.
//
// # Safety
// `model` must be a live handle, `dir` a NUL-terminated string and `out`
// a valid pointer.
enum SrStatus sr_dataset_load(const struct SrModel *model, const char *dir, struct SrDataset **out);

// # Safety
// `data` must be null or a live handle from [`sr_dataset_load`].
size_t sr_dataset_len(const struct SrDataset *data);

// Index of the true candidate of sample `index`, or -1 when out of range.
//
// # Safety
// `data` must be null or a live handle from [`sr_dataset_load`].
int64_t sr_dataset_truth(const struct SrDataset *data, size_t index);

// # Safety
// `data` must be null or a handle from [`sr_dataset_load`], not yet freed.
void sr_dataset_free(struct SrDataset *data);

// Scores the candidates of sample `index`. `scores` and `gates` (the
// latter may be null) receive one value per candidate; `capacity` is their
// length. `written` receives the candidate count, also when the buffers
// are too small. `no_history` (may be null) is set when the sample has no
// history.
//
// # Safety
// Handles must be live; buffers must hold `capacity` doubles.
enum SrStatus sr_score(const struct SrModel *model,
                       const struct SrDataset *data,
                       size_t index,
                       double *scores,
                       double *gates,
                       size_t capacity,
                       size_t *written,
                       bool *no_history);

// MAP and recall over the whole dataset. `threads == 0` uses every core.
//
// # Safety
// Handles must be live and `out` valid.
enum SrStatus sr_evaluate(const struct SrModel *model,
                          const struct SrDataset *data,
                          size_t threads,
                          struct SrMetrics *out);

// Structural similarity of two `height x width` planes with values in
// [0, 1], row-major.
//
// # Safety
// `a` and `b` must each hold `height * width` doubles; `out` must be valid.
enum SrStatus sr_ssim(const double *a, const double *b, size_t height, size_t width, double *out);

#endif  /* STICKER_RANK_H */
