#ifndef ARF_H
#define ARF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ArfModality {
  ARF_MODALITY_IMAGE = 0,
  ARF_MODALITY_TEXT = 1,
} ArfModality;

typedef enum ArfRetrievalMode {
  ARF_RETRIEVAL_MODE_V2T = 0,
  ARF_RETRIEVAL_MODE_V2V = 1,
  ARF_RETRIEVAL_MODE_T2T = 2,
  ARF_RETRIEVAL_MODE_T2V = 3,
} ArfRetrievalMode;

// Result of every fallible call.
typedef enum ArfStatus {
  ARF_STATUS_OK = 0,
  ARF_STATUS_NULL_POINTER = 1,
  ARF_STATUS_INVALID_ARGUMENT = 2,
  ARF_STATUS_DIMENSION_MISMATCH = 3,
  ARF_STATUS_IO = 4,
  ARF_STATUS_FORMAT = 5,
  ARF_STATUS_HASH_MISMATCH = 6,
  ARF_STATUS_CHECKPOINT_MISMATCH = 7,
  ARF_STATUS_BUFFER_TOO_SMALL = 8,
  ARF_STATUS_INTERNAL = 9,
} ArfStatus;

// A loaded candidate index.
typedef struct ArfIndex ArfIndex;

// A loaded checkpoint.
typedef struct ArfModel ArfModel;

// Contrastive loss of one batch: the total and its two directions.
typedef struct ArfLoss {
  double total;
  double image_to_text;
  double text_to_image;
} ArfLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread; do not free.
const char *arf_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *arf_version(void);

// Loads and verifies a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum ArfStatus arf_model_load(const char *path, struct ArfModel **out);

// Writes the model as a checkpoint file.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum ArfStatus arf_model_save(const struct ArfModel *model, const char *path);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void arf_model_free(struct ArfModel *model);

// Raw image width, raw text width and embedding width.
//
// # Safety
// All pointers must be valid.
enum ArfStatus arf_model_dims(const struct ArfModel *model,
                              size_t *image_dim,
                              size_t *text_dim,
                              size_t *embed_dim);

// Softmax temperature `exp(log_tau)`.
//
// # Safety
// All pointers must be valid.
enum ArfStatus arf_model_tau(const struct ArfModel *model, double *tau);

// Content hash of the checkpoint as a newly allocated string; release it
// with [`arf_string_free`]. NULL on a NULL model.
//
// # Safety
// `model` must come from this library.
char *arf_model_checkpoint_id(const struct ArfModel *model);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void arf_string_free(char *s);

// Unit embedding of one raw feature. `out_len` must be the embedding width.
//
// # Safety
// `input` must hold `input_len` values and `out` room for `out_len`.
enum ArfStatus arf_model_encode(const struct ArfModel *model,
                                enum ArfModality which,
                                const double *input,
                                size_t input_len,
                                double *out,
                                size_t out_len);

// Zero-shot classification: `images` is `n_images × image_dim` raw image
// features, `prompts` is `n_classes × text_dim` raw prompt features with
// labels `class_ids`. Writes one class id per image.
//
// # Safety
// Every buffer must hold the number of elements its dimensions imply.
enum ArfStatus arf_model_classify(const struct ArfModel *model,
                                  const double *images,
                                  size_t n_images,
                                  size_t image_dim,
                                  const double *prompts,
                                  size_t n_classes,
                                  size_t text_dim,
                                  const uint32_t *class_ids,
                                  uint32_t *predictions);

// New model with parameters `(1 − alpha)·pre + alpha·ft`.
//
// # Safety
// Both models must come from this library; `out` must be writable.
enum ArfStatus arf_model_ensemble(const struct ArfModel *pre,
                                  const struct ArfModel *ft,
                                  double alpha,
                                  struct ArfModel **out);

// Loads a candidate index file.
//
// # Safety
// `path` must be NUL-terminated and `out` writable.
enum ArfStatus arf_index_load(const char *path, struct ArfIndex **out);

// Releases an index. NULL is ignored.
//
// # Safety
// `index` must come from this library and not be used afterwards.
void arf_index_free(struct ArfIndex *index);

// Number of candidates; 0 for NULL.
//
// # Safety
// `index` must come from this library or be NULL.
size_t arf_index_len(const struct ArfIndex *index);

// Top-`k` candidates for one raw query feature (image for v2*, text for
// t2*), best first; equal scores rank the lower candidate id first. The
// model must be the checkpoint the index was built from.
//
// # Safety
// `query` must hold `query_len` values; `out_ids` and `out_scores` room
// for `k` values each.
enum ArfStatus arf_index_retrieve(const struct ArfIndex *index,
                                  const struct ArfModel *model,
                                  enum ArfRetrievalMode mode,
                                  const double *query,
                                  size_t query_len,
                                  size_t k,
                                  uint64_t *out_ids,
                                  double *out_scores);

// Bidirectional contrastive loss of `batch` matched pairs of unit
// embeddings (`batch × dim`, row-major) at temperature `tau`.
//
// # Safety
// Both buffers must hold `batch · dim` values; `out` must be writable.
enum ArfStatus arf_contrastive_loss(const double *image_embeddings,
                                    const double *text_embeddings,
                                    size_t batch,
                                    size_t dim,
                                    double tau,
                                    struct ArfLoss *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARF_H */
