#ifndef DLMWPO_H
#define DLMWPO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum dlmwpo_status {
  DLMWPO_STATUS_OK = 0,
  DLMWPO_STATUS_NULL_POINTER = 1,
  DLMWPO_STATUS_INVALID_ARGUMENT = 2,
  DLMWPO_STATUS_NUMERIC = 3,
  DLMWPO_STATUS_CONFIG = 4,
  DLMWPO_STATUS_IO = 5,
  DLMWPO_STATUS_CHECKPOINT = 6,
  DLMWPO_STATUS_CAPABILITY = 7,
  DLMWPO_STATUS_DOMAIN = 8,
  DLMWPO_STATUS_BUFFER_TOO_SMALL = 9,
  DLMWPO_STATUS_INTERNAL = 10,
} dlmwpo_status;

// Opaque model handle.
typedef struct dlmwpo_model dlmwpo_model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread ("" after a success).
// Valid until the next call into this library on the same thread.
const char *dlmwpo_last_error(void);

// Library version as a static NUL-terminated string.
const char *dlmwpo_version(void);

// Group-relative advantages `r_i - mean(r)`; `out` holds `n` values.
//
// # Safety
// `rewards` and `out` must point to `n` valid doubles.
enum dlmwpo_status dlmwpo_group_advantage(const double *rewards, size_t n, double *out);

// Positive and negative group weights `softmax(±ψ·A)`.
//
// # Safety
// `advantages`, `w_pos` and `w_neg` must point to `n` valid doubles.
enum dlmwpo_status dlmwpo_wd1_weights(const double *advantages,
                                      size_t n,
                                      double psi,
                                      double *w_pos,
                                      double *w_neg);

// Scores `completion` against one dataset record (a JSONL line as written
// by `gen-data`). Writes the total reward.
//
// # Safety
// String arguments must be NUL-terminated; `out_total` must be writable.
enum dlmwpo_status dlmwpo_reward(const char *record_json,
                                 const char *completion,
                                 double *out_total);

// Loads a checkpoint file into a new handle.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum dlmwpo_status dlmwpo_model_load(const char *path, struct dlmwpo_model **out);

// Freshly initialized model over the character vocabulary.
//
// # Safety
// `out` must be writable.
enum dlmwpo_status dlmwpo_model_init(size_t d_model,
                                     size_t n_layers,
                                     size_t n_heads,
                                     size_t d_ff,
                                     size_t max_len,
                                     uint64_t seed,
                                     struct dlmwpo_model **out);

// Writes the model as a checkpoint file.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum dlmwpo_status dlmwpo_model_save(const struct dlmwpo_model *model, const char *path);

// Number of scalar parameters, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
size_t dlmwpo_model_num_params(const struct dlmwpo_model *model);

// Generates a completion for `prompt` and writes it NUL-terminated into
// `buf`. `temperature` 0 is greedy. On `DLMWPO_STATUS_BUFFER_TOO_SMALL`,
// `written` holds the required size including the NUL.
//
// # Safety
// `model` must come from this library, `prompt` must be NUL-terminated,
// `buf` must hold `buf_len` bytes and `written` must be writable.
enum dlmwpo_status dlmwpo_model_generate(const struct dlmwpo_model *model,
                                         const char *prompt,
                                         size_t gen_length,
                                         size_t diffusion_steps,
                                         size_t block_length,
                                         double temperature,
                                         uint64_t seed,
                                         char *buf,
                                         size_t buf_len,
                                         size_t *written);

// Releases a handle. Null is a no-op.
//
// # Safety
// `model` must be null or come from this library, and not be used again.
void dlmwpo_model_free(struct dlmwpo_model *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DLMWPO_H */
