/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef CIRCUITPRINT_H
#define CIRCUITPRINT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum cp_status {
  CP_STATUS_OK = 0,
  CP_STATUS_NULL_ARGUMENT = 1,
  CP_STATUS_INVALID_UTF8 = 2,
  CP_STATUS_USAGE = 3,
  CP_STATUS_DATA = 4,
  CP_STATUS_NUMERIC = 5,
  CP_STATUS_BUFFER_TOO_SMALL = 6,
  CP_STATUS_PANIC = 7,
} cp_status;

/**
 * Opaque model handle.
 */
typedef struct cp_model cp_model;

/**
 * Model shape as seen from C.
 */
typedef struct cp_model_config {
  size_t n_layers;
  size_t n_heads;
  size_t d_model;
  size_t d_head;
  size_t d_mlp;
  size_t vocab_size;
  size_t max_positions;
} cp_model_config;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cp_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *cp_last_error(void);

/**
 * Loads a model directory. The tokenizer comes from `vocab.json` and
 * `merges.txt` in the same directory when present, else the built-in
 * GPT-2 vocabulary.
 *
 * # Safety
 * `model_dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum cp_status cp_model_load(const char *model_dir, struct cp_model **out);

/**
 * Frees a handle from [`cp_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not used afterwards.
 */
void cp_model_free(struct cp_model *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum cp_status cp_model_get_config(const struct cp_model *model, struct cp_model_config *out);

/**
 * Encodes `text` into `out_ids`.
 *
 * # Safety
 * `text` must be NUL-terminated and `out_ids` must hold `cap` values.
 */
enum cp_status cp_tokenize(const struct cp_model *model,
                           const char *text,
                           uint32_t *out_ids,
                           size_t cap,
                           size_t *out_len);

/**
 * Logits at the final position; `out_logits` needs `vocab_size` slots.
 *
 * # Safety
 * `ids` must hold `n_ids` values and `out_logits` `cap` values.
 */
enum cp_status cp_final_logits(const struct cp_model *model,
                               const uint32_t *ids,
                               size_t n_ids,
                               float *out_logits,
                               size_t cap);

/**
 * `logit(a_plus) − logit(a_minus)` at the final position.
 *
 * # Safety
 * `ids` must hold `n_ids` values and `out` must be valid.
 */
enum cp_status cp_logit_diff(const struct cp_model *model,
                             const uint32_t *ids,
                             size_t n_ids,
                             uint32_t a_plus,
                             uint32_t a_minus,
                             float *out);

/**
 * Number of scored components: per layer, its heads then its MLP.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t cp_component_count(const struct cp_model *model);

/**
 * Label of component `index`, such as `a3.h7` or `m2`, as a
 * NUL-terminated string. `out_len` receives the length without the NUL.
 *
 * # Safety
 * `buf` must hold `cap` bytes.
 */
enum cp_status cp_component_label(const struct cp_model *model,
                                  size_t index,
                                  char *buf,
                                  size_t cap,
                                  size_t *out_len);

/**
 * Node scores of a clean/corrupt prompt pair, in [`cp_component_label`]
 * order. `out_embedding` may be null.
 *
 * # Safety
 * `clean` and `corrupt` must hold `n_ids` values, `out_scores` `cap`.
 */
enum cp_status cp_node_scores(const struct cp_model *model,
                              const uint32_t *clean,
                              const uint32_t *corrupt,
                              size_t n_ids,
                              uint32_t a_plus,
                              uint32_t a_minus,
                              float *out_scores,
                              size_t cap,
                              float *out_embedding);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CIRCUITPRINT_H */
