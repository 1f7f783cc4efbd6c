#ifndef POSG_H
#define POSG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PosgStatus {
  POSG_STATUS_OK = 0,
  POSG_STATUS_NULL_POINTER = 1,
  POSG_STATUS_INVALID_ARGUMENT = 2,
  POSG_STATUS_IO = 3,
  POSG_STATUS_DATA = 4,
  POSG_STATUS_RUNTIME = 5,
  POSG_STATUS_BUFFER_TOO_SMALL = 6,
  POSG_STATUS_PANIC = 7,
} PosgStatus;

/**
 * A loaded checkpoint with its lexicon.
 */
typedef struct PosgModel PosgModel;

/**
 * Sampling settings for [`posg_generate`].
 */
typedef struct PosgSampler PosgSampler;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated,
 * truncated to `capacity`) and returns its full length including the NUL.
 */
size_t posg_last_error(char *buf, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *posg_version(void);

/**
 * Loads a checkpoint and its lexicon into `*out`.
 */
enum PosgStatus posg_model_load(const char *checkpoint_path,
                                const char *lexicon_path,
                                struct PosgModel **out);

void posg_model_free(struct PosgModel *model);

/**
 * Vocabulary size, or 0 for a null handle.
 */
size_t posg_model_vocab_size(const struct PosgModel *model);

/**
 * Number of tags including the special tag, or 0 for a null handle.
 */
size_t posg_model_pos_count(const struct PosgModel *model);

/**
 * 1 for a factorized head, 0 for a plain softmax, -1 for a null handle.
 */
int32_t posg_model_is_posg(const struct PosgModel *model);

/**
 * Id of `word`, or the unknown-token id when it is not in the vocabulary.
 */
enum PosgStatus posg_model_token_id(const struct PosgModel *model, const char *word, size_t *out);

/**
 * Creates a sampler from stage strings such as `top_k:5` or `nucleus:0.5`.
 */
enum PosgStatus posg_sampler_new(const char *pos_stage,
                                 const char *token_stage,
                                 uint64_t seed,
                                 struct PosgSampler **out);

/**
 * Multiplies tag `tag`'s probability by `multiplier` before truncation.
 */
enum PosgStatus posg_sampler_set_control(struct PosgSampler *sampler,
                                         const struct PosgModel *model,
                                         const char *tag,
                                         double multiplier);

void posg_sampler_free(struct PosgSampler *sampler);

/**
 * Samples `length` tokens after `prefix` into `out_tokens`, and the sampled
 * tags into `out_pos` when it is non-null and the head is factorized. Both
 * buffers hold `capacity` entries; `*out_written` receives the count.
 */
enum PosgStatus posg_generate(const struct PosgModel *model,
                              const struct PosgSampler *sampler,
                              const size_t *prefix,
                              size_t prefix_len,
                              size_t length,
                              size_t *out_tokens,
                              size_t *out_pos,
                              size_t capacity,
                              size_t *out_written);

/**
 * Perplexity of one token sequence (without BOS/EOS, which are added).
 */
enum PosgStatus posg_perplexity(const struct PosgModel *model,
                                const size_t *tokens,
                                size_t len,
                                double *out);

/**
 * Entropy in nats of `probs` after top-`k` truncation and renormalization.
 */
enum PosgStatus posg_entropy_topk(const double *probs, size_t n, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSG_H */
