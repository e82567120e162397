#ifndef IMPUTER_H
#define IMPUTER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum ImputerStatus {
  IMPUTER_STATUS_OK = 0,
  IMPUTER_STATUS_NULL_POINTER = 1,
  IMPUTER_STATUS_INVALID_ARGUMENT = 2,
  IMPUTER_STATUS_INFEASIBLE = 3,
  IMPUTER_STATUS_IO = 4,
  IMPUTER_STATUS_CHECKPOINT_CORRUPT = 5,
  IMPUTER_STATUS_CHECKPOINT_VERSION = 6,
  IMPUTER_STATUS_CHECKPOINT_SHAPE = 7,
  IMPUTER_STATUS_NUMERIC = 8,
  // The output buffer is too small; the required length has been written.
  IMPUTER_STATUS_BUFFER_TOO_SMALL = 9,
  IMPUTER_STATUS_PANIC = 10,
} ImputerStatus;

// Decoding strategy for [`imputer_model_decode`].
typedef enum ImputerStrategy {
  IMPUTER_STRATEGY_PLAIN = 0,
  IMPUTER_STRATEGY_ALTERNATE_SUBBLOCK = 1,
  IMPUTER_STRATEGY_RIGHTMOST_LAST = 2,
  IMPUTER_STRATEGY_TOPK = 3,
} ImputerStrategy;

// A loaded model. Opaque to C.
typedef struct ImputerModel ImputerModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or an empty string.
// The pointer stays valid until the next call into this library on the same
// thread.
const char *imputer_last_error(void);

// Library version as a static NUL-terminated string.
const char *imputer_version(void);

// log p(y | lattice) summed over every alignment of `labels`.
//
// # Safety
// `log_probs` must point to `slots * symbols` doubles, `labels` to
// `num_labels` ids, and `out_logp` to one writable double.
enum ImputerStatus imputer_ctc_forward(const double *log_probs,
                                       size_t slots,
                                       size_t symbols,
                                       const uint32_t *labels_ptr,
                                       size_t num_labels,
                                       double *out_logp);

// Most probable alignment of `labels`, `slots` ids written to `out_alignment`.
// Ties prefer the blank.
//
// # Safety
// As [`imputer_ctc_forward`], with `out_alignment` writable for `slots` ids.
enum ImputerStatus imputer_ctc_viterbi(const double *log_probs,
                                       size_t slots,
                                       size_t symbols,
                                       const uint32_t *labels_ptr,
                                       size_t num_labels,
                                       uint32_t *out_alignment);

// Marginal over alignments that collapse like `alignment` and agree with
// `partial` on every unmasked slot.
//
// # Safety
// `log_probs` holds `slots * symbols` doubles; `partial` and `alignment`
// hold `slots` ids each; `out_logp` is writable.
enum ImputerStatus imputer_constrained_forward(const double *log_probs,
                                               size_t slots,
                                               size_t symbols,
                                               const uint32_t *partial_ptr,
                                               const uint32_t *alignment_ptr,
                                               double *out_logp);

// Constrained marginal plus per-slot symbol posteriors, `slots * symbols`
// doubles written to `out_posteriors`.
//
// # Safety
// As [`imputer_constrained_forward`], with `out_posteriors` writable for
// `slots * symbols` doubles.
enum ImputerStatus imputer_forward_backward(const double *log_probs,
                                            size_t slots,
                                            size_t symbols,
                                            const uint32_t *partial_ptr,
                                            const uint32_t *alignment_ptr,
                                            double *out_logp,
                                            double *out_posteriors);

// Number of alignments compatible with `partial` that collapse like
// `alignment`. Fails with `IMPUTER_STATUS_NUMERIC` if it does not fit in 64
// bits.
//
// # Safety
// `partial` and `alignment` hold `slots` ids each; `out_count` is writable.
enum ImputerStatus imputer_count_compatible(const uint32_t *partial_ptr,
                                            const uint32_t *alignment_ptr,
                                            size_t slots,
                                            size_t symbols,
                                            uint64_t *out_count);

// Load a checkpoint written by the `imputer` tool.
//
// # Safety
// `path` is a NUL-terminated UTF-8 string; `out_model` is writable. Release
// the model with [`imputer_model_free`].
enum ImputerStatus imputer_model_load(const char *path, struct ImputerModel **out_model);

// Release a model. Null is ignored.
//
// # Safety
// `model` must come from [`imputer_model_load`] and not be used afterwards.
void imputer_model_free(struct ImputerModel *model);

// Number of vocabulary tokens; lattices have one more column for the blank.
// Returns 0 for a null model.
//
// # Safety
// `model` is null or a live model.
uint32_t imputer_model_num_tokens(const struct ImputerModel *model);

// Feature dimension expected per frame. Returns 0 for a null model.
//
// # Safety
// `model` is null or a live model.
size_t imputer_model_feature_dim(const struct ImputerModel *model);

// Alignment slots produced for `frames` input frames. Returns 0 for a null
// model.
//
// # Safety
// `model` is null or a live model.
size_t imputer_model_slots(const struct ImputerModel *model, size_t frames);

// Score one partial alignment: writes `slots * (num_tokens + 1)` log
// probabilities. `partial` holds `slots` ids with `num_tokens + 1` as mask.
//
// # Safety
// `features` holds `frames * feature_dim` doubles, `partial` holds
// `imputer_model_slots(model, frames)` ids, and `out_log_probs` is writable
// for `slots * (num_tokens + 1)` doubles.
enum ImputerStatus imputer_model_forward(const struct ImputerModel *model,
                                         const double *features_ptr,
                                         size_t frames,
                                         const uint32_t *partial_ptr,
                                         double *out_log_probs);

// Decode a label sequence. `strategy` is an [`ImputerStrategy`] value and
// `k` is only read by the top-k strategy.
// On success or `IMPUTER_STATUS_BUFFER_TOO_SMALL`, `out_len` receives the
// number of labels; they are written to `out_labels` only if they fit in
// `capacity`.
//
// # Safety
// `features` holds `frames * feature_dim` doubles, `out_labels` is writable
// for `capacity` ids, `out_len` is writable.
enum ImputerStatus imputer_model_decode(const struct ImputerModel *model,
                                        const double *features_ptr,
                                        size_t frames,
                                        size_t block_size,
                                        uint32_t strategy,
                                        size_t k,
                                        uint32_t *out_labels,
                                        size_t capacity,
                                        size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMPUTER_H */
