#ifndef CACOVID_H
#define CACOVID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CacovidStatus {
  CACOVID_STATUS_OK = 0,
  CACOVID_STATUS_NULL_POINTER = 1,
  CACOVID_STATUS_INVALID_ARGUMENT = 2,
  CACOVID_STATUS_SHAPE = 3,
  CACOVID_STATUS_NON_FINITE = 4,
  CACOVID_STATUS_CHECKPOINT = 5,
  CACOVID_STATUS_IO = 6,
  CACOVID_STATUS_BUFFER_TOO_SMALL = 7,
  CACOVID_STATUS_OVERFLOW = 8,
  CACOVID_STATUS_PANIC = 9,
} CacovidStatus;

/**
 * Budget allocation strategy used by [`cacovid_compress`].
 */
typedef enum CacovidStrategy {
  CACOVID_STRATEGY_FRAME_AVG = 0,
  CACOVID_STRATEGY_FRAME_ADA = 1,
  CACOVID_STRATEGY_FRAME_ADA_ST = 2,
} CacovidStrategy;

/**
 * Opaque policy handle.
 */
typedef struct CacovidPolicy CacovidPolicy;

/**
 * Borrowed view of one video and its question.
 *
 * `video` holds `frames * height * width` rows and `question` holds `n_qst`
 * rows, each row `dim` doubles, row-major and frame-major.
 */
typedef struct CacovidGrid {
  const double *video;
  size_t frames;
  size_t height;
  size_t width;
  const double *question;
  size_t n_qst;
  size_t dim;
} CacovidGrid;

/**
 * Search space sizes in bits.
 */
typedef struct CacovidExploration {
  size_t n;
  size_t k;
  size_t m;
  size_t subspaces;
  double log2_arbitrary;
  double log2_ocss;
  double reduction_ratio;
} CacovidExploration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *cacovid_last_error(void);

/**
 * Freshly initialised policy for tokens of width `dim`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one pointer.
 */
enum CacovidStatus cacovid_policy_init(size_t dim,
                                       size_t hidden,
                                       uint64_t seed,
                                       struct CacovidPolicy **out);

/**
 * Loads a checkpoint written by [`cacovid_policy_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CacovidStatus cacovid_policy_load(const char *path, struct CacovidPolicy **out);

/**
 * # Safety
 * `policy` must come from this library; `path` must be NUL-terminated.
 */
enum CacovidStatus cacovid_policy_save(const struct CacovidPolicy *policy, const char *path);

/**
 * Releases a policy. Null is ignored.
 *
 * # Safety
 * `policy` must come from this library and not be used afterwards.
 */
void cacovid_policy_free(struct CacovidPolicy *policy);

/**
 * Token width the policy expects, or 0 for a null handle.
 *
 * # Safety
 * `policy` must be null or come from this library.
 */
size_t cacovid_policy_dim(const struct CacovidPolicy *policy);

/**
 * Contribution scores: one per video token and one per frame.
 *
 * # Safety
 * `token_scores` must hold `frames * height * width` doubles and
 * `frame_scores` must hold `frames` doubles.
 */
enum CacovidStatus cacovid_policy_score(const struct CacovidPolicy *policy,
                                        const struct CacovidGrid *grid,
                                        double *token_scores,
                                        double *frame_scores);

/**
 * Keeps a `ratio` share of the video tokens.
 *
 * Kept indices are written in increasing order to `indices`, which has room
 * for `capacity` entries; `written` receives the count. When `capacity` is
 * too small the call fails with `BufferTooSmall` and `written` still holds
 * the required size. `frame_budgets` may be null; otherwise it receives
 * `frames` entries.
 *
 * # Safety
 * Pointers must be valid for the sizes described above.
 */
enum CacovidStatus cacovid_compress(const struct CacovidPolicy *policy,
                                    const struct CacovidGrid *grid,
                                    double ratio,
                                    enum CacovidStrategy strategy,
                                    size_t *indices,
                                    size_t capacity,
                                    size_t *written,
                                    size_t *frame_budgets);

/**
 * One subspace-sampled draw of `k` of the `n` scored items.
 *
 * Identical `(seed, stream)` pairs give identical draws.
 *
 * # Safety
 * `scores` must hold `n` doubles and `indices` room for `k` entries.
 */
enum CacovidStatus cacovid_ocss_sample(const double *scores,
                                       size_t n,
                                       size_t k,
                                       double lambda,
                                       uint64_t seed,
                                       uint64_t stream,
                                       size_t *indices);

/**
 * Prefill cost of `layers` decoder layers over `n` tokens of width `d` with
 * feed-forward width `m`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CacovidStatus cacovid_flops(uint64_t layers,
                                 uint64_t n,
                                 uint64_t d,
                                 uint64_t m,
                                 uint64_t *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum CacovidStatus cacovid_exploration_space(size_t n,
                                             size_t k,
                                             double lambda,
                                             struct CacovidExploration *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CACOVID_H */
