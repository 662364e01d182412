#ifndef ADVDIFF_H
#define ADVDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdvdiffMode {
  ADVDIFF_MODE_TARGETED = 0,
  ADVDIFF_MODE_UNTARGETED = 1,
} AdvdiffMode;

typedef enum AdvdiffNoiseScaling {
  ADVDIFF_NOISE_SCALING_AUTO = 0,
  ADVDIFF_NOISE_SCALING_SIGMA_BAR = 1,
  ADVDIFF_NOISE_SCALING_PLAIN = 2,
} AdvdiffNoiseScaling;

typedef enum AdvdiffStatus {
  ADVDIFF_STATUS_OK = 0,
  ADVDIFF_STATUS_NULL_POINTER = 1,
  ADVDIFF_STATUS_INVALID_ARGUMENT = 2,
  ADVDIFF_STATUS_CONFIG = 3,
  ADVDIFF_STATUS_IO = 4,
  ADVDIFF_STATUS_CHECKPOINT = 5,
  ADVDIFF_STATUS_NUMERIC = 6,
  ADVDIFF_STATUS_PANIC = 7,
} AdvdiffStatus;

typedef struct AdvdiffClassifier AdvdiffClassifier;

typedef struct AdvdiffDenoiser AdvdiffDenoiser;

typedef struct AdvdiffSchedule AdvdiffSchedule;

/**
 * Attack knobs; see [`advdiff_guidance_mnist_paper`] for defaults.
 */
typedef struct AdvdiffGuidance {
  double w;
  double s;
  double a;
  uint32_t restarts;
  double t_star;
  enum AdvdiffMode mode;
  enum AdvdiffNoiseScaling noise_scaling;
} AdvdiffGuidance;

/**
 * Outcome of one attack; `x0` is written separately.
 */
typedef struct AdvdiffAttackOutcome {
  bool success;
  /**
   * 0-based restart of the first success, or -1.
   */
  int32_t first_success;
  /**
   * Classifier verdict on the returned sample.
   */
  uint32_t verdict;
} AdvdiffAttackOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *advdiff_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated) and returns its full length in bytes.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null with `len == 0`.
 */
size_t advdiff_last_error_message(char *buf, size_t len);

/**
 * Linear beta schedule with `steps` timesteps.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum AdvdiffStatus advdiff_schedule_linear(size_t steps,
                                           double beta_start,
                                           double beta_end,
                                           struct AdvdiffSchedule **out);

/**
 * # Safety
 * `s` must come from [`advdiff_schedule_linear`] and not be used again.
 */
void advdiff_schedule_free(struct AdvdiffSchedule *s);

/**
 * `alpha_bar` at timestep `t` (0 gives 1).
 *
 * # Safety
 * `s` must be a live schedule handle and `out` writable.
 */
enum AdvdiffStatus advdiff_schedule_alpha_bar(const struct AdvdiffSchedule *s,
                                              size_t t,
                                              double *out);

/**
 * Loads a denoiser checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum AdvdiffStatus advdiff_denoiser_load(const char *path_, struct AdvdiffDenoiser **out);

/**
 * Closed-form denoiser for the Gaussian mixture with `classes` centers
 * (row-major `classes x dim`) and spread `gamma`.
 *
 * # Safety
 * `centers_` must hold `classes * dim` doubles; `schedule` must be live.
 */
enum AdvdiffStatus advdiff_denoiser_analytic(const double *centers_,
                                             size_t classes,
                                             size_t dim,
                                             double gamma,
                                             const struct AdvdiffSchedule *schedule,
                                             struct AdvdiffDenoiser **out);

/**
 * # Safety
 * `d` must come from a denoiser constructor and not be used again.
 */
void advdiff_denoiser_free(struct AdvdiffDenoiser *d);

/**
 * Loads a classifier checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum AdvdiffStatus advdiff_classifier_load(const char *path_, struct AdvdiffClassifier **out);

/**
 * Classifier with logits `-|x - c_k|^2 / (2 tau)`.
 *
 * # Safety
 * `centers_` must hold `classes * dim` doubles.
 */
enum AdvdiffStatus advdiff_classifier_quadratic(const double *centers_,
                                                size_t classes,
                                                size_t dim,
                                                double tau,
                                                struct AdvdiffClassifier **out);

/**
 * # Safety
 * `c` must come from a classifier constructor and not be used again.
 */
void advdiff_classifier_free(struct AdvdiffClassifier *c);

/**
 * Top-1 class of each of the `rows` inputs in `x`.
 *
 * # Safety
 * `x` must hold `rows * dim` doubles and `labels` room for `rows` values,
 * where `dim` is the classifier's input dimension.
 */
enum AdvdiffStatus advdiff_classifier_predict(const struct AdvdiffClassifier *c,
                                              const double *x,
                                              size_t rows,
                                              uint32_t *labels);

/**
 * `N = 10, s = 0.5, a = 1.0, w = 1`, guidance over the final half.
 */
struct AdvdiffGuidance advdiff_guidance_mnist_paper(void);

/**
 * `N = 5, s = 0.7, a = 0.5, w = 1`, guidance over the final fifth.
 */
struct AdvdiffGuidance advdiff_guidance_imagenet_paper(void);

/**
 * Runs attack `index` of the suite seeded by `seed`: generation label `y`,
 * target `target` (ignored when untargeted). `ddim_steps == 0` selects the
 * DDPM sampler. The returned sample is written to `x0` (`dim` doubles).
 *
 * # Safety
 * Handles must be live; `guidance` and `outcome` must be valid pointers and
 * `x0` must have room for the denoiser's dimension.
 */
enum AdvdiffStatus advdiff_attack(const struct AdvdiffDenoiser *denoiser,
                                  const struct AdvdiffClassifier *classifier,
                                  const struct AdvdiffSchedule *schedule,
                                  const struct AdvdiffGuidance *guidance,
                                  size_t ddim_steps,
                                  uint64_t seed,
                                  uint64_t index,
                                  uint32_t y,
                                  uint32_t target,
                                  double *x0,
                                  struct AdvdiffAttackOutcome *outcome);

/**
 * Benign classifier-free samples for `labels`, row `i` drawn from stream
 * `SAMPLE + i` of `seed`. `ddim_steps == 0` selects DDPM. Writes
 * `n * dim` doubles to `out`.
 *
 * # Safety
 * Handles must be live, `labels` must hold `n` values and `out` room for
 * `n * dim` doubles.
 */
enum AdvdiffStatus advdiff_sample(const struct AdvdiffDenoiser *denoiser,
                                  const struct AdvdiffSchedule *schedule,
                                  const uint32_t *labels,
                                  size_t n,
                                  double w,
                                  size_t ddim_steps,
                                  uint64_t seed,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADVDIFF_H */
