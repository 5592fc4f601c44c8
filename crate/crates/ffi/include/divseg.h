#ifndef DIVSEG_H
#define DIVSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

// Result of every fallible call.
typedef enum DivsegStatus {
  DIVSEG_STATUS_OK = 0,
  // Invalid parameter or configuration.
  DIVSEG_STATUS_USAGE = 1,
  // Malformed, inconsistent or unreadable data.
  DIVSEG_STATUS_DATA = 2,
  // Non-finite values or another numerical failure.
  DIVSEG_STATUS_NUMERICAL = 3,
  DIVSEG_STATUS_NULL_POINTER = 4,
  // A caller-provided buffer has the wrong length.
  DIVSEG_STATUS_BUFFER_SIZE = 5,
  // Internal panic; the handle involved should not be used again.
  DIVSEG_STATUS_PANIC = 6,
} DivsegStatus;

// Sampling method selector for `DivsegSampleOptions`.
typedef enum DivsegMethod {
  DIVSEG_METHOD_NAIVE = 0,
  DIVSEG_METHOD_PARTICLE_GUIDANCE = 1,
  DIVSEG_METHOD_SPELL = 2,
  DIVSEG_METHOD_CADS = 3,
} DivsegMethod;

// Opaque multi-modal dataset.
typedef struct DivsegDataset DivsegDataset;

// Opaque denoiser, either the closed-form mixture of a dataset or a trained MLP.
typedef struct DivsegDenoiser DivsegDenoiser;

// Sampler settings. Obtain defaults from `divseg_sample_options_default`.
// Repellence is within the batch only.
typedef struct DivsegSampleOptions {
  enum DivsegMethod method;
  size_t steps;
  double sigma_max;
  double sigma_min;
  double rho;
  double s_churn;
  uint64_t seed;
  double pg_alpha;
  double spell_radius;
  double spell_s_min;
  double cads_gamma;
} DivsegSampleOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into the library from the same thread.
const char *divseg_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *divseg_version(void);

// Synthetic wind-branching fire dataset with `n` instances of `size`x`size`.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum DivsegStatus divseg_dataset_generate_fire(size_t n,
                                               size_t size,
                                               uint64_t seed,
                                               struct DivsegDataset **out);

// Synthetic class-flip dataset; one class per entry of `probabilities`.
//
// # Safety
// `probabilities` must point to `n_classes` readable doubles and `out` to
// writable storage for a handle.
enum DivsegStatus divseg_dataset_generate_flip(size_t n,
                                               size_t size,
                                               uint64_t seed,
                                               const double *probabilities,
                                               size_t n_classes,
                                               struct DivsegDataset **out);

// Reads an `MMSEG1` file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum DivsegStatus divseg_dataset_read(const char *path, struct DivsegDataset **out);

// Writes an `MMSEG1` file.
//
// # Safety
// `dataset` must be a live handle and `path` a NUL-terminated string.
enum DivsegStatus divseg_dataset_write(const struct DivsegDataset *dataset, const char *path);

// # Safety
// `dataset` must be NULL or a handle not yet freed.
void divseg_dataset_free(struct DivsegDataset *dataset);

// Number of instances, or 0 for NULL.
//
// # Safety
// `dataset` must be NULL or a live handle.
size_t divseg_dataset_len(const struct DivsegDataset *dataset);

// Grid height, width and conditioning channel count.
//
// # Safety
// All pointers must be valid.
enum DivsegStatus divseg_dataset_shape(const struct DivsegDataset *dataset,
                                       size_t *height,
                                       size_t *width,
                                       size_t *channels);

// Number of ground-truth modes of `instance`.
//
// # Safety
// `dataset` must be a live handle and `count` writable.
enum DivsegStatus divseg_dataset_mode_count(const struct DivsegDataset *dataset,
                                            size_t instance,
                                            size_t *count);

// Copies mode `mode` of `instance` into `mask` (`len` must equal
// height*width, row-major 0/1) and its probability into `weight`.
//
// # Safety
// `mask` must point to `len` writable bytes; `weight` may be NULL.
enum DivsegStatus divseg_dataset_mode(const struct DivsegDataset *dataset,
                                      size_t instance,
                                      size_t mode,
                                      uint8_t *mask,
                                      size_t len,
                                      double *weight);

// Shield radius estimate over a dataset (mean nearest-mode distance / 2).
//
// # Safety
// `dataset` must be a live handle and `r0` writable.
enum DivsegStatus divseg_estimate_r0(const struct DivsegDataset *dataset, double *r0);

// Exact mixture denoiser over the modes of `dataset`. The dataset handle may
// be freed afterwards.
//
// # Safety
// `dataset` must be a live handle and `out` writable.
enum DivsegStatus divseg_denoiser_mixture(const struct DivsegDataset *dataset,
                                          struct DivsegDenoiser **out);

// Loads an MLP checkpoint written by `divseg train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum DivsegStatus divseg_denoiser_load_mlp(const char *path, struct DivsegDenoiser **out);

// # Safety
// `denoiser` must be NULL or a handle not yet freed.
void divseg_denoiser_free(struct DivsegDenoiser *denoiser);

struct DivsegSampleOptions divseg_sample_options_default(void);

// Draws batch `batch` of `batch_size` masks for `instance` of `dataset`
// into `masks` (`len` = batch_size*height*width, row-major 0/1 per sample).
// Output is a pure function of the options, instance and batch index.
//
// # Safety
// Handles must be live, `options` readable and `masks` point to `len`
// writable bytes.
enum DivsegStatus divseg_sample(const struct DivsegDenoiser *denoiser,
                                const struct DivsegDataset *dataset,
                                size_t instance,
                                size_t batch,
                                const struct DivsegSampleOptions *options,
                                size_t batch_size,
                                uint8_t *masks,
                                size_t len);

// Hungarian-matched IoU of samples against deduplicated targets. Both
// buffers hold row-major 0/1 masks of `height`x`width`.
//
// # Safety
// `samples` must point to `n_samples*height*width` readable bytes and
// `targets` to `n_targets*height*width`; `out` must be writable.
enum DivsegStatus divseg_hm_iou_star(const uint8_t *samples,
                                     size_t n_samples,
                                     const uint8_t *targets,
                                     size_t n_targets,
                                     size_t height,
                                     size_t width,
                                     double *out);

// Expected draws until every mode has been seen (exact, at most 20 modes).
//
// # Safety
// `weights` must point to `n` readable doubles and `out` be writable.
enum DivsegStatus divseg_expected_coverage(const double *weights, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIVSEG_H */
