/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef WELLCAST_H
#define WELLCAST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WcStatus {
  WC_STATUS_OK = 0,
  WC_STATUS_NULL_POINTER = 1,
  WC_STATUS_INVALID_ARGUMENT = 2,
  WC_STATUS_IO = 3,
  WC_STATUS_PARSE = 4,
  WC_STATUS_SHAPE = 5,
  WC_STATUS_NUMERIC = 6,
  WC_STATUS_INTERNAL = 7,
} WcStatus;

/**
 * Trained regressor.
 */
typedef struct WcModel WcModel;

/**
 * Per-channel scaling.
 */
typedef struct WcNormalizer WcNormalizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length in bytes,
 * excluding the terminator; 0 if there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t wc_last_error_message(char *buf, size_t len);

/**
 * Loads a weights container written by `wellcast train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WcStatus wc_model_load(const char *path, struct WcModel **out);

/**
 * # Safety
 * `model` must come from [`wc_model_load`] and not be used afterwards.
 */
void wc_model_free(struct WcModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum WcStatus wc_model_window(const struct WcModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum WcStatus wc_model_get_bias(const struct WcModel *model, double *out);

/**
 * # Safety
 * `model` must be a live handle.
 */
enum WcStatus wc_model_set_bias(struct WcModel *model, double bias);

/**
 * One-step-ahead prediction in normalized units. Index 0 of each history is
 * the most recent entry; `theta_hist` holds `width` rows of
 * `[thp_1, thp_2, thp_3, temperature]`; `u_hist[0]` is the choke for the
 * predicted step.
 *
 * # Safety
 * `q_hist` and `u_hist` must hold `width` values, `theta_hist` `4 * width`;
 * `out` must be writable.
 */
enum WcStatus wc_model_forward(const struct WcModel *model,
                               const double *q_hist,
                               const double *theta_hist,
                               const double *u_hist,
                               size_t width,
                               double *out);

/**
 * Loads a normalizer JSON written by `wellcast train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WcStatus wc_normalizer_load(const char *path, struct WcNormalizer **out);

/**
 * # Safety
 * `norm` must come from [`wc_normalizer_load`] and not be used afterwards.
 */
void wc_normalizer_free(struct WcNormalizer *norm);

/**
 * Channel indices: 0 flow_rate, 1-3 thp_1..3, 4 temperature, 5 choke.
 *
 * # Safety
 * `norm` must be a live handle; `out` must be writable.
 */
enum WcStatus wc_normalizer_normalize(const struct WcNormalizer *norm,
                                      uint32_t channel_index,
                                      double x,
                                      double *out);

/**
 * # Safety
 * `norm` must be a live handle; `out` must be writable.
 */
enum WcStatus wc_normalizer_denormalize(const struct WcNormalizer *norm,
                                        uint32_t channel_index,
                                        double x,
                                        double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum WcStatus wc_gaussian_kl(double mu_p, double sigma_p, double mu_q, double sigma_q, double *out);

/**
 * # Safety
 * `out` must be writable.
 */
enum WcStatus wc_jeffreys_j(double mu_p, double sigma_p, double mu_q, double sigma_q, double *out);

/**
 * Gain for a scalar observation of the 2-state `[q, w_bias]`; `p` is
 * row-major 2x2.
 *
 * # Safety
 * `p` must hold 4 values, `m` 2; `k_out` must have room for 2.
 */
enum WcStatus wc_kalman_gain(const double *p, const double *m, double r, double *k_out);

/**
 * # Safety
 * `samples` must hold `n` values; `w_out` and `p_out` must be writable.
 */
enum WcStatus wc_shapiro_wilk(const double *samples, size_t n, double *w_out, double *p_out);

/**
 * Runs the filter over a raw CSV record and writes the trace CSV to
 * `out_path`; other filter settings take their defaults.
 *
 * # Safety
 * All paths must be NUL-terminated strings.
 */
enum WcStatus wc_assimilate_csv(const char *data_path,
                                const char *weights_path,
                                const char *normalizer_path,
                                size_t n_members,
                                uint64_t seed,
                                const char *out_path);

/**
 * Library version, NUL-terminated, static storage.
 */
const char *wc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WELLCAST_H */
