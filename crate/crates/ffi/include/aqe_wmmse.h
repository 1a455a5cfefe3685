#ifndef AQE_WMMSE_H
#define AQE_WMMSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AqeStatus {
  AQE_STATUS_OK = 0,
  AQE_STATUS_NULL_POINTER = 1,
  AQE_STATUS_INVALID_ARGUMENT = 2,
  AQE_STATUS_IO = 3,
  AQE_STATUS_FORMAT = 4,
  AQE_STATUS_NUMERICAL = 5,
  AQE_STATUS_BUFFER_TOO_SMALL = 6,
  AQE_STATUS_FAILED = 7,
  AQE_STATUS_PANIC = 8,
} AqeStatus;

/**
 * A trained model with the parameters of its best validation epoch.
 */
typedef struct AqeModel AqeModel;

typedef struct AqeDims {
  /**
   * AP antennas.
   */
  size_t m;
  /**
   * Users.
   */
  size_t k;
  /**
   * RIS elements.
   */
  size_t n;
  /**
   * Encoder features.
   */
  size_t n_c;
  /**
   * Quantization levels per feature.
   */
  size_t levels;
  /**
   * Control message length in bits.
   */
  size_t bits;
  /**
   * Wire message length in bytes.
   */
  size_t wire_bytes;
  double power_w;
  double sigma2;
} AqeDims;

/**
 * One channel realization with its labels. Sizes in doubles:
 * `h_au` 2KM, `h_ar` 2NM, `h_ru` 2KN, `w_opt` 2MK, `theta_opt` N.
 */
typedef struct AqeChannel {
  const double *h_au;
  const double *h_ar;
  const double *h_ru;
  const double *w_opt;
  const double *theta_opt;
} AqeChannel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *aqe_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `cap > 0`) and returns the full length
 * including the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t aqe_last_error(char *buf, size_t cap);

/**
 * Loads a training checkpoint; the handle holds its best parameters.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be valid for
 * one write.
 */
enum AqeStatus aqe_model_load(const char *path, struct AqeModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`aqe_model_load`] and not be used afterwards.
 */
void aqe_model_free(struct AqeModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` valid for one write.
 */
enum AqeStatus aqe_model_dims(const struct AqeModel *model, struct AqeDims *out);

/**
 * Access-point side for one channel: writes the decoded phases (`N`
 * doubles), the beamformer (`2MK` doubles) and the wire message
 * (`msg_len` receives its length; `AQE_STATUS_BUFFER_TOO_SMALL` when
 * `msg_cap` is short).
 *
 * # Safety
 * All pointers must be valid for the sizes given by [`aqe_model_dims`].
 */
enum AqeStatus aqe_model_run(const struct AqeModel *model,
                             const struct AqeChannel *channel,
                             double *theta_out,
                             double *w_out,
                             uint8_t *msg_out,
                             size_t msg_cap,
                             size_t *msg_len);

/**
 * Controller side: phases (`N` doubles) decoded from a wire message.
 *
 * # Safety
 * `msg` must be valid for `len` bytes and `theta_out` for `N` doubles.
 */
enum AqeStatus aqe_model_decode(const struct AqeModel *model,
                                const uint8_t *msg,
                                size_t len,
                                double *theta_out);

/**
 * Weighted sum-rate of beamformer `w` (2MK doubles) with RIS phases
 * `theta` (N doubles) on `channel`, in the model's scenario.
 *
 * # Safety
 * Pointers must be valid for the sizes given by [`aqe_model_dims`].
 */
enum AqeStatus aqe_sum_rate(const struct AqeModel *model,
                            const struct AqeChannel *channel,
                            const double *theta,
                            const double *w,
                            double *rate_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AQE_WMMSE_H */
