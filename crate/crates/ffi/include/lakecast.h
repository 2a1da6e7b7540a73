#ifndef LAKECAST_H
#define LAKECAST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_INVALID_ARGUMENT = 2,
  LC_STATUS_CONTRACT = 3,
  LC_STATUS_NUMERICAL = 4,
  LC_STATUS_FIT = 5,
  LC_STATUS_DATA = 6,
  LC_STATUS_CONFIG = 7,
  LC_STATUS_STATE = 8,
  LC_STATUS_IO = 9,
  LC_STATUS_CSV = 10,
  LC_STATUS_PANIC = 11,
} LcStatus;

typedef enum LcModel {
  LC_MODEL_GPBC = 0,
  LC_MODEL_GPBC_NOPHI = 1,
  LC_MODEL_GPGLM = 2,
  LC_MODEL_OGP = 3,
  LC_MODEL_GLM_RAW = 4,
} LcModel;

/**
 * A parsed run configuration.
 */
typedef struct LcConfig LcConfig;

/**
 * A trained engine together with the campaign it reads from. Holds the
 * state-directory lock while open.
 */
typedef struct LcEngine LcEngine;

/**
 * Forecast rows produced by one call.
 */
typedef struct LcForecasts LcForecasts;

/**
 * One forecast row.
 */
typedef struct LcForecast {
  enum LcModel model;
  int32_t ref_date;
  uint32_t horizon;
  uint32_t depth;
  double mean;
  double sd;
  double lo90;
  double hi90;
} LcForecast;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t lc_last_error_message(char *buf, size_t len);

/**
 * Gaussian log predictive density of `y`.
 *
 * # Safety
 * `out` must be null or point to writable memory.
 */
enum LcStatus lc_log_score(double y, double mean, double sd, double *out);

/**
 * Whether `y` falls inside the central 90% interval of N(mean, sd²).
 */
bool lc_coverage90(double y, double mean, double sd);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LcStatus lc_config_load(const char *path, struct LcConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from [`lc_config_load`] not yet freed.
 */
void lc_config_free(struct LcConfig *cfg);

/**
 * Writes the simulated ensemble and field files named by the config.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum LcStatus lc_simulate(const struct LcConfig *cfg);

/**
 * Trains all models and saves the engine state under the state directory.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum LcStatus lc_train(const struct LcConfig *cfg);

/**
 * Loads the saved engine and the campaign files named by the config.
 *
 * # Safety
 * `cfg` must be a live config handle; `out` must be writable.
 */
enum LcStatus lc_engine_open(const struct LcConfig *cfg, struct LcEngine **out);

/**
 * # Safety
 * `engine` must be null or a handle from [`lc_engine_open`] not yet freed.
 */
void lc_engine_free(struct LcEngine *engine);

/**
 * Next reference date the engine will forecast from, as `YYYYMMDD`.
 *
 * # Safety
 * `engine` must be a live engine handle; `out` must be writable.
 */
enum LcStatus lc_engine_current(const struct LcEngine *engine, int32_t *out);

/**
 * Runs one daily step. When `persist` is true the new state is saved
 * under the state directory. The rows are returned in a new handle.
 *
 * # Safety
 * `engine` must be a live engine handle; `out` must be writable.
 */
enum LcStatus lc_engine_step(struct LcEngine *engine, bool persist, struct LcForecasts **out);

/**
 * Retrospective forecasts for reference dates `from..=to` (`YYYYMMDD`).
 *
 * # Safety
 * `engine` must be a live engine handle; `out` must be writable.
 */
enum LcStatus lc_engine_hindcast(const struct LcEngine *engine,
                                 int32_t from,
                                 int32_t to,
                                 struct LcForecasts **out);

/**
 * # Safety
 * `rows` must be a live forecast handle.
 */
size_t lc_forecasts_len(const struct LcForecasts *rows);

/**
 * Pointer to the contiguous rows, valid until the handle is freed.
 *
 * # Safety
 * `rows` must be a live forecast handle.
 */
const struct LcForecast *lc_forecasts_data(const struct LcForecasts *rows);

/**
 * # Safety
 * `rows` must be null or a forecast handle not yet freed.
 */
void lc_forecasts_free(struct LcForecasts *rows);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LAKECAST_H */
