#ifndef CONSUQ_H
#define CONSUQ_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ConsuqStatus {
  CONSUQ_STATUS_OK = 0,
  CONSUQ_STATUS_NULL_POINTER = 1,
  CONSUQ_STATUS_INVALID_UTF8 = 2,
  CONSUQ_STATUS_INVALID_CONFIG = 3,
  CONSUQ_STATUS_INVALID_ARGUMENT = 4,
  CONSUQ_STATUS_PARSE_ERROR = 5,
  CONSUQ_STATUS_COMPUTATION_ERROR = 6,
  CONSUQ_STATUS_PANIC = 7,
} ConsuqStatus;

typedef enum ConsuqCombineMode {
  CONSUQ_COMBINE_MODE_AS_PRINTED = 0,
  CONSUQ_COMBINE_MODE_GUM_SQUARED = 1,
} ConsuqCombineMode;

// Opaque streaming pipeline.
typedef struct ConsuqPipeline ConsuqPipeline;

typedef struct ConsuqEstimate {
  double u;
  double interval_lo;
  double interval_hi;
  double point_estimate;
} ConsuqEstimate;

typedef struct ConsuqDistanceUncertainty {
  double prefactor;
  double signed_value;
  double magnitude;
  bool degenerate;
} ConsuqDistanceUncertainty;

typedef struct ConsuqVerdict {
  double pfh;
  double r;
  bool pass;
  // Positive infinity when `pfh` is zero.
  double margin_orders;
} ConsuqVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static string. Do not free.
const char *consuq_version(void);

// Message for the last failed call on this thread, or NULL. The caller owns
// the returned string.
char *consuq_last_error(void);

// # Safety
// `s` must come from this library and not have been freed. NULL is ignored.
void consuq_string_free(char *s);

// Builds a pipeline from TOML configuration text.
//
// # Safety
// `config_toml` must be a NUL-terminated string; `out` must be writable.
enum ConsuqStatus consuq_pipeline_new(const char *config_toml, struct ConsuqPipeline **out);

// # Safety
// `pipeline` must come from [`consuq_pipeline_new`] and not have been freed.
// NULL is ignored.
void consuq_pipeline_free(struct ConsuqPipeline *pipeline);

// Feeds one JSONL frame record. When the record closes a window,
// `out_report` receives the window report as one JSON line (caller frees);
// otherwise it is set to NULL.
//
// # Safety
// `pipeline` must be a live handle, `frame_json` NUL-terminated and
// `out_report` writable.
enum ConsuqStatus consuq_pipeline_push(struct ConsuqPipeline *pipeline,
                                       const char *frame_json,
                                       char **out_report);

// Ends the stream; `out_dropped` receives the frames of the incomplete
// trailing window.
//
// # Safety
// `pipeline` must be a live handle; `out_dropped` may be NULL.
enum ConsuqStatus consuq_pipeline_finish(struct ConsuqPipeline *pipeline, size_t *out_dropped);

// Most frames the pipeline has held at once; 0 for NULL.
//
// # Safety
// `pipeline` must be a live handle or NULL.
size_t consuq_pipeline_peak_buffered(const struct ConsuqPipeline *pipeline);

// Combines `n` terms `(sensitivity[i], u[i])`.
//
// # Safety
// `sensitivity` and `u` must point to `n` doubles; `out` must be writable.
enum ConsuqStatus consuq_combine(const double *sensitivity,
                                 const double *u,
                                 size_t n,
                                 enum ConsuqCombineMode mode,
                                 double *out);

// Uncertainty `slope * x + intercept`, clamped at zero.
//
// # Safety
// `out` must be writable.
enum ConsuqStatus consuq_type_b_linear(double slope, double intercept, double x, double *out);

// `|a - b| - reference` for two 3-vectors.
//
// # Safety
// `a` and `b` must point to 3 doubles; `out` must be writable.
enum ConsuqStatus consuq_joint_pair_deviation(const double *a,
                                              const double *b,
                                              double reference,
                                              double *out);

// Bootstrapped uncertainty of `n` signed deviations.
//
// # Safety
// `values` must point to `n` doubles; `out` must be writable.
enum ConsuqStatus consuq_bootstrap_uncertainty(const double *values,
                                               size_t n,
                                               size_t resamples,
                                               uint64_t seed,
                                               double confidence,
                                               struct ConsuqEstimate *out);

// Uncertainty of the human-robot distance for positions `r_h`, `r_r`.
//
// # Safety
// `r_h` and `r_r` must point to 3 doubles; `out` must be writable.
enum ConsuqStatus consuq_hr_distance_uncertainty(const double *r_h,
                                                 const double *r_r,
                                                 double u_rh,
                                                 double u_rr,
                                                 struct ConsuqDistanceUncertainty *out);

// Checks `u_c * l_bio <= lambda`.
//
// # Safety
// `out` must be writable.
enum ConsuqStatus consuq_check_limit(double u_c,
                                     double l_bio,
                                     double lambda,
                                     struct ConsuqVerdict *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONSUQ_H */
