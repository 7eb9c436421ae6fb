#ifndef STC_H
#define STC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StcStatus {
  STC_STATUS_OK = 0,
  STC_STATUS_NULL_POINTER = 1,
  STC_STATUS_INVALID_ARGUMENT = 2,
  STC_STATUS_CONFIG = 3,
  STC_STATUS_NUMERICAL = 4,
  STC_STATUS_IO = 5,
  STC_STATUS_PANIC = 6,
} StcStatus;

typedef enum StcPolicy {
  STC_POLICY_TH = 0,
  STC_POLICY_TTC = 1,
  STC_POLICY_SDH = 2,
} StcPolicy;

typedef enum StcController {
  STC_CONTROLLER_NOMINAL = 0,
  STC_CONTROLLER_STC = 1,
  STC_CONTROLLER_OBSERVER_NAIVE = 2,
  STC_CONTROLLER_OBSERVER_ROBUST = 3,
} StcController;

// Chain configuration handle.
typedef struct StcConfig StcConfig;

// Simulation result handle.
typedef struct StcRecord StcRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *stc_last_error(void);

// Load a preset name or a JSON config path.
//
// # Safety
// `source` must be a NUL-terminated string and `out` a valid pointer.
enum StcStatus stc_config_load(const char *source, struct StcConfig **out);

// Parse a JSON config document.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum StcStatus stc_config_from_json(const char *json, struct StcConfig **out);

// # Safety
// `cfg` must come from this library and not be used afterwards.
void stc_config_free(struct StcConfig *cfg);

// # Safety
// `cfg` must be a live handle or null.
size_t stc_config_n_followers(const struct StcConfig *cfg);

// Replace the spacing policy and its time headway.
//
// # Safety
// `cfg` must be a live handle.
enum StcStatus stc_config_set_policy(struct StcConfig *cfg, enum StcPolicy policy, double tau);

// # Safety
// `cfg` must be a live handle.
enum StcStatus stc_config_set_saturation(struct StcConfig *cfg, bool enabled);

// Simulate scenario 1 (`scenario = 1`, head braking at `accel` for
// `duration`) or scenario 2 (`scenario = 2`, tail follower forced).
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum StcStatus stc_simulate(const struct StcConfig *cfg,
                            uint32_t scenario,
                            double accel,
                            double duration,
                            enum StcController controller,
                            struct StcRecord **out);

// # Safety
// `rec` must come from this library and not be used afterwards.
void stc_record_free(struct StcRecord *rec);

// Number of time samples.
//
// # Safety
// `rec` must be a live handle or null.
size_t stc_record_len(const struct StcRecord *rec);

// # Safety
// `rec` must be a live handle and `out` a valid pointer.
enum StcStatus stc_record_min_spacing(const struct StcRecord *rec, size_t vehicle, double *out);

// Copy the spacing trace of `vehicle` into `buf`, which holds `cap`
// values. `written` receives the trace length; when it exceeds `cap` only
// the first `cap` values are copied.
//
// # Safety
// `rec` must be a live handle, `buf` must hold `cap` doubles and
// `written` must be a valid pointer.
enum StcStatus stc_record_spacing(const struct StcRecord *rec,
                                  size_t vehicle,
                                  double *buf,
                                  size_t cap,
                                  size_t *written);

// Number of vehicles that collided.
//
// # Safety
// `rec` must be a live handle or null.
size_t stc_record_collisions(const struct StcRecord *rec);

// Write the record as CSV.
//
// # Safety
// `rec` must be a live handle and `path` a NUL-terminated string.
enum StcStatus stc_record_write_csv(const struct StcRecord *rec, const char *path);

// One safety-filter evaluation on the nonlinear plant. `state` holds
// `[s_0, v_0, ..., s_N, v_N]`.
//
// # Safety
// `cfg` must be a live handle, `state` must hold `len` doubles and `u_out`
// must be a valid pointer.
enum StcStatus stc_filter(const struct StcConfig *cfg,
                          const double *state,
                          size_t len,
                          double head_speed,
                          double u_nominal,
                          double *u_out);

// Peak head-to-tail gain of the nominal controller over a logarithmic
// grid ending at `omega_max`.
//
// # Safety
// `cfg` must be a live handle; output pointers must be valid.
enum StcStatus stc_string_stability(const struct StcConfig *cfg,
                                    double omega_max,
                                    size_t samples,
                                    double *max_gain,
                                    bool *stable);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STC_H */
