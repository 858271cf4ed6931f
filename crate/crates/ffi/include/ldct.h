#ifndef LDCT_H
#define LDCT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Config, stage and numeric failures use the CLI exit codes.
 */
typedef enum LdctStatus {
  LDCT_STATUS_OK = 0,
  LDCT_STATUS_INVALID_ARGUMENT = 1,
  LDCT_STATUS_CONFIG = 2,
  LDCT_STATUS_STAGE = 3,
  LDCT_STATUS_NUMERIC = 4,
  /**
   * Internal panic; the library state is still usable.
   */
  LDCT_STATUS_INTERNAL = 5,
} LdctStatus;

/**
 * Volumes held by a run.
 */
typedef enum LdctVolume {
  LDCT_VOLUME_NOISY = 0,
  LDCT_VOLUME_REFINED = 1,
  /**
   * Noise-free reconstruction through the same chain.
   */
  LDCT_VOLUME_REFERENCE = 2,
} LdctVolume;

/**
 * Resolved pipeline configuration.
 */
typedef struct LdctConfig LdctConfig;

/**
 * Output of one pipeline run.
 */
typedef struct LdctRun LdctRun;

/**
 * Simulated acquisition (clean, full-dose and low-dose streams).
 */
typedef struct LdctSimulation LdctSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ldct_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next library call on the same thread.
 */
const char *ldct_last_error(void);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LdctStatus ldct_config_default(struct LdctConfig **out);

/**
 * Loads a TOML configuration and applies `n_overrides` `key=value` strings.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `overrides` an array of
 * `n_overrides` such strings (may be null when zero) and `out` valid.
 */
enum LdctStatus ldct_config_load(const char *path,
                                 const char *const *overrides,
                                 size_t n_overrides,
                                 struct LdctConfig **out);

/**
 * # Safety
 * `cfg` must come from this library (or be null) and not be used afterwards.
 */
void ldct_config_free(struct LdctConfig *cfg);

/**
 * Writes the 64-character configuration digest plus NUL into `buf`
 * (`len >= 65`).
 *
 * # Safety
 * `cfg` must be a live handle and `buf` writable for `len` bytes.
 */
enum LdctStatus ldct_config_hash(const struct LdctConfig *cfg, char *buf, size_t len);

/**
 * Projects the configured phantom and simulates the configured dose.
 *
 * # Safety
 * `cfg` must be a live handle and `out` valid.
 */
enum LdctStatus ldct_simulate(const struct LdctConfig *cfg, struct LdctSimulation **out);

/**
 * Number of projection views in the simulation (0 for null).
 *
 * # Safety
 * `sim` must be a live handle or null.
 */
size_t ldct_simulation_views(const struct LdctSimulation *sim);

/**
 * # Safety
 * `sim` must come from this library (or be null) and not be used afterwards.
 */
void ldct_simulation_free(struct LdctSimulation *sim);

/**
 * Runs rebinning, denoising, reconstruction and refinement. Checkpoints
 * named by the configuration are loaded for the learned modes.
 *
 * # Safety
 * `cfg` and `sim` must be live handles and `out` valid.
 */
enum LdctStatus ldct_run(const struct LdctConfig *cfg,
                         const struct LdctSimulation *sim,
                         struct LdctRun **out);

/**
 * Number of target slices (0 for null).
 *
 * # Safety
 * `run` must be a live handle or null.
 */
size_t ldct_run_slices(const struct LdctRun *run);

/**
 * Image side length in pixels (0 for null).
 *
 * # Safety
 * `run` must be a live handle or null.
 */
size_t ldct_run_image_size(const struct LdctRun *run);

/**
 * Copies a volume (slice-major, row-major HU) into `buf`, which must hold
 * `slices * size * size` floats.
 *
 * # Safety
 * `run` must be a live handle and `buf` writable for `len` floats.
 */
enum LdctStatus ldct_run_copy_volume(const struct LdctRun *run,
                                     enum LdctVolume which,
                                     float *buf,
                                     size_t len);

/**
 * # Safety
 * `run` must come from this library (or be null) and not be used afterwards.
 */
void ldct_run_free(struct LdctRun *run);

/**
 * Shepp-Logan ramp taps for an odd `length` and sample spacing (mm).
 *
 * # Safety
 * `out` must be writable for `length` doubles.
 */
enum LdctStatus ldct_shepp_logan_kernel(size_t length, double spacing_mm, double *out);

/**
 * Per-element noise prior Φ for `n` detector elements.
 *
 * # Safety
 * All arrays must hold `n` doubles; `phi` must be writable.
 */
enum LdctStatus ldct_noise_prior(const double *p_low,
                                 const double *n_low,
                                 const double *n_full,
                                 size_t n,
                                 double *phi);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LDCT_H */
