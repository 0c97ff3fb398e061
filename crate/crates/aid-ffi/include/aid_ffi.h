/* C interface to the toy rectified-flow transformer with gated per-token text modulation. */

#ifndef AID_FFI_H
#define AID_FFI_H

/* Generated by cbindgen from the aid-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Modulation participation during sampling.
 */
typedef enum {
  AID_SAMPLE_MODE_OFF = 0,
  AID_SAMPLE_MODE_LEARNED = 1,
} AidSampleMode;

/**
 * Status codes mirroring the CLI exit-code convention.
 */
typedef enum {
  AID_STATUS_OK = 0,
  /**
   * Contract, configuration, i/o, or format failure.
   */
  AID_STATUS_CONTRACT_ERROR = 1,
  /**
   * Non-finite numerics.
   */
  AID_STATUS_NUMERIC_ERROR = 2,
  /**
   * Null pointer or malformed argument at the boundary.
   */
  AID_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Output buffer capacity too small.
   */
  AID_STATUS_BUFFER_TOO_SMALL = 4,
} AidStatus;

/**
 * Loaded checkpoint: frozen weights plus optional modulation stacks.
 */
typedef struct AidModel AidModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length in bytes.
 */
uintptr_t aid_last_error(char *buf, uintptr_t cap);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *aid_version(void);

/**
 * Load a checkpoint directory. On success writes a handle to `out`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be valid.
 */
AidStatus aid_model_load(const char *path, AidModel **out);

/**
 * # Safety
 * `model` must come from `aid_model_load` and not be freed twice.
 */
void aid_model_free(AidModel *model);

uintptr_t aid_model_num_blocks(const AidModel *model);

uintptr_t aid_model_text_len(const AidModel *model);

uintptr_t aid_model_latent_len(const AidModel *model);

uintptr_t aid_model_grid_cells(const AidModel *model);

bool aid_model_has_modulation(const AidModel *model);

/**
 * Sample one trajectory and write the final latent (length
 * `aid_model_latent_len`) into `out_latent`.
 *
 * # Safety
 * `model` must be a live handle; `out_latent` must hold `latent_cap` f32s.
 */
AidStatus aid_sample_latent(const AidModel *model,
                            uint32_t color,
                            uint32_t count,
                            uintptr_t num_steps,
                            double cfg_scale,
                            uint64_t seed,
                            AidSampleMode mode,
                            float *out_latent,
                            uintptr_t latent_cap);

/**
 * Sample and decode to grid codes (length `aid_model_grid_cells`).
 *
 * # Safety
 * Same rules as `aid_sample_latent`; `out_codes` must hold `codes_cap` u8s.
 */
AidStatus aid_sample_grid(const AidModel *model,
                          uint32_t color,
                          uint32_t count,
                          uintptr_t num_steps,
                          double cfg_scale,
                          uint64_t seed,
                          AidSampleMode mode,
                          uint8_t *out_codes,
                          uintptr_t codes_cap);

/**
 * Evaluate one block's modulation coefficients for a prompt at time `t`;
 * writes `aid_model_text_len` values, each strictly inside (-1, 1).
 *
 * # Safety
 * `model` must be a live handle; `out_alpha` must hold `alpha_cap` f32s.
 */
AidStatus aid_compute_alpha(const AidModel *model,
                            uintptr_t block,
                            uint32_t color,
                            uint32_t count,
                            double t,
                            float *out_alpha,
                            uintptr_t alpha_cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AID_FFI_H */
