#ifndef STCF_H
#define STCF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes returned by every fallible function.
 */
typedef enum StcfStatus {
  STCF_STATUS_OK = 0,
  STCF_STATUS_NULL_POINTER = 1,
  STCF_STATUS_INVALID_ARGUMENT = 2,
  STCF_STATUS_DOMAIN = 3,
  STCF_STATUS_SHAPE = 4,
  STCF_STATUS_NON_FINITE = 5,
  STCF_STATUS_STATE = 6,
  STCF_STATUS_CONFIG = 7,
  STCF_STATUS_TRAINING = 8,
  STCF_STATUS_METRIC = 9,
  STCF_STATUS_CONTRACT = 10,
  STCF_STATUS_IO = 11,
  STCF_STATUS_BUFFER_TOO_SMALL = 12,
  STCF_STATUS_PANIC = 13,
  STCF_STATUS_PARSE = 14,
} StcfStatus;

/*
 Opaque dataset handle.
 */
typedef struct StcfDataset StcfDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *stcf_version(void);

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `capacity`). Returns the full message length excluding NUL.

 # Safety
 `buf` must be null or valid for `capacity` bytes.
 */
size_t stcf_last_error_message(char *buf, size_t capacity);

/*
 Simulates a synthetic series of `length` steps on a `resolution`² unit
 square. `gaussian` selects the gaussian proximity kernel when nonzero.

 # Safety
 `out` must be valid for writing one pointer.
 */
enum StcfStatus stcf_simulate(size_t length,
                              size_t resolution,
                              uint64_t seed,
                              int32_t gaussian,
                              struct StcfDataset **out);

/*
 Loads a dataset directory written by the `stcf` CLI.

 # Safety
 `dir` must be a NUL-terminated string and `out` valid for one pointer.
 */
enum StcfStatus stcf_dataset_load(const char *dir, struct StcfDataset **out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `h` must come from this library and not be used afterwards.
 */
void stcf_dataset_free(struct StcfDataset *h);

/*
 Series length T.

 # Safety
 `h` must be a live handle and `out` valid for writing.
 */
enum StcfStatus stcf_dataset_len(const struct StcfDataset *h, size_t *out);

/*
 Per-step treatment and outcome counts. Either output may be null.

 # Safety
 Non-null outputs must be valid for `capacity` elements.
 */
enum StcfStatus stcf_dataset_counts(const struct StcfDataset *h,
                                    uint64_t *treatments,
                                    uint64_t *outcomes,
                                    size_t capacity);

/*
 ln Pois(k; λ).

 # Safety
 `out` must be valid for writing.
 */
enum StcfStatus stcf_poisson_log_pmf(uint64_t k, double lambda, double *out);

/*
 Simulation ground truth over the whole region for duration `m` and
 magnitude `c`.

 # Safety
 `h` must be a live handle; `value` and `standard_error` valid for writing
 (`standard_error` may be null).
 */
enum StcfStatus stcf_ground_truth(const struct StcfDataset *h,
                                  size_t m,
                                  double c,
                                  size_t replications,
                                  uint64_t seed,
                                  double *value,
                                  double *standard_error);

/*
 Fits the models and returns the IPW estimate over the configured ω.
 `config_toml` may be null for the benchmark configuration; `kernel`
 nonzero forces the kernel intensity backend.

 # Safety
 `h` must be a live handle, `config_toml` null or NUL-terminated, and `out`
 valid for writing.
 */
enum StcfStatus stcf_estimate(const struct StcfDataset *h,
                              size_t m,
                              double c,
                              const char *config_toml,
                              int32_t kernel,
                              uint64_t seed,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STCF_H */
