#ifndef FEDREC_H
#define FEDREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedrecStatus {
  FEDREC_STATUS_OK = 0,
  FEDREC_STATUS_NULL_POINTER = 1,
  FEDREC_STATUS_INVALID_ARGUMENT = 2,
  FEDREC_STATUS_DIMENSION_MISMATCH = 3,
  FEDREC_STATUS_NON_FINITE = 4,
  FEDREC_STATUS_IO = 5,
  FEDREC_STATUS_FORMAT = 6,
  FEDREC_STATUS_BUFFER_TOO_SMALL = 7,
  FEDREC_STATUS_PANIC = 8,
} FedrecStatus;

/**
 * Rényi-DP accountant for federated rounds.
 */
typedef struct FedrecAccountant FedrecAccountant;

/**
 * Model parameters loaded from a checkpoint.
 */
typedef struct FedrecModel FedrecModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to fit, into `buf`. Returns the full message length in bytes
 * (excluding the terminator); `buf` may be null to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fedrec_last_error(char *buf, size_t len);

/**
 * Clips `values` to L2 norm at most `bound`, writing `len` values to `out`.
 * `out` may alias `values`.
 *
 * # Safety
 * `values` and `out` must each point to `len` valid `double`s.
 */
enum FedrecStatus fedrec_clip(const double *values, size_t len, double bound, double *out);

/**
 * L2 norm of `values`.
 *
 * # Safety
 * `values` must point to `len` valid `double`s and `out` to one.
 */
enum FedrecStatus fedrec_l2_norm(const double *values, size_t len, double *out);

/**
 * Sensitivity `2S/M` of the mean of `m` updates clipped to `bound`.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum FedrecStatus fedrec_sensitivity(double bound, size_t m, double *out);

/**
 * Fraction of 1-based `ranks` at most `k`.
 *
 * # Safety
 * `ranks` must point to `len` valid `size_t`s and `out` to a `double`.
 */
enum FedrecStatus fedrec_hits_at_k(const size_t *ranks, size_t len, size_t k, double *out);

/**
 * Mean binary-relevance nDCG@k over 1-based `ranks`.
 *
 * # Safety
 * `ranks` must point to `len` valid `size_t`s and `out` to a `double`.
 */
enum FedrecStatus fedrec_ndcg_at_k(const size_t *ranks, size_t len, size_t k, double *out);

/**
 * ε after `rounds` rounds sampling `m` of `n` clients with noise multiplier `z`.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum FedrecStatus fedrec_epsilon(size_t n,
                                 size_t m,
                                 double z,
                                 size_t rounds,
                                 double delta,
                                 double *out);

/**
 * Smallest noise multiplier whose ε after `rounds` rounds is at most `target`.
 *
 * # Safety
 * `out` must point to a writable `double`.
 */
enum FedrecStatus fedrec_calibrate_noise(double target,
                                         size_t n,
                                         size_t m,
                                         size_t rounds,
                                         double delta,
                                         double *out);

/**
 * Creates an accountant for rounds sampling `m` of `n` clients.
 *
 * # Safety
 * `out` must point to a writable handle pointer.
 */
enum FedrecStatus fedrec_accountant_new(size_t n,
                                        size_t m,
                                        double z,
                                        struct FedrecAccountant **out);

/**
 * Records `rounds` more rounds.
 *
 * # Safety
 * `acc` must be a live handle from [`fedrec_accountant_new`].
 */
enum FedrecStatus fedrec_accountant_step(struct FedrecAccountant *acc, size_t rounds);

/**
 * Rounds recorded so far.
 *
 * # Safety
 * `acc` must be a live handle and `out` a writable `size_t`.
 */
enum FedrecStatus fedrec_accountant_rounds(const struct FedrecAccountant *acc, size_t *out);

/**
 * Current ε at `delta`; infinity when `delta` is 0.
 *
 * # Safety
 * `acc` must be a live handle and `out` a writable `double`.
 */
enum FedrecStatus fedrec_accountant_epsilon(const struct FedrecAccountant *acc,
                                            double delta,
                                            double *out);

/**
 * Releases an accountant. Null is ignored.
 *
 * # Safety
 * `acc` must be null or a live handle not used afterwards.
 */
void fedrec_accountant_free(struct FedrecAccountant *acc);

/**
 * Loads a checkpoint written by the `fedrec` command line.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a writable handle pointer.
 */
enum FedrecStatus fedrec_model_load(const char *path, struct FedrecModel **out);

/**
 * Number of scalar parameters in the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a writable `size_t`.
 */
enum FedrecStatus fedrec_model_param_count(const struct FedrecModel *model, size_t *out);

/**
 * Copies the flattened parameters into `buf`, which must hold at least
 * the parameter count.
 *
 * # Safety
 * `model` must be a live handle and `buf` point to `len` writable `double`s.
 */
enum FedrecStatus fedrec_model_params(const struct FedrecModel *model, double *buf, size_t len);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not used afterwards.
 */
void fedrec_model_free(struct FedrecModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDREC_H */
