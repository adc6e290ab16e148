#ifndef DUALLQR_H
#define DUALLQR_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DlqrStatus {
  DLQR_STATUS_OK = 0,
  DLQR_STATUS_NULL_POINTER = 1,
  DLQR_STATUS_INVALID_ARGUMENT = 2,
  DLQR_STATUS_DIMENSION_MISMATCH = 3,
  // The optimizer did not reach an optimal point.
  DLQR_STATUS_SOLVER_FAILURE = 4,
  // Identification data could not determine the model.
  DLQR_STATUS_RANK_DEFICIENT = 5,
  DLQR_STATUS_NUMERICAL = 6,
  DLQR_STATUS_PANIC = 7,
} DlqrStatus;

typedef enum DlqrProgram {
  DLQR_PROGRAM_NOMINAL = 0,
  DLQR_PROGRAM_ROBUST = 1,
  DLQR_PROGRAM_DUAL = 2,
} DlqrProgram;

// Nominal estimate plus ellipsoidal uncertainty.
typedef struct DlqrModel DlqrModel;

// Time-varying gains and excitation covariances for `t = 1 … T-1`.
typedef struct DlqrPolicy DlqrPolicy;

// True plant `x_{t+1} = A x_t + B u_t + w_t`.
typedef struct DlqrSystem DlqrSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null. Valid until
// the next call into this library from the same thread.
const char *dlqr_last_error(void);

// # Safety
// `a` holds `n_x * n_x` doubles, `b` holds `n_x * n_u`; `out` is writable.
enum DlqrStatus dlqr_system_new(const double *a,
                                const double *b,
                                uintptr_t n_x,
                                uintptr_t n_u,
                                double sigma_w2,
                                struct DlqrSystem **out);

// # Safety
// `sys` is null or a handle from [`dlqr_system_new`] not yet freed.
void dlqr_system_free(struct DlqrSystem *sys);

// Runs the identification protocol on `sys` and fits the model.
//
// # Safety
// `sys` is a live handle; `out` is writable.
enum DlqrStatus dlqr_identify(const struct DlqrSystem *sys,
                              uintptr_t n_rollouts,
                              uintptr_t rollout_len,
                              double sigma_u2,
                              double delta,
                              uint64_t seed,
                              struct DlqrModel **out);

// Model from explicit estimates; `d` is `(n_x + n_u)²` doubles.
//
// # Safety
// Arrays have the stated sizes; `out` is writable.
enum DlqrStatus dlqr_model_new(const double *a_hat,
                               const double *b_hat,
                               const double *d,
                               uintptr_t n_x,
                               uintptr_t n_u,
                               double delta,
                               struct DlqrModel **out);

// Copies `Â` (`n_x²`), `B̂` (`n_x n_u`) and `D` (`(n_x+n_u)²`) into the
// buffers that are non-null.
//
// # Safety
// `model` is a live handle; non-null buffers hold the stated sizes.
enum DlqrStatus dlqr_model_matrices(const struct DlqrModel *model,
                                    double *a_hat,
                                    double *b_hat,
                                    double *d);

// # Safety
// `model` is null or a live handle.
void dlqr_model_free(struct DlqrModel *model);

// Solves one synthesis program on `model` with weights `q` (`n_x²`) and
// `r` (`n_u²`). `cost` receives the program objective.
//
// # Safety
// Pointers are live and sized as stated; `out` and `cost` are writable.
enum DlqrStatus dlqr_synthesize(const struct DlqrModel *model,
                                enum DlqrProgram program,
                                const double *q,
                                const double *r,
                                double sigma_w2,
                                uintptr_t horizon,
                                struct DlqrPolicy **out,
                                double *cost);

// Riccati gains for the plant `sys` and the optimal expected cost.
//
// # Safety
// As for [`dlqr_synthesize`].
enum DlqrStatus dlqr_riccati(const struct DlqrSystem *sys,
                             const double *q,
                             const double *r,
                             uintptr_t horizon,
                             struct DlqrPolicy **out,
                             double *cost);

// Exact expected cost of `policy` on `sys`.
//
// # Safety
// As for [`dlqr_synthesize`].
enum DlqrStatus dlqr_evaluate(const struct DlqrSystem *sys,
                              const struct DlqrPolicy *policy,
                              const double *q,
                              const double *r,
                              double *cost);

// Number of decision steps `T - 1`; 0 for a null handle.
//
// # Safety
// `policy` is null or a live handle.
uintptr_t dlqr_policy_len(const struct DlqrPolicy *policy);

// Writes `K_t` (`n_u × n_x`, row-major), `1 ≤ t ≤ len`.
//
// # Safety
// `policy` is live; `out` holds `len` doubles.
enum DlqrStatus dlqr_policy_gain(const struct DlqrPolicy *policy,
                                 uintptr_t t,
                                 double *out,
                                 uintptr_t len);

// Writes `S_t` (`n_u × n_u`), `1 ≤ t ≤ len`.
//
// # Safety
// `policy` is live; `out` holds `len` doubles.
enum DlqrStatus dlqr_policy_excitation(const struct DlqrPolicy *policy,
                                       uintptr_t t,
                                       double *out,
                                       uintptr_t len);

// # Safety
// `policy` is null or a live handle.
void dlqr_policy_free(struct DlqrPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALLQR_H */
