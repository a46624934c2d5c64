/* C interface to the piecewise sparse attention core. Generated by cbindgen; do not edit. */

#ifndef PASA_H
#define PASA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a fallible call.
 */
typedef enum {
  PasaStatus_Ok = 0,
  PasaStatus_NullPointer = 1,
  PasaStatus_InvalidArgument = 2,
  PasaStatus_DimensionMismatch = 3,
  PasaStatus_NonFinite = 4,
  PasaStatus_DegenerateNormalization = 5,
  PasaStatus_IoError = 6,
} PasaStatus;

/**
 * How unselected blocks are compensated.
 */
typedef enum {
  PasaMode_HardDrop = 0,
  PasaMode_ZerothOrder = 1,
  PasaMode_FirstOrderGlobal = 2,
  PasaMode_FirstOrderGrouped = 3,
  PasaMode_FirstOrderPerBlock = 4,
} PasaMode;

/**
 * Opaque attention instance (Q, K, V, scale).
 */
typedef struct PasaInstance PasaInstance;

/**
 * Opaque routing plan.
 */
typedef struct PasaPlan PasaPlan;

/**
 * Opaque per-timestep density schedule.
 */
typedef struct PasaSchedule PasaSchedule;

/**
 * Opaque per-block statistics for one instance.
 */
typedef struct PasaStats PasaStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Build an attention instance from row-major `seq_len x head_dim` buffers.
 * Pass `scale <= 0` for the default `1/sqrt(head_dim)`.
 *
 * # Safety
 * `q`, `k`, `v` must each point to `seq_len * head_dim` readable doubles and
 * `out` to a writable handle slot.
 */
PasaStatus pasa_instance_new(uintptr_t seq_len,
                             uintptr_t head_dim,
                             const double *q,
                             const double *k,
                             const double *v,
                             double scale,
                             PasaInstance **out);

/**
 * # Safety
 * `inst` must be a handle from [`pasa_instance_new`], not yet freed.
 */
void pasa_instance_free(PasaInstance *inst);

/**
 * Sequence length of an instance; 0 for a null handle.
 *
 * # Safety
 * `inst` must be a live handle or null.
 */
uintptr_t pasa_instance_seq_len(const PasaInstance *inst);

/**
 * Head dimension of an instance; 0 for a null handle.
 *
 * # Safety
 * `inst` must be a live handle or null.
 */
uintptr_t pasa_instance_head_dim(const PasaInstance *inst);

/**
 * Compute per-block statistics (centroids, value sums, first-order matrices
 * and their global/grouped means).
 *
 * # Safety
 * `inst` must be a live handle and `out` a writable handle slot.
 */
PasaStatus pasa_stats_new(const PasaInstance *inst,
                          uintptr_t block_size,
                          uintptr_t group_size,
                          PasaStats **out);

/**
 * # Safety
 * `stats` must be a handle from [`pasa_stats_new`], not yet freed.
 */
void pasa_stats_free(PasaStats *stats);

/**
 * Score key blocks per query block, apply the seeded stochastic bias
 * (`bias_beta = 0` for deterministic routing), and select the top `k`.
 *
 * # Safety
 * `inst` and `stats` must be live handles and `out` a writable handle slot.
 */
PasaStatus pasa_route(const PasaInstance *inst,
                      const PasaStats *stats,
                      double epsilon,
                      double bias_beta,
                      uint64_t seed,
                      uint64_t timestep,
                      uint64_t layer,
                      uint64_t head,
                      uintptr_t k,
                      PasaPlan **out);

/**
 * # Safety
 * `plan` must be a handle from [`pasa_route`], not yet freed.
 */
void pasa_plan_free(PasaPlan *plan);

/**
 * Number of selected key blocks per query block.
 *
 * # Safety
 * `plan` must be a live handle or null.
 */
uintptr_t pasa_plan_selected_len(const PasaPlan *plan, uintptr_t query_block);

/**
 * Copy the sorted selected key-block indices for one query block into
 * `indices` (capacity `cap`); `written` receives the count.
 *
 * # Safety
 * `plan` must be a live handle; `indices` must point to `cap` writable
 * entries; `written` must be writable.
 */
PasaStatus pasa_plan_selected(const PasaPlan *plan,
                              uintptr_t query_block,
                              uintptr_t *indices,
                              uintptr_t cap,
                              uintptr_t *written);

/**
 * Dense reference attention into a caller buffer of `seq_len * head_dim`
 * doubles, row-major.
 *
 * # Safety
 * `inst` must be a live handle; `out` must point to `seq_len * head_dim`
 * writable doubles.
 */
PasaStatus pasa_dense_attention(const PasaInstance *inst, double *out);

/**
 * Piecewise sparse attention into a caller buffer of `seq_len * head_dim`
 * doubles, row-major.
 *
 * # Safety
 * `inst`, `plan`, `stats` must be live handles built from the same instance;
 * `out` must point to `seq_len * head_dim` writable doubles.
 */
PasaStatus pasa_piecewise_attention(const PasaInstance *inst,
                                    const PasaPlan *plan,
                                    const PasaStats *stats,
                                    PasaMode mode,
                                    double *out);

/**
 * Build a density schedule from an L1 curve covering steps
 * `1..total_steps`, i.e. `total_steps - 1` entries.
 *
 * # Safety
 * `curve` must point to `curve_len` readable doubles and `out` to a writable
 * handle slot.
 */
PasaStatus pasa_schedule_build(const double *curve,
                               uintptr_t curve_len,
                               double rho,
                               uintptr_t total_steps,
                               double dense_frac,
                               PasaSchedule **out);

/**
 * # Safety
 * `schedule` must be a handle from [`pasa_schedule_build`], not yet freed.
 */
void pasa_schedule_free(PasaSchedule *schedule);

/**
 * Number of sparse steps in the schedule; 0 for a null handle.
 *
 * # Safety
 * `schedule` must be a live handle or null.
 */
uintptr_t pasa_schedule_num_sparse_steps(const PasaSchedule *schedule);

/**
 * Number of leading dense steps; 0 for a null handle.
 *
 * # Safety
 * `schedule` must be a live handle or null.
 */
uintptr_t pasa_schedule_dense_prefix(const PasaSchedule *schedule);

/**
 * Effective density of the `sparse_index`-th sparse step.
 *
 * # Safety
 * `schedule` must be a live handle; `density` must be writable.
 */
PasaStatus pasa_schedule_density(const PasaSchedule *schedule,
                                 uintptr_t sparse_index,
                                 double *density);

/**
 * Top-k block count for a density; at least 1, at most `num_blocks`.
 * Returns 0 for invalid arguments.
 */
uintptr_t pasa_density_to_k(double rho, uintptr_t num_blocks);

/**
 * Relative Frobenius error and max per-row L2 error between two row-major
 * `rows x cols` buffers.
 *
 * # Safety
 * `got` and `want` must point to `rows * cols` readable doubles;
 * `rel_frobenius` and `max_row_l2` must be writable.
 */
PasaStatus pasa_fidelity(const double *got,
                         const double *want,
                         uintptr_t rows,
                         uintptr_t cols,
                         double *rel_frobenius,
                         double *max_row_l2);

/**
 * Library version as a static C string.
 */
const char *pasa_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PASA_H */
