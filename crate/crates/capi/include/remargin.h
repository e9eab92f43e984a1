#ifndef REMARGIN_H
#define REMARGIN_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit codes, plus FFI-specific failures.
 */
typedef enum {
  RM_STATUS_OK = 0,
  RM_STATUS_IO = 1,
  RM_STATUS_VALIDATION = 2,
  /**
   * Inputs valid but outside the theorem regime.
   */
  RM_STATUS_GATE = 3,
  /**
   * A certified bound was violated.
   */
  RM_STATUS_BOUND = 4,
  RM_STATUS_NULL_POINTER = 5,
  RM_STATUS_INVALID_UTF8 = 6,
  RM_STATUS_PANIC = 7,
} RmStatus;

/**
 * Opaque coupling handle.
 */
typedef struct RmCoupling RmCoupling;

/**
 * Opaque marginal-density handle.
 */
typedef struct RmMarginal RmMarginal;

/**
 * Opaque product-space handle.
 */
typedef struct RmSpace RmSpace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread; empty string when no error has been
 * recorded. The pointer stays valid until the next failing call on the
 * same thread.
 */
const char *rm_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *rm_version(void);

/**
 * Release a string returned through an out-pointer.
 *
 * # Safety
 * `s` must have been returned by this library and not freed before.
 */
void rm_string_free(char *s);

/**
 * Load factor space files (in coordinate order) and assemble the product.
 *
 * # Safety
 * `paths` must point to `n_paths` valid NUL-terminated strings; `out`
 * must be a valid pointer.
 */
RmStatus rm_space_load(const char *const *paths, uintptr_t n_paths, RmSpace **out);

/**
 * # Safety
 * `space` must be a live handle from [`rm_space_load`] (or null).
 */
void rm_space_free(RmSpace *space);

/**
 * Number of factors of a product space; 0 on null.
 *
 * # Safety
 * `space` must be a live handle or null.
 */
uintptr_t rm_space_factor_count(const RmSpace *space);

/**
 * Load a coupling file over the given product space.
 *
 * # Safety
 * Pointer arguments must be valid; `space` must be a live handle.
 */
RmStatus rm_coupling_load(const char *path, const RmSpace *space, RmCoupling **out);

/**
 * Write a coupling in the structured file format.
 *
 * # Safety
 * Pointer arguments must be valid; `coupling` must be a live handle.
 */
RmStatus rm_coupling_save(const RmCoupling *coupling, const char *path);

/**
 * # Safety
 * `coupling` must be a live handle from this library (or null).
 */
void rm_coupling_free(RmCoupling *coupling);

/**
 * Number of grid cells of a coupling; 0 on null.
 *
 * # Safety
 * `coupling` must be a live handle or null.
 */
uintptr_t rm_coupling_cell_count(const RmCoupling *coupling);

/**
 * Copy the coupling values (canonical row-major order) into `buf`.
 *
 * # Safety
 * `buf` must point to at least `len` doubles; `coupling` must be live.
 */
RmStatus rm_coupling_values(const RmCoupling *coupling, double *buf, uintptr_t len);

/**
 * Weighted total mass of a coupling; NaN on null.
 *
 * # Safety
 * `coupling` must be a live handle or null.
 */
double rm_coupling_total_mass(const RmCoupling *coupling);

/**
 * Load a marginal file (CSV or structured) for factor `coord`.
 *
 * # Safety
 * Pointer arguments must be valid; `space` must be a live handle.
 */
RmStatus rm_marginal_load(const char *path,
                          const RmSpace *space,
                          uintptr_t coord,
                          RmMarginal **out);

/**
 * # Safety
 * `marginal` must be a live handle from this library (or null).
 */
void rm_marginal_free(RmMarginal *marginal);

/**
 * Correct a coupling to the given targets (one per coordinate, in order).
 *
 * `modulus_json` configures the schedule modulus (null means empirical);
 * `eps_override` replaces the automatic schedule when it is a finite
 * positive value (pass NaN to use the schedule). On success,
 * `out_coupling` receives the corrected coupling and, when
 * `out_report_json` is non-null, a JSON report string.
 *
 * # Safety
 * Pointer arguments must be valid; `space`, `coupling` and all `targets`
 * must be live handles.
 */
RmStatus rm_correct(const RmSpace *space,
                    const RmCoupling *coupling,
                    const RmMarginal *const *targets,
                    uintptr_t n_targets,
                    const char *modulus_json,
                    double eps_override,
                    uint64_t seed,
                    RmCoupling **out_coupling,
                    char **out_report_json);

/**
 * Evaluate the correction threshold sigma_j(eps) for one coordinate of a
 * coupling, writing the value through `out_sigma`.
 *
 * # Safety
 * Pointer arguments must be valid; `space` and `coupling` must be live.
 */
RmStatus rm_sigma_eval(const RmSpace *space,
                       const RmCoupling *coupling,
                       const char *modulus_json,
                       uintptr_t coord,
                       double eps,
                       uint64_t seed,
                       double *out_sigma);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REMARGIN_H */
