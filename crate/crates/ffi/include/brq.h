#ifndef BRQ_H
#define BRQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BrqMethod {
  BRQ_METHOD_THM1 = 0,
  BRQ_METHOD_PROP1 = 1,
} BrqMethod;

typedef enum BrqScheme {
  BRQ_SCHEME_FIXED = 0,
  BRQ_SCHEME_VLD = 1,
  BRQ_SCHEME_VLSF = 2,
  BRQ_SCHEME_BRQ_CSIT = 3,
  BRQ_SCHEME_BRQ_SF = 4,
} BrqScheme;

/**
 * Outcome of a call.
 */
typedef enum BrqStatus {
  BRQ_STATUS_OK = 0,
  BRQ_STATUS_NULL_POINTER = 1,
  BRQ_STATUS_DOMAIN = 2,
  BRQ_STATUS_USAGE = 3,
  BRQ_STATUS_GUARD = 4,
  BRQ_STATUS_INFEASIBLE = 5,
  BRQ_STATUS_INTERNAL = 6,
} BrqStatus;

typedef enum BrqUnit {
  BRQ_UNIT_BITS = 0,
  BRQ_UNIT_NATS = 1,
} BrqUnit;

/**
 * Opaque channel handle.
 */
typedef struct BrqChannel BrqChannel;

/**
 * Knobs of the variable-length schemes.
 */
typedef struct BrqSchemeConfig {
  double epsilon;
  double beta;
  uint32_t horizon;
  double p_min;
  uint32_t max_expansions;
} BrqSchemeConfig;

/**
 * One operating point. `ln_m1` and `avg_nats` are in nats.
 */
typedef struct BrqCurvePoint {
  double ln_m1;
  double avg_blocks;
  double avg_blocklength;
  double avg_nats;
  double rate_bits;
  double eps_certified;
  double truncation_gap;
} BrqCurvePoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *brq_last_error(void);

/**
 * Creates a channel. `*out` receives a handle owned by the caller.
 *
 * # Safety
 * `out` must be null or valid for writing one pointer.
 */
enum BrqStatus brq_channel_new(double delta0,
                               double delta1,
                               double q,
                               uint32_t t,
                               struct BrqChannel **out);

/**
 * Releases a handle from [`brq_channel_new`]. Null is ignored.
 *
 * # Safety
 * `ch` must be null or a handle not yet freed.
 */
void brq_channel_free(struct BrqChannel *ch);

/**
 * Capacity in bits per channel use.
 *
 * # Safety
 * `ch` must be a live handle; `out` valid for writing.
 */
enum BrqStatus brq_capacity(const struct BrqChannel *ch, double *out);

/**
 * Dispersion per channel use (or per block), in `unit` squared.
 *
 * # Safety
 * `ch` must be a live handle; `out` valid for writing.
 */
enum BrqStatus brq_dispersion(const struct BrqChannel *ch,
                              bool per_block,
                              enum BrqUnit unit,
                              double *out);

/**
 * Normal approximation of the fixed-length rate at `n` channel uses, in
 * bits per use.
 *
 * # Safety
 * `ch` must be a live handle; `out` valid for writing.
 */
enum BrqStatus brq_normal_approx_rate(const struct BrqChannel *ch,
                                      double n,
                                      double epsilon,
                                      double *out);

/**
 * Error bound of an expanding-message-set code with `len` blocks:
 * `states[i]` is 0 (bad) or 1 (good) and `sizes[i] >= 1` the message-set
 * factor of block `i`. Uses the exact engine.
 *
 * # Safety
 * `states` and `sizes` must each point to `len` readable elements.
 */
enum BrqStatus brq_ems_bound(const struct BrqChannel *ch,
                             const uint8_t *states,
                             const double *sizes,
                             size_t len,
                             enum BrqMethod method,
                             double *out);

/**
 * Defaults used by the command line.
 */
struct BrqSchemeConfig brq_scheme_config_default(void);

/**
 * Evaluates one scheme. `x` is `ln M_1` for the variable-length schemes
 * and the number of blocks for [`BrqScheme::Fixed`].
 *
 * # Safety
 * `ch` must be a live handle, `cfg` readable and `out` valid for writing.
 */
enum BrqStatus brq_scheme_point(const struct BrqChannel *ch,
                                enum BrqScheme scheme,
                                double x,
                                const struct BrqSchemeConfig *cfg,
                                struct BrqCurvePoint *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRQ_H */
