#ifndef PROTOMOE_H
#define PROTOMOE_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PmoeStatus {
  PMOE_STATUS_OK = 0,
  PMOE_STATUS_NULL_POINTER = 1,
  PMOE_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid strategy, capacity factor or other configuration value.
   */
  PMOE_STATUS_CONFIG = 3,
  /**
   * Config text rejected; the message carries line and key.
   */
  PMOE_STATUS_PARSE = 4,
  /**
   * Malformed data such as a bad probability matrix or plan dump.
   */
  PMOE_STATUS_INPUT = 5,
  PMOE_STATUS_DIMENSION = 6,
  /**
   * A computation produced NaN or infinity.
   */
  PMOE_STATUS_NUMERIC = 7,
  PMOE_STATUS_IO = 8,
  /**
   * The quantity has no value for these inputs (c_v of an all-zero load).
   */
  PMOE_STATUS_UNDEFINED = 9,
  PMOE_STATUS_OUT_OF_RANGE = 10,
  PMOE_STATUS_PANIC = 11,
} PmoeStatus;

typedef enum PmoeCapacityMode {
  /**
   * `ceil(k*T/N*factor)`.
   */
  PMOE_CAPACITY_MODE_STANDARD = 0,
  /**
   * Slot count of the top-1 baseline at the same factor.
   */
  PMOE_CAPACITY_MODE_LIMITED = 1,
} PmoeCapacityMode;

/**
 * Per-strategy cost rows of a single-block comparison.
 */
typedef struct PmoeComparison PmoeComparison;

/**
 * Parsed and validated experiment config.
 */
typedef struct PmoeConfig PmoeConfig;

/**
 * Capacity-constrained dispatch plan.
 */
typedef struct PmoePlan PmoePlan;

/**
 * One token's selection and where it landed.
 */
typedef struct PmoeAssignment {
  size_t token;
  /**
   * Position among the token's selections.
   */
  size_t rank;
  size_t expert;
  /**
   * Buffer slot in the expert, or -1 when dropped for lack of capacity.
   */
  int64_t slot;
  double weight;
} PmoeAssignment;

typedef struct PmoeStrategyCost {
  size_t capacity;
  uint64_t expert_flops;
  uint64_t moe_layer_flops;
  uint64_t total_flops;
  uint64_t comm_entries;
  double dropped_fraction;
} PmoeStrategyCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *pmoe_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pmoe_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 */
void pmoe_string_free(char *s);

/**
 * Expert capacity for `tokens` tokens under `strategy` (`top<k>` or
 * `<Z>top1`) over `num_experts` experts.
 */
enum PmoeStatus pmoe_capacity(const char *strategy,
                              size_t num_experts,
                              size_t tokens,
                              double capacity_factor,
                              enum PmoeCapacityMode mode,
                              size_t *out_capacity);

/**
 * Coefficient of variation (population std / mean) of per-expert loads.
 * Returns `PMOE_STATUS_UNDEFINED` when the mean is zero.
 */
enum PmoeStatus pmoe_coefficient_of_variation(const double *counts, size_t len, double *out_cv);

/**
 * Comparison counts of expert selection for `tokens` tokens.
 */
enum PmoeStatus pmoe_routing_op_count(const char *strategy,
                                      size_t num_experts,
                                      size_t tokens,
                                      uint64_t *out_total,
                                      uint64_t *out_critical_path);

/**
 * Parses config text. On `PMOE_STATUS_PARSE` the last error names the
 * line and key.
 */
enum PmoeStatus pmoe_config_parse(const char *text, struct PmoeConfig **out_config);

void pmoe_config_free(struct PmoeConfig *config);

/**
 * Fully resolved config text, including defaults. Free with `pmoe_string_free`.
 */
enum PmoeStatus pmoe_config_effective(const struct PmoeConfig *config, char **out_text);

/**
 * Runs the experiment, writing its artifacts under `out_dir`.
 * `out_exit_code` receives the CLI exit code: 0 passed, 1 check failed,
 * 2 diverged.
 */
enum PmoeStatus pmoe_config_run(const struct PmoeConfig *config,
                                const char *out_dir,
                                int32_t *out_exit_code);

/**
 * Top-k routing of a row-major `tokens x num_experts` probability matrix.
 * With `renormalize` the k selected probabilities are re-softmaxed into
 * gate weights, otherwise the raw probabilities are used.
 */
enum PmoeStatus pmoe_plan_from_topk(const double *probs,
                                    size_t tokens,
                                    size_t num_experts,
                                    size_t k,
                                    bool renormalize,
                                    size_t capacity,
                                    struct PmoePlan **out_plan);

/**
 * Prototyped routing: `probs` holds `prototypes` consecutive row-major
 * `tokens x experts_per_prototype` matrices. Each prototype picks its top
 * expert; global expert index is `z * experts_per_prototype + j`.
 */
enum PmoeStatus pmoe_plan_from_prototypes(const double *probs,
                                          size_t tokens,
                                          size_t prototypes,
                                          size_t experts_per_prototype,
                                          size_t capacity,
                                          struct PmoePlan **out_plan);

/**
 * Parses a plan dump produced by `pmoe_plan_dump`.
 */
enum PmoeStatus pmoe_plan_from_dump(const char *text, struct PmoePlan **out_plan);

void pmoe_plan_free(struct PmoePlan *plan);

/**
 * Line-oriented text form of the plan. Free with `pmoe_string_free`.
 */
enum PmoeStatus pmoe_plan_dump(const struct PmoePlan *plan, char **out_text);

/**
 * Token count, expert count, capacity and number of assignments.
 */
enum PmoeStatus pmoe_plan_shape(const struct PmoePlan *plan,
                                size_t *out_tokens,
                                size_t *out_experts,
                                size_t *out_capacity,
                                size_t *out_assignments);

/**
 * Assignment `index` in token-major, rank-minor order.
 */
enum PmoeStatus pmoe_plan_assignment(const struct PmoePlan *plan,
                                     size_t index,
                                     struct PmoeAssignment *out_assignment);

/**
 * Real tokens per expert, written to `out_counts[0..num_experts]`.
 */
enum PmoeStatus pmoe_plan_expert_counts(const struct PmoePlan *plan,
                                        size_t *out_counts,
                                        size_t len);

/**
 * Dropped selections, tokens that lost every selection, and the
 * coefficient of variation of expert load (NaN when undefined).
 */
enum PmoeStatus pmoe_plan_load(const struct PmoePlan *plan,
                               size_t *out_dropped,
                               size_t *out_fully_dropped_tokens,
                               double *out_cv);

/**
 * Measures one forward pass of a single block for every strategy listed in
 * the config, at the config's sizes, capacity factor and worker count.
 */
enum PmoeStatus pmoe_compare(const struct PmoeConfig *config,
                             enum PmoeCapacityMode mode,
                             struct PmoeComparison **out_comparison);

void pmoe_comparison_free(struct PmoeComparison *comparison);

enum PmoeStatus pmoe_comparison_len(const struct PmoeComparison *comparison, size_t *out_len);

/**
 * Row `index`. `out_name` receives a string owned by the comparison handle.
 */
enum PmoeStatus pmoe_comparison_row(const struct PmoeComparison *comparison,
                                    size_t index,
                                    const char **out_name,
                                    struct PmoeStrategyCost *out_cost);

/**
 * Aligned text table of all rows. Free with `pmoe_string_free`.
 */
enum PmoeStatus pmoe_comparison_table(const struct PmoeComparison *comparison, char **out_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOMOE_H */
