#ifndef TURNPIKE_H
#define TURNPIKE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TpStatus {
  TP_STATUS_OK = 0,
  TP_STATUS_NULL_POINTER = 1,
  TP_STATUS_INVALID_INPUT = 2,
  TP_STATUS_CONSTRAINT_VIOLATION = 3,
  TP_STATUS_MODE_NOT_SUPPORTED = 4,
  TP_STATUS_DIVERGENCE = 5,
  TP_STATUS_NOT_CONVERGED = 6,
  TP_STATUS_DEGENERATE_HORIZON = 7,
  TP_STATUS_BUFFER_SIZE = 8,
  TP_STATUS_INTERNAL = 9,
} TpStatus;

typedef enum TpKernel {
  TP_KERNEL_QUADRATIC = 0,
  TP_KERNEL_ABSOLUTE = 1,
  TP_KERNEL_ZERO = 2,
} TpKernel;

// Opaque model parameters.
typedef struct TpModel TpModel;

// Opaque optimal control problem.
typedef struct TpProblem TpProblem;

// Opaque optimal control solution.
typedef struct TpSolution TpSolution;

typedef struct TpSolverConfig {
  size_t max_iterations;
  double gradient_tolerance;
  double relative_tolerance;
  size_t memory;
  // Nonzero selects central finite differences instead of the adjoint.
  uint8_t finite_difference;
  double finite_difference_step;
} TpSolverConfig;

typedef struct TpSolutionInfo {
  double value;
  double gradient_norm;
  size_t iterations;
  uint8_t converged;
  size_t n_agents;
  size_t dim;
  size_t m_steps;
} TpSolutionInfo;

typedef struct TpConstants {
  double c0_tilde;
  double d0_tilde;
  double decay_rate;
} TpConstants;

typedef struct TpCertificate {
  size_t r1;
  double c0_tilde;
  double c1_tilde;
  double tail_sum;
  double bound;
  size_t dissipativity_violations;
  uint8_t passed;
} TpCertificate;

typedef struct TpDppReport {
  double tail_cost;
  double resolved_value;
  double relative_gap;
  uint8_t passed;
} TpDppReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`). Returns the length the full message
// needs including the NUL, or 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t tp_last_error_message(char *buf, size_t len);

// Fills `out` with the library defaults.
//
// # Safety
// `out` must be null or valid for writes.
enum TpStatus tp_solver_config_default(struct TpSolverConfig *out);

// Creates model parameters. `target` holds `dim` values.
//
// # Safety
// `target` must point to `dim` readable values; `out` must be valid for
// writes.
enum TpStatus tp_model_new(size_t n_agents,
                           size_t dim,
                           const double *target,
                           double gamma,
                           enum TpKernel kernel,
                           double kernel_bound,
                           struct TpModel **out);

// # Safety
// `model` must be null or a handle from [`tp_model_new`] not yet freed.
void tp_model_free(struct TpModel *model);

// Creates the optimal control problem on the grid `[t0, t_final]` with
// step `h`. `initial` holds `n_agents * dim` values.
//
// # Safety
// `model` must be a live handle, `initial` must point to `n_agents * dim`
// readable values and `out` must be valid for writes.
enum TpStatus tp_problem_new(const struct TpModel *model,
                             double t0,
                             double t_final,
                             double h,
                             const double *initial,
                             struct TpProblem **out);

// # Safety
// `problem` must be null or a handle from [`tp_problem_new`] not yet freed.
void tp_problem_free(struct TpProblem *problem);

// Number of time steps `M` of the problem grid, or 0 for a null handle.
//
// # Safety
// `problem` must be null or a live handle.
size_t tp_problem_steps(const struct TpProblem *problem);

// Objective `J(u)` and its exact gradient. `controls` and `gradient` hold
// `M * n_agents * dim` values.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum TpStatus tp_objective_gradient(const struct TpProblem *problem,
                                    const double *controls,
                                    size_t len,
                                    double *value,
                                    double *gradient);

// Solves the problem, from `warm_start` (`M * n_agents * dim` values) when
// non-null and from zero controls otherwise. A non-converged run still
// returns a solution; check `converged` in [`tp_solution_info`].
//
// # Safety
// `problem` and `config` must be valid; `warm_start` must be null or hold
// the stated number of values; `out` must be valid for writes.
enum TpStatus tp_solve(const struct TpProblem *problem,
                       const struct TpSolverConfig *config,
                       const double *warm_start,
                       struct TpSolution **out);

// # Safety
// `solution` must be null or a handle from [`tp_solve`] not yet freed.
void tp_solution_free(struct TpSolution *solution);

// # Safety
// `solution` must be a live handle and `out` valid for writes.
enum TpStatus tp_solution_info(const struct TpSolution *solution, struct TpSolutionInfo *out);

// Copies the optimal controls, `M * n_agents * dim` values.
//
// # Safety
// `buf` must point to `len` writable values.
enum TpStatus tp_solution_controls(const struct TpSolution *solution, double *buf, size_t len);

// Copies the optimal states, `(M + 1) * n_agents * dim` values.
//
// # Safety
// `buf` must point to `len` writable values.
enum TpStatus tp_solution_states(const struct TpSolution *solution, double *buf, size_t len);

// Closed-loop cheap-control rollout with gain `beta`. `states` receives
// `(M + 1) * n_agents * dim` values and `controls` `M * n_agents * dim`.
//
// # Safety
// `model` must be a live handle; buffers must match the stated lengths.
enum TpStatus tp_cheap_rollout(const struct TpModel *model,
                               double t0,
                               double t_final,
                               double h,
                               const double *initial,
                               double beta,
                               double *states,
                               size_t states_len,
                               double *controls,
                               size_t controls_len);

// Cheap-control constants for step `h` and gain `beta`.
//
// # Safety
// `out` must be valid for writes.
enum TpStatus tp_cheap_constants(double h,
                                 double beta,
                                 double gamma,
                                 double kernel_bound,
                                 struct TpConstants *out);

// Turnpike certificate of a converged solution with tail fraction `lambda`
// and constants from gain `beta`.
//
// # Safety
// Handles must be live and belong together; `out` must be valid for writes.
enum TpStatus tp_certificate(const struct TpProblem *problem,
                             const struct TpSolution *solution,
                             double lambda,
                             double beta,
                             struct TpCertificate *out);

// Re-solves the tail from step `split` and compares it with the solution's
// tail cost.
//
// # Safety
// Handles and `config` must be valid; `out` must be valid for writes.
enum TpStatus tp_dpp_check(const struct TpProblem *problem,
                           const struct TpSolution *solution,
                           size_t split,
                           const struct TpSolverConfig *config,
                           struct TpDppReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TURNPIKE_H */
