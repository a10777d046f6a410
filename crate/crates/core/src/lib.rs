//! Discrete-time optimal control of interacting agent ensembles: explicit
//! Euler dynamics, a cheap feedback law and its cost constants, a direct
//! optimal control solver, and the dissipativity and turnpike certificates
//! built on top of them.

// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificate;
pub mod cheap;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod model;
pub mod solver;

pub use certificate::{
    alpha, c1_constant, cheap_control_inequality_check, dissipativity_check, r1_index, supply_rate,
    turnpike_report, CheapControlReport, DissipativityConfig, DissipativityReport,
    TurnpikeCertificate,
};
pub use cheap::{
    c0_constant, closed_loop_rollout, control_bound_check, d0_limit, decay_rate, feedback_control,
    uniformity_check, CheapControlParams, ConstantsLedger, ControlBoundReport, UniformityReport,
    UniformitySample,
};
pub use dynamics::{drift, euler_step, interaction, rollout};
pub use error::{Error, Result};
pub use model::{
    ensemble_norm, lyapunov, running_cost, solve_static, static_residual, total_cost, AgentMatrix,
    ControlMatrix, ControlSequence, InteractionKernel, ModelParams, StateMatrix, StaticSolution,
    TimeGrid, Trajectory,
};
pub use solver::{
    dpp_check, finite_difference_gradient, objective_and_gradient, solve_ocp, solve_ocp_from,
    DppReport, GradientMode, IterationRecord, LineSearchConfig, OcpProblem, OcpSolution,
    SolverConfig, DPP_RELATIVE_GAP, FD_STEP,
};
