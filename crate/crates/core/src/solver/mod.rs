//! Direct transcription of the discrete optimal control problem over the
//! controls, solved with L-BFGS on exact discrete-adjoint gradients.

mod adjoint;
mod lbfgs;

use serde::{Deserialize, Serialize};

use crate::dynamics;
use crate::error::{Error, Result};
use crate::model::{total_cost, ControlSequence, ModelParams, StateMatrix, TimeGrid, Trajectory};

pub use adjoint::{finite_difference_gradient, objective_and_gradient};
pub use lbfgs::IterationRecord;

/// `min_u sum_{i<M} h g(psi^i, u^i)` subject to the Euler dynamics from
/// `initial`.
#[derive(Clone, Debug, PartialEq)]
pub struct OcpProblem {
    pub(crate) params: ModelParams,
    pub(crate) grid: TimeGrid,
    pub(crate) initial: StateMatrix,
}

impl OcpProblem {
    pub fn new(params: ModelParams, grid: TimeGrid, initial: StateMatrix) -> Result<Self> {
        params.check_shape(&initial, "initial state")?;
        Ok(OcpProblem {
            params,
            grid,
            initial,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn initial(&self) -> &StateMatrix {
        &self.initial
    }

    /// Problem on `[t_a, T]` started from `state`.
    pub fn tail(&self, a: usize, state: StateMatrix) -> Result<OcpProblem> {
        OcpProblem::new(self.params.clone(), self.grid.tail(a)?, state)
    }

    fn n_vars(&self) -> usize {
        self.grid.m_steps() * self.params.n_agents() * self.params.dim()
    }

    pub(crate) fn check_controls(&self, controls: &ControlSequence) -> Result<()> {
        if controls.grid().m_steps() != self.grid.m_steps() || controls.grid().h() != self.grid.h()
        {
            return Err(Error::invalid(format!(
                "control sequence has M={} h={}, problem has M={} h={}",
                controls.grid().m_steps(),
                controls.grid().h(),
                self.grid.m_steps(),
                self.grid.h()
            )));
        }
        for u in controls.controls() {
            self.params.check_shape(u, "control")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GradientMode {
    #[default]
    Adjoint,
    FiniteDifference {
        step: f64,
    },
}

/// Step used by the finite-difference fallback.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearchConfig {
    /// First trial step; scaled by `1 / |d|_inf` when no curvature pairs are
    /// stored yet.
    pub initial_step: f64,
    /// Largest backtracking factor, in `(0, 1)`.
    pub shrink: f64,
    /// Armijo constant.
    pub sufficient_decrease: f64,
    /// Lower curvature constant of the approximate Wolfe test.
    pub curvature: f64,
    pub max_backtracks: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        LineSearchConfig {
            initial_step: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            curvature: 0.9,
            max_backtracks: 60,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Absolute tolerance on `|grad J|_inf / h`.
    pub gradient_tolerance: f64,
    /// Tolerance relative to the starting gradient norm; zero disables it.
    pub relative_tolerance: f64,
    pub line_search: LineSearchConfig,
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub gradient_mode: GradientMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 5000,
            gradient_tolerance: 1e-10,
            relative_tolerance: 0.0,
            line_search: LineSearchConfig::default(),
            memory: 20,
            gradient_mode: GradientMode::Adjoint,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::invalid("gradient_tolerance must be positive"));
        }
        if !(self.relative_tolerance >= 0.0) {
            return Err(Error::invalid("relative_tolerance must be nonnegative"));
        }
        let ls = &self.line_search;
        if !(ls.shrink > 0.0 && ls.shrink < 1.0) {
            return Err(Error::invalid("line_search.shrink must lie in (0, 1)"));
        }
        if !(ls.sufficient_decrease > 0.0 && ls.sufficient_decrease < 0.5) {
            return Err(Error::invalid(
                "line_search.sufficient_decrease must lie in (0, 0.5)",
            ));
        }
        if !(ls.curvature > ls.sufficient_decrease && ls.curvature < 1.0) {
            return Err(Error::invalid(
                "line_search.curvature must lie in (sufficient_decrease, 1)",
            ));
        }
        if !(ls.initial_step > 0.0) || ls.max_backtracks == 0 {
            return Err(Error::invalid(
                "line search needs a positive initial step and backtracks",
            ));
        }
        if self.memory == 0 {
            return Err(Error::invalid("memory must be at least 1"));
        }
        if let GradientMode::FiniteDifference { step } = self.gradient_mode {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::invalid("finite-difference step must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcpSolution {
    pub controls: ControlSequence,
    pub trajectory: Trajectory,
    /// Optimal value `v`, equal to `total_cost(trajectory, controls)`.
    pub value: f64,
    /// `|grad J|_inf / h` at the returned controls.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

struct ProblemObjective<'a> {
    problem: &'a OcpProblem,
    mode: GradientMode,
}

impl lbfgs::Objective for ProblemObjective<'_> {
    fn value(&mut self, x: &[f64]) -> f64 {
        adjoint::objective(self.problem, x)
    }

    fn value_and_gradient(&mut self, x: &[f64], g: &mut [f64]) -> Result<f64> {
        match self.mode {
            GradientMode::Adjoint => adjoint::objective_gradient_adjoint(self.problem, x, g),
            GradientMode::FiniteDifference { step } => {
                Ok(adjoint::objective_gradient_fd(self.problem, x, g, step))
            }
        }
    }
}

/// Solves from zero controls.
pub fn solve_ocp(problem: &OcpProblem, config: &SolverConfig) -> Result<OcpSolution> {
    solve_ocp_from(problem, config, None)
}

/// Solves from `warm_start` when given, zero controls otherwise.
pub fn solve_ocp_from(
    problem: &OcpProblem,
    config: &SolverConfig,
    warm_start: Option<&ControlSequence>,
) -> Result<OcpSolution> {
    config.validate()?;
    if config.gradient_mode == GradientMode::Adjoint && !problem.params.kernel().is_differentiable()
    {
        return Err(Error::ModeNotSupported(format!(
            "adjoint gradient needs a differentiable kernel, got `{}`; select finite-difference mode",
            problem.params.kernel()
        )));
    }
    let x0 = match warm_start {
        Some(w) => {
            problem.check_controls(w)?;
            w.to_flat()
        }
        None => vec![0.0; problem.n_vars()],
    };
    let mut obj = ProblemObjective {
        problem,
        mode: config.gradient_mode,
    };
    let out = lbfgs::minimize(&mut obj, x0, config, 1.0 / problem.grid.h())?;

    let n = problem.params.n_agents();
    let d = problem.params.dim();
    let controls =
        ControlSequence::from_flat(problem.grid, n, d, &out.x).map_err(|_| Error::Divergence {
            iteration: out.iterations,
            message: "non-finite control iterate".into(),
            controls: out.x.clone(),
        })?;
    let trajectory = dynamics::rollout(&problem.initial, &controls, &problem.params)?;
    let value = total_cost(&trajectory, &controls, &problem.params)?;
    if !value.is_finite() {
        return Err(Error::Divergence {
            iteration: out.iterations,
            message: format!("objective is {value} at the final iterate"),
            controls: out.x,
        });
    }
    Ok(OcpSolution {
        controls,
        trajectory,
        value,
        gradient_norm: out.gradient_norm,
        iterations: out.iterations,
        converged: out.converged,
        log: out.log,
    })
}

/// Acceptance threshold on the relative gap of [`dpp_check`].
pub const DPP_RELATIVE_GAP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DppReport {
    pub split_index: usize,
    /// `sum_{i >= a} h g` along the original solution.
    pub tail_cost: f64,
    /// Optimal value of the re-solved tail problem.
    pub resolved_value: f64,
    pub relative_gap: f64,
    pub resolved_converged: bool,
    pub passed: bool,
}

/// Re-solves the tail problem from the solution's state at `split_index` and
/// compares its optimal value with the tail cost of the original solution.
pub fn dpp_check(
    problem: &OcpProblem,
    solution: &OcpSolution,
    split_index: usize,
    config: &SolverConfig,
) -> Result<DppReport> {
    let m = problem.grid.m_steps();
    if split_index == 0 || split_index >= m {
        return Err(Error::invalid(format!(
            "split index {split_index} must satisfy 0 < a < M={m}"
        )));
    }
    if !solution.converged {
        return Err(Error::NotConverged(
            "dynamic-programming check needs a converged solution".into(),
        ));
    }
    let state_a = solution.trajectory.states()[split_index].clone();
    let tail_problem = problem.tail(split_index, state_a)?;
    let h = problem.grid.h();
    let tail_cost: f64 = solution.trajectory.states()[split_index..m]
        .iter()
        .zip(&solution.controls.controls()[split_index..])
        .map(|(s, u)| crate::model::running_cost(s, u, &problem.params).map(|g| h * g))
        .sum::<Result<f64>>()?;
    let resolved = solve_ocp(&tail_problem, config)?;
    let gap = (tail_cost - resolved.value).abs();
    let relative_gap = if resolved.value > 0.0 {
        gap / resolved.value
    } else if gap == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(DppReport {
        split_index,
        tail_cost,
        resolved_value: resolved.value,
        relative_gap,
        resolved_converged: resolved.converged,
        passed: resolved.converged && relative_gap <= DPP_RELATIVE_GAP,
    })
}
