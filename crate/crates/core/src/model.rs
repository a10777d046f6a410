//! Domain types for the discrete-time multi-agent control problem and the
//! cost functionals defined on them.
//!
//! Every ensemble quantity (states, controls, gradients) is an [`AgentMatrix`]
//! with one row per agent and one column per spatial dimension.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics;
use crate::error::{Error, Result};

/// Row-per-agent dense matrix (`N x d`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct AgentMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub type StateMatrix = AgentMatrix;
pub type ControlMatrix = AgentMatrix;

impl AgentMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}={}",
                data.len(),
                rows * cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at row {}, column {}",
                i / cols,
                i % cols
            )));
        }
        Ok(AgentMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        AgentMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// `n` identical copies of `row`.
    pub fn replicate(row: &[f64], n: usize) -> Self {
        AgentMatrix {
            rows: n,
            cols: row.len(),
            data: row.repeat(n),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.data[k * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Subtract `row` from every row.
    pub fn minus_row(&self, row: &[f64]) -> AgentMatrix {
        let mut out = self.clone();
        for r in out.data.chunks_exact_mut(self.cols) {
            for (a, b) in r.iter_mut().zip(row) {
                *a -= b;
            }
        }
        out
    }

    pub fn sub(&self, other: &AgentMatrix) -> AgentMatrix {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        AgentMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Agent mean, one entry per dimension.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in self.rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let n = self.rows as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Permute agent rows: row `k` of the output is row `perm[k]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> AgentMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        AgentMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

/// Pairwise interaction weight `P(x, y)` multiplying the attraction term
/// `(y - x)` in the drift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionKernel {
    /// `P(x, y) = |x - y|^2`
    Quadratic,
    /// `P(x, y) = |x - y|` (Euclidean); not differentiable at `x = y`.
    Absolute,
    /// No interaction.
    Zero,
}

impl InteractionKernel {
    pub fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            InteractionKernel::Quadratic => sq_dist(x, y),
            InteractionKernel::Absolute => sq_dist(x, y).sqrt(),
            InteractionKernel::Zero => 0.0,
        }
    }

    pub fn is_differentiable(self) -> bool {
        !matches!(self, InteractionKernel::Absolute)
    }

    /// Writes `dP/dx (x, y)` into `out`. Both differentiable variants are
    /// translation invariant, so `dP/dy = -dP/dx`.
    pub fn grad_x(self, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            InteractionKernel::Quadratic => {
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o = 2.0 * (a - b);
                }
                Ok(())
            }
            InteractionKernel::Zero => {
                out.iter_mut().for_each(|o| *o = 0.0);
                Ok(())
            }
            InteractionKernel::Absolute => Err(Error::ModeNotSupported(
                "absolute kernel has no classical derivative; use finite-difference gradients"
                    .into(),
            )),
        }
    }

    /// Largest `|P(x_k, x_l)|` over all agent pairs of `state`.
    pub fn max_pairwise(self, state: &AgentMatrix) -> f64 {
        let mut best = 0.0_f64;
        for k in 0..state.n_agents() {
            for l in (k + 1)..state.n_agents() {
                best = best.max(self.eval(state.row(k), state.row(l)).abs());
            }
        }
        best
    }
}

impl fmt::Display for InteractionKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InteractionKernel::Quadratic => "quadratic",
            InteractionKernel::Absolute => "absolute",
            InteractionKernel::Zero => "zero",
        };
        f.write_str(s)
    }
}

impl FromStr for InteractionKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quadratic" => Ok(InteractionKernel::Quadratic),
            "absolute" => Ok(InteractionKernel::Absolute),
            "zero" => Ok(InteractionKernel::Zero),
            other => Err(Error::invalid(format!("unknown kernel `{other}`"))),
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Model data: agent count, dimension, consensus target, control weight and
/// interaction kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    n_agents: usize,
    dim: usize,
    target: Vec<f64>,
    gamma: f64,
    kernel: InteractionKernel,
    kernel_bound: f64,
}

impl ModelParams {
    pub fn new(
        n_agents: usize,
        dim: usize,
        target: Vec<f64>,
        gamma: f64,
        kernel: InteractionKernel,
        kernel_bound: f64,
    ) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::invalid("n_agents must be at least 1"));
        }
        if dim == 0 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        if target.len() != dim {
            return Err(Error::invalid(format!(
                "target has length {}, expected dim={dim}",
                target.len()
            )));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("target must be finite"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        if !(kernel_bound >= 0.0 && kernel_bound.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel_bound must be finite and nonnegative, got {kernel_bound}"
            )));
        }
        Ok(ModelParams {
            n_agents,
            dim,
            target,
            gamma,
            kernel,
            kernel_bound,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn kernel(&self) -> InteractionKernel {
        self.kernel
    }

    pub fn kernel_bound(&self) -> f64 {
        self.kernel_bound
    }

    pub fn with_kernel_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel_bound must be finite and nonnegative, got {bound}"
            )));
        }
        self.kernel_bound = bound;
        Ok(self)
    }

    pub(crate) fn check_shape(&self, m: &AgentMatrix, what: &str) -> Result<()> {
        if m.n_agents() != self.n_agents || m.dim() != self.dim {
            return Err(Error::invalid(format!(
                "{what} is {}x{}, expected {}x{}",
                m.n_agents(),
                m.dim(),
                self.n_agents,
                self.dim
            )));
        }
        Ok(())
    }
}

/// Uniform time grid `t0 < t0 + h < ... < t0 + M h = T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t_final: f64,
    h: f64,
    m_steps: usize,
}

impl TimeGrid {
    /// Builds the grid and derives `M = (T - t0) / h`, rejecting step sizes
    /// that do not divide the horizon.
    pub fn new(t0: f64, t_final: f64, h: f64) -> Result<Self> {
        if !(t0.is_finite() && t_final.is_finite()) {
            return Err(Error::invalid("grid endpoints must be finite"));
        }
        if !(t_final > t0) {
            return Err(Error::invalid(format!(
                "t_final ({t_final}) must exceed t0 ({t0})"
            )));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!(
                "step size h must be positive, got {h}"
            )));
        }
        let span = t_final - t0;
        let m = (span / h).round();
        if m < 1.0 || (m * h - span).abs() > 1e-9 * span {
            return Err(Error::invalid(format!(
                "h={h} does not divide the horizon [{t0}, {t_final}] into an integer number of steps"
            )));
        }
        Ok(TimeGrid {
            t0,
            t_final,
            h,
            m_steps: m as usize,
        })
    }

    pub fn from_steps(t0: f64, t_final: f64, m_steps: usize) -> Result<Self> {
        if m_steps == 0 {
            return Err(Error::invalid("m_steps must be at least 1"));
        }
        Self::new(t0, t_final, (t_final - t0) / m_steps as f64)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn m_steps(&self) -> usize {
        self.m_steps
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    /// Grid of the tail problem starting at step `a`.
    pub fn tail(&self, a: usize) -> Result<TimeGrid> {
        if a >= self.m_steps {
            return Err(Error::invalid(format!(
                "tail start {a} must be below M={}",
                self.m_steps
            )));
        }
        Ok(TimeGrid {
            t0: self.time(a),
            t_final: self.t_final,
            h: self.h,
            m_steps: self.m_steps - a,
        })
    }
}

/// States `psi^0, ..., psi^M` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Vec<StateMatrix>,
    grid: TimeGrid,
}

impl Trajectory {
    pub fn new(states: Vec<StateMatrix>, grid: TimeGrid) -> Result<Self> {
        if states.len() != grid.m_steps() + 1 {
            return Err(Error::invalid(format!(
                "trajectory has {} states, expected M+1={}",
                states.len(),
                grid.m_steps() + 1
            )));
        }
        Ok(Trajectory { states, grid })
    }

    pub fn states(&self) -> &[StateMatrix] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [StateMatrix] {
        &mut self.states
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn initial(&self) -> &StateMatrix {
        &self.states[0]
    }

    pub fn terminal(&self) -> &StateMatrix {
        &self.states[self.states.len() - 1]
    }
}

/// Piecewise-constant controls `u^0, ..., u^{M-1}` on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSequence {
    controls: Vec<ControlMatrix>,
    grid: TimeGrid,
}

impl ControlSequence {
    pub fn new(controls: Vec<ControlMatrix>, grid: TimeGrid) -> Result<Self> {
        if controls.len() != grid.m_steps() {
            return Err(Error::invalid(format!(
                "control sequence has {} entries, expected M={}",
                controls.len(),
                grid.m_steps()
            )));
        }
        Ok(ControlSequence { controls, grid })
    }

    pub fn zeros(grid: TimeGrid, n_agents: usize, dim: usize) -> Self {
        ControlSequence {
            controls: vec![AgentMatrix::zeros(n_agents, dim); grid.m_steps()],
            grid,
        }
    }

    /// Rebuilds a sequence from its step-major flat layout
    /// (`[step][agent][dim]`).
    pub fn from_flat(grid: TimeGrid, n_agents: usize, dim: usize, flat: &[f64]) -> Result<Self> {
        let block = n_agents * dim;
        if flat.len() != grid.m_steps() * block {
            return Err(Error::invalid(format!(
                "flat control buffer has {} entries, expected {}",
                flat.len(),
                grid.m_steps() * block
            )));
        }
        let controls = flat
            .chunks_exact(block)
            .map(|c| AgentMatrix::new(n_agents, dim, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ControlSequence { controls, grid })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.controls
            .iter()
            .flat_map(|c| c.as_slice().iter().copied())
            .collect()
    }

    pub fn controls(&self) -> &[ControlMatrix] {
        &self.controls
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Controls from step `a` onward, re-gridded as a tail problem.
    pub fn tail(&self, a: usize) -> Result<ControlSequence> {
        let grid = self.grid.tail(a)?;
        Ok(ControlSequence {
            controls: self.controls[a..].to_vec(),
            grid,
        })
    }
}

/// Exact solution of the static problem: every agent sits at the target and
/// no control is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticSolution {
    pub state: StateMatrix,
    pub control: ControlMatrix,
}

/// Frobenius norm of an ensemble matrix, `sqrt(sum_k |x_k|^2)`.
pub fn ensemble_norm(m: &AgentMatrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::invalid("ensemble_norm of a non-finite matrix"));
    }
    Ok(m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn sq_norm(m: &AgentMatrix) -> f64 {
    m.as_slice().iter().map(|v| v * v).sum()
}

fn sq_tracking_error(state: &StateMatrix, target: &[f64]) -> f64 {
    state.rows().map(|r| sq_dist(r, target)).sum()
}

/// Stage cost `g = (1/N)(|psi - target|_N^2 + gamma |u|_N^2)`.
pub fn running_cost(
    state: &StateMatrix,
    control: &ControlMatrix,
    params: &ModelParams,
) -> Result<f64> {
    params.check_shape(state, "state")?;
    params.check_shape(control, "control")?;
    let n = params.n_agents() as f64;
    Ok((sq_tracking_error(state, params.target()) + params.gamma() * sq_norm(control)) / n)
}

/// `J = sum_{i<M} h g(psi^i, u^i)`; the terminal state carries no cost.
pub fn total_cost(
    traj: &Trajectory,
    controls: &ControlSequence,
    params: &ModelParams,
) -> Result<f64> {
    if traj.grid() != controls.grid() {
        return Err(Error::invalid(
            "trajectory and controls live on different grids",
        ));
    }
    let h = traj.grid().h();
    traj.states()
        .iter()
        .zip(controls.controls())
        .map(|(s, u)| running_cost(s, u, params).map(|g| h * g))
        .sum()
}

/// Mean squared distance of the ensemble to the target, `(1/N)|psi - target|_N^2`.
pub fn lyapunov(state: &StateMatrix, params: &ModelParams) -> Result<f64> {
    params.check_shape(state, "state")?;
    Ok(sq_tracking_error(state, params.target()) / params.n_agents() as f64)
}

pub fn solve_static(params: &ModelParams) -> StaticSolution {
    StaticSolution {
        state: AgentMatrix::replicate(params.target(), params.n_agents()),
        control: AgentMatrix::zeros(params.n_agents(), params.dim()),
    }
}

/// Norm of the stationary-dynamics residual; zero iff `(state, control)` is a
/// fixed point of the Euler step.
pub fn static_residual(
    state: &StateMatrix,
    control: &ControlMatrix,
    params: &ModelParams,
) -> Result<f64> {
    let f = dynamics::drift(state, control, params)?;
    ensemble_norm(&f)
}
