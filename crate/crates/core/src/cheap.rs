//! Cheap stabilizing feedback and the explicit constants of the cheap-control
//! bound.
//!
//! The feedback `u_k = beta (target - psi_k) - (1/N) sum_l P(psi_k, psi_l)(psi_l - psi_k)`
//! cancels the interaction term of the drift, so the closed loop contracts
//! every agent towards the target by the factor `1 - h beta` per step,
//! whatever the kernel. The constants below bound the cost of that closed
//! loop and therefore the optimal value.

use serde::Serialize;

use crate::dynamics;
use crate::error::{Error, Result};
use crate::model::{
    ensemble_norm, ControlMatrix, ControlSequence, ModelParams, StateMatrix, TimeGrid, Trajectory,
};

/// Feedback gain bound to a step size through `h * beta < 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheapControlParams {
    beta: f64,
    h: f64,
}

impl CheapControlParams {
    pub fn new(beta: f64, h: f64) -> Result<Self> {
        check_gain(h, beta)?;
        Ok(CheapControlParams { beta, h })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn h(&self) -> f64 {
        self.h
    }
}

/// Strict `0 < h beta < 1`; at equality the decay rate and the constant
/// `C0(h)` both degenerate.
fn check_gain(h: f64, beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("h must be positive, got {h}")));
    }
    if h * beta >= 1.0 {
        return Err(Error::ConstraintViolation(format!(
            "h*beta = {} must be strictly below 1 (h={h}, beta={beta})",
            h * beta
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(())
}

fn check_bound(kernel_bound: f64) -> Result<()> {
    if !(kernel_bound >= 0.0 && kernel_bound.is_finite()) {
        return Err(Error::invalid(format!(
            "kernel_bound must be finite and nonnegative, got {kernel_bound}"
        )));
    }
    Ok(())
}

pub fn feedback_control(
    state: &StateMatrix,
    params: &ModelParams,
    beta: f64,
) -> Result<ControlMatrix> {
    params.check_shape(state, "state")?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let mut u = dynamics::interaction(state, params.kernel());
    let target = params.target();
    for k in 0..state.n_agents() {
        let xk = state.row(k);
        for ((uj, x), t) in u.row_mut(k).iter_mut().zip(xk).zip(target) {
            *uj = beta * (t - x) - *uj;
        }
    }
    Ok(u)
}

/// Closed-loop states and the feedback controls along them.
///
/// States follow the contracted recursion `psi^{i+1} = psi^i + h beta (target - psi^i)`
/// directly; the returned controls reproduce them through
/// [`dynamics::rollout`] up to rounding.
pub fn closed_loop_rollout(
    initial: &StateMatrix,
    grid: &TimeGrid,
    params: &ModelParams,
    beta: f64,
) -> Result<(Trajectory, ControlSequence)> {
    params.check_shape(initial, "initial state")?;
    let h = grid.h();
    check_gain(h, beta)?;
    let target = params.target();
    let mut states = Vec::with_capacity(grid.m_steps() + 1);
    let mut controls = Vec::with_capacity(grid.m_steps());
    states.push(initial.clone());
    for _ in 0..grid.m_steps() {
        let current = states.last().unwrap();
        controls.push(feedback_control(current, params, beta)?);
        let mut next = current.clone();
        for row in next.as_mut_slice().chunks_exact_mut(params.dim()) {
            for (x, t) in row.iter_mut().zip(target) {
                *x += h * beta * (t - *x);
            }
        }
        states.push(next);
    }
    Ok((
        Trajectory::new(states, *grid)?,
        ControlSequence::new(controls, *grid)?,
    ))
}

/// Per-step contraction factor `(1 - h beta)^2` of the Lyapunov function.
pub fn decay_rate(h: f64, beta: f64) -> Result<f64> {
    check_gain(h, beta)?;
    let q = 1.0 - h * beta;
    Ok(q * q)
}

fn bracket(beta: f64, kernel_bound: f64) -> f64 {
    let p = kernel_bound;
    beta * beta + 2.0 * beta * p + 2.0 * p * p
}

/// `C0(h) = h / (1 - (1 - h beta)^2) * (2/gamma + 4 (beta^2 + 2 beta P + 2 P^2))`.
///
/// Evaluated in the equivalent form `[...] / (beta (2 - h beta))`, which has
/// no cancellation as `h -> 0`.
pub fn c0_constant(h: f64, beta: f64, gamma: f64, kernel_bound: f64) -> Result<f64> {
    check_gain(h, beta)?;
    check_gamma(gamma)?;
    check_bound(kernel_bound)?;
    let numer = 2.0 / gamma + 4.0 * bracket(beta, kernel_bound);
    Ok(numer / (beta * (2.0 - h * beta)))
}

/// `D0 = lim_{h -> 0+} C0(h) = (1/beta)(1/gamma + 2 (beta^2 + 2 beta P + 2 P^2))`.
pub fn d0_limit(beta: f64, gamma: f64, kernel_bound: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    check_gamma(gamma)?;
    check_bound(kernel_bound)?;
    Ok((1.0 / gamma + 2.0 * bracket(beta, kernel_bound)) / beta)
}

/// The constants used by the certificates, fixed for one `(h, beta)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConstantsLedger {
    pub c0_tilde: f64,
    pub d0_tilde: f64,
    pub kernel_bound: f64,
    pub gamma: f64,
    pub beta: f64,
    pub h: f64,
}

impl ConstantsLedger {
    pub fn new(params: &ModelParams, h: f64, beta: f64) -> Result<Self> {
        Self::from_parts(h, beta, params.gamma(), params.kernel_bound())
    }

    pub fn from_parts(h: f64, beta: f64, gamma: f64, kernel_bound: f64) -> Result<Self> {
        Ok(ConstantsLedger {
            c0_tilde: c0_constant(h, beta, gamma, kernel_bound)?,
            d0_tilde: d0_limit(beta, gamma, kernel_bound)?,
            kernel_bound,
            gamma,
            beta,
            h,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformitySample {
    pub h: f64,
    pub c0_tilde: f64,
    pub in_bracket: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformityReport {
    pub d0_tilde: f64,
    pub samples: Vec<UniformitySample>,
    /// Every sample satisfies `D0 < C0(h) <= 2 D0`.
    pub bracket_holds: bool,
    /// `C0` strictly increases with `h` (equivalently, strictly decreases as
    /// `h` shrinks towards zero).
    pub monotone: bool,
    pub passed: bool,
    /// First sample that broke the bracket or the ordering.
    pub offending_h: Option<f64>,
}

pub fn uniformity_check(
    beta: f64,
    gamma: f64,
    kernel_bound: f64,
    h_samples: &[f64],
) -> Result<UniformityReport> {
    if h_samples.is_empty() {
        return Err(Error::invalid(
            "uniformity_check needs at least one step size",
        ));
    }
    let d0 = d0_limit(beta, gamma, kernel_bound)?;
    let mut samples = Vec::with_capacity(h_samples.len());
    for &h in h_samples {
        if !(h > 0.0 && h * beta < 1.0) {
            return Err(Error::invalid(format!(
                "sample h={h} lies outside (0, 1/beta) with beta={beta}"
            )));
        }
        let c0 = c0_constant(h, beta, gamma, kernel_bound)?;
        samples.push(UniformitySample {
            h,
            c0_tilde: c0,
            in_bracket: d0 < c0 && c0 <= 2.0 * d0,
        });
    }
    let mut offending_h = samples.iter().find(|s| !s.in_bracket).map(|s| s.h);
    let bracket_holds = offending_h.is_none();

    let mut sorted: Vec<&UniformitySample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.h.total_cmp(&b.h));
    let mut monotone = true;
    for w in sorted.windows(2) {
        if !(w[1].c0_tilde > w[0].c0_tilde) {
            monotone = false;
            offending_h.get_or_insert(w[1].h);
            break;
        }
    }
    Ok(UniformityReport {
        d0_tilde: d0,
        samples,
        bracket_holds,
        monotone,
        passed: bracket_holds && monotone,
        offending_h,
    })
}

/// Outcome of the per-step control magnitude estimate
/// `|u^i|_N^2 <= 2 (1 - h beta)^{2i} ((beta + P)^2 + P^2) |psi^0 - target|_N^2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlBoundReport {
    /// False when some kernel value along the trajectory exceeds
    /// `kernel_bound`; the estimate is then not asserted.
    pub applicable: bool,
    pub max_kernel_value: f64,
    pub violations: usize,
    /// Largest `lhs / rhs` over steps with nonzero right-hand side.
    pub worst_ratio: f64,
}

pub fn control_bound_check(
    traj: &Trajectory,
    controls: &ControlSequence,
    params: &ModelParams,
    beta: f64,
) -> Result<ControlBoundReport> {
    let h = traj.grid().h();
    check_gain(h, beta)?;
    let kernel = params.kernel();
    let max_kernel_value = traj
        .states()
        .iter()
        .map(|s| kernel.max_pairwise(s))
        .fold(0.0, f64::max);
    let p = params.kernel_bound();
    let e0 = ensemble_norm(&traj.initial().minus_row(params.target()))?;
    let q = (1.0 - h * beta) * (1.0 - h * beta);
    let scale = 2.0 * ((beta + p) * (beta + p) + p * p) * e0 * e0;
    // states are stored in absolute coordinates, so psi - target cannot
    // shrink below the rounding of the coordinates themselves
    let magnitude = traj
        .initial()
        .as_slice()
        .iter()
        .chain(params.target())
        .fold(1.0_f64, |m, v| m.max(v.abs()));
    let floor = params.n_agents() as f64 * ((beta + p) * 16.0 * f64::EPSILON * magnitude).powi(2);
    let mut violations = 0;
    let mut worst_ratio = 0.0_f64;
    let mut decay = 1.0;
    for u in controls.controls() {
        let lhs = ensemble_norm(u)?.powi(2);
        let rhs = decay * scale;
        if lhs > rhs * (1.0 + 1e-9) + floor {
            violations += 1;
        }
        if rhs > 0.0 {
            worst_ratio = worst_ratio.max(lhs / rhs);
        }
        decay *= q;
    }
    Ok(ControlBoundReport {
        applicable: max_kernel_value <= p,
        max_kernel_value,
        violations,
        worst_ratio,
    })
}
