//! Interacting-agent drift and its explicit Euler discretization.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    AgentMatrix, ControlMatrix, ControlSequence, InteractionKernel, ModelParams, StateMatrix,
    Trajectory,
};

/// Agent counts at or above this use a row-parallel pairwise loop. Each row
/// is still summed in index order, so results do not depend on scheduling.
const PARALLEL_AGENTS: usize = 128;

/// Mean-field interaction `(1/N) sum_l P(psi_k, psi_l)(psi_l - psi_k)`, one
/// row per agent.
pub fn interaction(state: &StateMatrix, kernel: InteractionKernel) -> AgentMatrix {
    let mut out = AgentMatrix::zeros(state.n_agents(), state.dim());
    interaction_into(state.as_slice(), state.dim(), kernel, out.as_mut_slice());
    out
}

/// [`interaction`] on a flat row-major buffer; `out` is overwritten.
pub(crate) fn interaction_into(x: &[f64], d: usize, kernel: InteractionKernel, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if kernel == InteractionKernel::Zero {
        return;
    }
    let n = x.len() / d;
    let inv_n = 1.0 / n as f64;
    let fill_row = |k: usize, row: &mut [f64]| {
        let xk = &x[k * d..(k + 1) * d];
        for xl in x.chunks_exact(d) {
            let w = kernel.eval(xk, xl);
            for j in 0..d {
                row[j] += w * (xl[j] - xk[j]);
            }
        }
        row.iter_mut().for_each(|v| *v *= inv_n);
    };
    if n >= PARALLEL_AGENTS {
        out.par_chunks_exact_mut(d)
            .enumerate()
            .for_each(|(k, row)| fill_row(k, row));
    } else {
        out.chunks_exact_mut(d)
            .enumerate()
            .for_each(|(k, row)| fill_row(k, row));
    }
}

/// Right-hand side `f(psi, u)`: interaction plus control.
pub fn drift(
    state: &StateMatrix,
    control: &ControlMatrix,
    params: &ModelParams,
) -> Result<AgentMatrix> {
    params.check_shape(state, "state")?;
    params.check_shape(control, "control")?;
    let mut f = interaction(state, params.kernel());
    for (a, u) in f.as_mut_slice().iter_mut().zip(control.as_slice()) {
        *a += u;
    }
    Ok(f)
}

/// One explicit Euler step `psi + h f(psi, u)`.
pub fn euler_step(
    state: &StateMatrix,
    control: &ControlMatrix,
    h: f64,
    params: &ModelParams,
) -> Result<StateMatrix> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut next = drift(state, control, params)?;
    for (n, s) in next.as_mut_slice().iter_mut().zip(state.as_slice()) {
        *n = s + h * *n;
    }
    Ok(next)
}

pub fn rollout(
    initial: &StateMatrix,
    controls: &ControlSequence,
    params: &ModelParams,
) -> Result<Trajectory> {
    params.check_shape(initial, "initial state")?;
    let grid = *controls.grid();
    let mut states = Vec::with_capacity(grid.m_steps() + 1);
    states.push(initial.clone());
    for u in controls.controls() {
        let next = euler_step(states.last().unwrap(), u, grid.h(), params)?;
        states.push(next);
    }
    Trajectory::new(states, grid)
}
