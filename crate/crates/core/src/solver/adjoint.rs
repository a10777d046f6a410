//! Objective and exact gradient of the transcribed cost with respect to the
//! control iterates.
//!
//! The gradient differentiates the Euler recursion itself. With
//! `psi^{i+1} = psi^i + h (F(psi^i) + u^i)` and
//! `J = sum_{i<M} h g(psi^i, u^i)`, the adjoint `lam^i = dJ/dpsi^i` runs
//! backwards from `lam^M = 0`:
//!
//! ```text
//! lam^i    = h (2/N)(psi^i - target) + lam^{i+1} + h DF(psi^i)^T lam^{i+1}
//! dJ/du^i  = h (2 gamma / N) u^i + h lam^{i+1}
//! ```

use crate::dynamics::interaction_into;
use crate::error::{Error, Result};
use crate::model::{ControlSequence, InteractionKernel};

use super::OcpProblem;

/// Forward sweep over a flat `[step][agent][dim]` control buffer. Returns the
/// cost and fills `states` with `psi^0..psi^M` in the same layout.
pub(crate) fn forward(problem: &OcpProblem, u: &[f64], states: &mut Vec<f64>) -> f64 {
    let params = &problem.params;
    let d = params.dim();
    let nd = params.n_agents() * d;
    let m = problem.grid.m_steps();
    let h = problem.grid.h();
    let n = params.n_agents() as f64;
    let gamma = params.gamma();
    let target = params.target();

    states.clear();
    states.resize((m + 1) * nd, 0.0);
    states[..nd].copy_from_slice(problem.initial.as_slice());
    let mut f = vec![0.0; nd];
    let mut cost = 0.0;
    for i in 0..m {
        let (done, rest) = states.split_at_mut((i + 1) * nd);
        let x = &done[i * nd..];
        let ui = &u[i * nd..(i + 1) * nd];

        let track: f64 = x
            .chunks_exact(d)
            .map(|r| {
                r.iter()
                    .zip(target)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        let effort: f64 = ui.iter().map(|v| v * v).sum();
        cost += h * ((track + gamma * effort) / n);

        interaction_into(x, d, params.kernel(), &mut f);
        let next = &mut rest[..nd];
        for j in 0..nd {
            next[j] = x[j] + h * (f[j] + ui[j]);
        }
    }
    cost
}

pub(crate) fn objective(problem: &OcpProblem, u: &[f64]) -> f64 {
    let mut states = Vec::new();
    forward(problem, u, &mut states)
}

/// Cost and adjoint gradient; `grad` is overwritten.
pub(crate) fn objective_gradient_adjoint(
    problem: &OcpProblem,
    u: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    let params = &problem.params;
    let kernel = params.kernel();
    if !kernel.is_differentiable() {
        return Err(Error::ModeNotSupported(format!(
            "adjoint gradient needs a differentiable kernel, got `{kernel}`; select finite-difference mode"
        )));
    }
    let d = params.dim();
    let n_agents = params.n_agents();
    let nd = n_agents * d;
    let m = problem.grid.m_steps();
    let h = problem.grid.h();
    let n = n_agents as f64;
    let gamma = params.gamma();
    let target = params.target();

    let mut states = Vec::new();
    let cost = forward(problem, u, &mut states);

    let mut lam = vec![0.0; nd];
    let mut next_lam = vec![0.0; nd];
    let mut jt = vec![0.0; nd];
    let mut gx = vec![0.0; d];
    for i in (0..m).rev() {
        for j in 0..nd {
            grad[i * nd + j] = h * (2.0 * gamma / n) * u[i * nd + j] + h * lam[j];
        }
        let x = &states[i * nd..(i + 1) * nd];
        interaction_vjp(x, d, kernel, &lam, &mut jt, &mut gx)?;
        for k in 0..n_agents {
            for (c, t) in target.iter().enumerate() {
                let j = k * d + c;
                next_lam[j] = h * (2.0 / n) * (x[j] - t) + lam[j] + h * jt[j];
            }
        }
        std::mem::swap(&mut lam, &mut next_lam);
    }
    Ok(cost)
}

/// `out = DF(x)^T mu` for the interaction map `F`.
fn interaction_vjp(
    x: &[f64],
    d: usize,
    kernel: InteractionKernel,
    mu: &[f64],
    out: &mut [f64],
    gx: &mut [f64],
) -> Result<()> {
    out.iter_mut().for_each(|v| *v = 0.0);
    if kernel == InteractionKernel::Zero {
        return Ok(());
    }
    let n = x.len() / d;
    let inv_n = 1.0 / n as f64;
    for k in 0..n {
        let xk = &x[k * d..(k + 1) * d];
        let mk = &mu[k * d..(k + 1) * d];
        for l in 0..n {
            if l == k {
                continue;
            }
            let xl = &x[l * d..(l + 1) * d];
            let w = kernel.eval(xk, xl);
            kernel.grad_x(xk, xl, gx)?;
            // s = mu_k . (x_l - x_k)
            let s: f64 = mk
                .iter()
                .zip(xl)
                .zip(xk)
                .map(|((m, a), b)| m * (a - b))
                .sum();
            for c in 0..d {
                // dP/dy = -dP/dx
                let dk = inv_n * (s * gx[c] - w * mk[c]);
                out[k * d + c] += dk;
                out[l * d + c] -= dk;
            }
        }
    }
    Ok(())
}

/// Central differences of the objective with absolute step `step`.
pub(crate) fn objective_gradient_fd(
    problem: &OcpProblem,
    u: &[f64],
    grad: &mut [f64],
    step: f64,
) -> f64 {
    let mut states = Vec::new();
    let cost = forward(problem, u, &mut states);
    let mut probe = u.to_vec();
    for j in 0..u.len() {
        probe[j] = u[j] + step;
        let fp = forward(problem, &probe, &mut states);
        probe[j] = u[j] - step;
        let fm = forward(problem, &probe, &mut states);
        probe[j] = u[j];
        grad[j] = (fp - fm) / (2.0 * step);
    }
    cost
}

/// Objective of `problem` at `controls` and its exact gradient, shaped like
/// the control sequence.
pub fn objective_and_gradient(
    problem: &OcpProblem,
    controls: &ControlSequence,
) -> Result<(f64, ControlSequence)> {
    problem.check_controls(controls)?;
    let u = controls.to_flat();
    let mut g = vec![0.0; u.len()];
    let cost = objective_gradient_adjoint(problem, &u, &mut g)?;
    let grad = ControlSequence::from_flat(
        problem.grid,
        problem.params.n_agents(),
        problem.params.dim(),
        &g,
    )?;
    Ok((cost, grad))
}

/// Same as [`objective_and_gradient`] but with central finite differences;
/// works for every kernel.
pub fn finite_difference_gradient(
    problem: &OcpProblem,
    controls: &ControlSequence,
    step: f64,
) -> Result<(f64, ControlSequence)> {
    problem.check_controls(controls)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let u = controls.to_flat();
    let mut g = vec![0.0; u.len()];
    let cost = objective_gradient_fd(problem, &u, &mut g, step);
    let grad = ControlSequence::from_flat(
        problem.grid,
        problem.params.n_agents(),
        problem.params.dim(),
        &g,
    )?;
    Ok((cost, grad))
}
