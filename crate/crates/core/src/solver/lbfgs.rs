//! Limited-memory BFGS with a backtracking line search on flat vectors.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};

use super::{LineSearchConfig, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    /// Accepted step length along the search direction; zero for the
    /// initial record.
    pub step: f64,
}

pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

pub(crate) trait Objective {
    fn value(&mut self, x: &[f64]) -> f64;
    fn value_and_gradient(&mut self, x: &[f64], g: &mut [f64]) -> Result<f64>;
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Two-loop recursion: returns `-H g` for the current inverse-Hessian
/// approximation.
fn search_direction(g: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        q.iter_mut().zip(&p.y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let scale = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for (p, a) in history.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        q.iter_mut()
            .zip(&p.s)
            .for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

enum Search {
    Accepted {
        alpha: f64,
        f: f64,
        x: Vec<f64>,
        g: Vec<f64>,
    },
    Failed,
}

/// Relative rise of the objective tolerated by the approximate Wolfe test,
/// a few units of rounding in the summed cost.
const APPROX_WOLFE_SLACK: f64 = 1e-13;

/// Backtracking on the sufficient-decrease condition. Once the decrease is
/// below the resolution of the objective, a step is also accepted if the
/// objective stayed within rounding and the directional derivative has
/// flattened (approximate Wolfe condition), so the gradient can keep
/// shrinking after function values stop carrying information.
fn line_search<O: Objective>(
    obj: &mut O,
    ls: &LineSearchConfig,
    x: &[f64],
    f: f64,
    gd: f64,
    d: &[f64],
    alpha0: f64,
) -> Result<Search> {
    let mut alpha = alpha0;
    let mut trial = vec![0.0; x.len()];
    let mut g_new = vec![0.0; x.len()];
    for _ in 0..ls.max_backtracks {
        trial
            .iter_mut()
            .zip(x)
            .zip(d)
            .for_each(|((t, xi), di)| *t = xi + alpha * di);
        let f_new = obj.value(&trial);
        if f_new.is_finite() {
            if f_new <= f + ls.sufficient_decrease * alpha * gd {
                let f_checked = obj.value_and_gradient(&trial, &mut g_new)?;
                return Ok(Search::Accepted {
                    alpha,
                    f: f_checked,
                    x: trial,
                    g: g_new,
                });
            }
            let resolution = f.abs().max(f64::MIN_POSITIVE);
            if f_new <= f + APPROX_WOLFE_SLACK * resolution && f - f_new <= 1e-10 * resolution {
                let f_checked = obj.value_and_gradient(&trial, &mut g_new)?;
                let slope = dot(&g_new, d);
                let flat = slope >= ls.curvature * gd
                    && slope <= (1.0 - 2.0 * ls.sufficient_decrease) * gd.abs();
                if flat {
                    return Ok(Search::Accepted {
                        alpha,
                        f: f_checked,
                        x: trial,
                        g: g_new,
                    });
                }
            }
        }
        let next = if f_new.is_finite() {
            // minimizer of the quadratic through f, gd and f_new, safeguarded
            let denom = 2.0 * (f_new - f - gd * alpha);
            if denom > 0.0 {
                (-gd * alpha * alpha / denom).clamp(0.1 * alpha, ls.shrink * alpha)
            } else {
                ls.shrink * alpha
            }
        } else {
            0.1 * alpha
        };
        alpha = next;
    }
    Ok(Search::Failed)
}

/// Minimizes `obj` from `x0`. `grad_scale` multiplies the infinity norm of
/// the gradient before it is compared with the tolerances.
pub(crate) fn minimize<O: Objective>(
    obj: &mut O,
    x0: Vec<f64>,
    config: &SolverConfig,
    grad_scale: f64,
) -> Result<Outcome> {
    let mut x = x0;
    let mut g = vec![0.0; x.len()];
    let mut f = obj.value_and_gradient(&x, &mut g)?;
    if !f.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            message: format!("objective is {f} at the starting point"),
            controls: x,
        });
    }
    let g0 = inf_norm(&g) * grad_scale;
    let threshold = config
        .gradient_tolerance
        .max(config.relative_tolerance * g0);
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(config.memory);
    let mut log = vec![IterationRecord {
        iteration: 0,
        objective: f,
        gradient_norm: g0,
        step: 0.0,
    }];
    let mut iterations = 0;
    let mut gnorm = g0;

    while gnorm > threshold && iterations < config.max_iterations {
        let mut d = search_direction(&g, &history);
        let mut gd = dot(&g, &d);
        if !(gd < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            gd = dot(&g, &d);
        }
        let alpha0 = if history.is_empty() {
            config.line_search.initial_step / inf_norm(&d).max(f64::MIN_POSITIVE)
        } else {
            config.line_search.initial_step
        };
        let mut search = line_search(obj, &config.line_search, &x, f, gd, &d, alpha0)?;
        if matches!(search, Search::Failed) && !history.is_empty() {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            gd = dot(&g, &d);
            let a0 = config.line_search.initial_step / inf_norm(&d).max(f64::MIN_POSITIVE);
            search = line_search(obj, &config.line_search, &x, f, gd, &d, a0)?;
        }
        let Search::Accepted {
            alpha,
            f: f_new,
            x: x_new,
            g: g_new,
        } = search
        else {
            // no admissible step even along steepest descent: resolution limit
            break;
        };
        if !f_new.is_finite() {
            return Err(Error::Divergence {
                iteration: iterations + 1,
                message: format!("objective became {f_new}"),
                controls: x_new,
            });
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back(Pair {
                rho: 1.0 / sy,
                s,
                y,
            });
        }
        x = x_new;
        g = g_new;
        f = f_new;
        iterations += 1;
        gnorm = inf_norm(&g) * grad_scale;
        log.push(IterationRecord {
            iteration: iterations,
            objective: f,
            gradient_norm: gnorm,
            step: alpha,
        });
    }

    Ok(Outcome {
        converged: gnorm <= threshold,
        x,
        gradient_norm: gnorm,
        iterations,
        log,
    })
}
