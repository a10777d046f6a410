//! C ABI for the `turnpike` crate.
//!
//! Objects are opaque handles created by `tp_*_new` / `tp_solve` and released
//! with the matching `tp_*_free`. Every fallible call returns a [`TpStatus`];
//! on failure the message is kept per thread and read with
//! [`tp_last_error_message`]. Matrices are row-major `f64` arrays: a state or
//! control is `n_agents * dim` values, a sequence stacks its time steps.
//!
//! Handles are not synchronised: a handle may move between threads but must
//! not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use turnpike::{
    c0_constant, closed_loop_rollout, d0_limit, decay_rate, dpp_check, objective_and_gradient,
    solve_ocp_from, turnpike_report, ConstantsLedger, ControlSequence, Error, GradientMode,
    InteractionKernel, ModelParams, OcpProblem, OcpSolution, SolverConfig, StateMatrix, TimeGrid,
};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ConstraintViolation = 3,
    ModeNotSupported = 4,
    Divergence = 5,
    NotConverged = 6,
    DegenerateHorizon = 7,
    BufferSize = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TpKernel {
    Quadratic = 0,
    Absolute = 1,
    Zero = 2,
}

impl From<TpKernel> for InteractionKernel {
    fn from(k: TpKernel) -> Self {
        match k {
            TpKernel::Quadratic => InteractionKernel::Quadratic,
            TpKernel::Absolute => InteractionKernel::Absolute,
            TpKernel::Zero => InteractionKernel::Zero,
        }
    }
}

/// Opaque model parameters.
pub struct TpModel(ModelParams);

/// Opaque optimal control problem.
pub struct TpProblem(OcpProblem);

/// Opaque optimal control solution.
pub struct TpSolution(OcpSolution);

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TpSolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_tolerance: f64,
    pub memory: usize,
    /// Nonzero selects central finite differences instead of the adjoint.
    pub finite_difference: u8,
    pub finite_difference_step: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TpSolutionInfo {
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: u8,
    pub n_agents: usize,
    pub dim: usize,
    pub m_steps: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TpConstants {
    pub c0_tilde: f64,
    pub d0_tilde: f64,
    pub decay_rate: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TpCertificate {
    pub r1: usize,
    pub c0_tilde: f64,
    pub c1_tilde: f64,
    pub tail_sum: f64,
    pub bound: f64,
    pub dissipativity_violations: usize,
    pub passed: u8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TpDppReport {
    pub tail_cost: f64,
    pub resolved_value: f64,
    pub relative_gap: f64,
    pub passed: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TpStatus {
    match err {
        Error::InvalidInput(_) | Error::Config { .. } | Error::Parse(_) | Error::Io(_) => {
            TpStatus::InvalidInput
        }
        Error::ConstraintViolation(_) => TpStatus::ConstraintViolation,
        Error::ModeNotSupported(_) => TpStatus::ModeNotSupported,
        Error::Divergence { .. } => TpStatus::Divergence,
        Error::NotConverged(_) => TpStatus::NotConverged,
        Error::DegenerateHorizon(_) => TpStatus::DegenerateHorizon,
    }
}

enum Failure {
    Status(TpStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(TpStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> TpStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TpStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            TpStatus::Internal
        }
    }
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(
    p: *mut f64,
    len: usize,
    needed: usize,
    what: &str,
) -> Result<&'a mut [f64], Failure> {
    if len < needed {
        return Err(Failure::Status(
            TpStatus::BufferSize,
            format!("`{what}` holds {len} values, {needed} needed"),
        ));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, needed))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn state(model: &ModelParams, data: &[f64]) -> Result<StateMatrix, Failure> {
    Ok(StateMatrix::new(
        model.n_agents(),
        model.dim(),
        data.to_vec(),
    )?)
}

fn solver_config(c: &TpSolverConfig) -> SolverConfig {
    SolverConfig {
        max_iterations: c.max_iterations,
        gradient_tolerance: c.gradient_tolerance,
        relative_tolerance: c.relative_tolerance,
        memory: c.memory,
        gradient_mode: if c.finite_difference != 0 {
            GradientMode::FiniteDifference {
                step: c.finite_difference_step,
            }
        } else {
            GradientMode::Adjoint
        },
        ..SolverConfig::default()
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the length the full message
/// needs including the NUL, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Fills `out` with the library defaults.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tp_solver_config_default(out: *mut TpSolverConfig) -> TpStatus {
    guard(|| {
        let d = SolverConfig::default();
        put(
            out,
            TpSolverConfig {
                max_iterations: d.max_iterations,
                gradient_tolerance: d.gradient_tolerance,
                relative_tolerance: d.relative_tolerance,
                memory: d.memory,
                finite_difference: 0,
                finite_difference_step: turnpike::FD_STEP,
            },
            "out",
        )
    })
}

/// Creates model parameters. `target` holds `dim` values.
///
/// # Safety
/// `target` must point to `dim` readable values; `out` must be valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn tp_model_new(
    n_agents: usize,
    dim: usize,
    target: *const f64,
    gamma: f64,
    kernel: TpKernel,
    kernel_bound: f64,
    out: *mut *mut TpModel,
) -> TpStatus {
    guard(|| {
        let target = input(target, dim, "target")?;
        let params = ModelParams::new(
            n_agents,
            dim,
            target.to_vec(),
            gamma,
            kernel.into(),
            kernel_bound,
        )?;
        put(out, Box::into_raw(Box::new(TpModel(params))), "out")
    })
}

/// # Safety
/// `model` must be null or a handle from [`tp_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_model_free(model: *mut TpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Creates the optimal control problem on the grid `[t0, t_final]` with
/// step `h`. `initial` holds `n_agents * dim` values.
///
/// # Safety
/// `model` must be a live handle, `initial` must point to `n_agents * dim`
/// readable values and `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tp_problem_new(
    model: *const TpModel,
    t0: f64,
    t_final: f64,
    h: f64,
    initial: *const f64,
    out: *mut *mut TpProblem,
) -> TpStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let grid = TimeGrid::new(t0, t_final, h)?;
        let x0 = state(
            model,
            input(initial, model.n_agents() * model.dim(), "initial")?,
        )?;
        let problem = OcpProblem::new(model.clone(), grid, x0)?;
        put(out, Box::into_raw(Box::new(TpProblem(problem))), "out")
    })
}

/// # Safety
/// `problem` must be null or a handle from [`tp_problem_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_problem_free(problem: *mut TpProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of time steps `M` of the problem grid, or 0 for a null handle.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tp_problem_steps(problem: *const TpProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.0.grid().m_steps())
}

/// Objective `J(u)` and its exact gradient. `controls` and `gradient` hold
/// `M * n_agents * dim` values.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tp_objective_gradient(
    problem: *const TpProblem,
    controls: *const f64,
    len: usize,
    value: *mut f64,
    gradient: *mut f64,
) -> TpStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let (n, d) = (p.params().n_agents(), p.params().dim());
        let needed = p.grid().m_steps() * n * d;
        if len != needed {
            return Err(Failure::Status(
                TpStatus::BufferSize,
                format!("controls hold {len} values, expected {needed}"),
            ));
        }
        let u = ControlSequence::from_flat(*p.grid(), n, d, input(controls, len, "controls")?)?;
        let (j, g) = objective_and_gradient(p, &u)?;
        output(gradient, len, needed, "gradient")?.copy_from_slice(&g.to_flat());
        put(value, j, "value")
    })
}

/// Solves the problem, from `warm_start` (`M * n_agents * dim` values) when
/// non-null and from zero controls otherwise. A non-converged run still
/// returns a solution; check `converged` in [`tp_solution_info`].
///
/// # Safety
/// `problem` and `config` must be valid; `warm_start` must be null or hold
/// the stated number of values; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tp_solve(
    problem: *const TpProblem,
    config: *const TpSolverConfig,
    warm_start: *const f64,
    out: *mut *mut TpSolution,
) -> TpStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let cfg = solver_config(handle(config, "config")?);
        let (n, d) = (p.params().n_agents(), p.params().dim());
        let warm = if warm_start.is_null() {
            None
        } else {
            let len = p.grid().m_steps() * n * d;
            Some(ControlSequence::from_flat(
                *p.grid(),
                n,
                d,
                input(warm_start, len, "warm_start")?,
            )?)
        };
        let sol = solve_ocp_from(p, &cfg, warm.as_ref())?;
        put(out, Box::into_raw(Box::new(TpSolution(sol))), "out")
    })
}

/// # Safety
/// `solution` must be null or a handle from [`tp_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tp_solution_free(solution: *mut TpSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// # Safety
/// `solution` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tp_solution_info(
    solution: *const TpSolution,
    out: *mut TpSolutionInfo,
) -> TpStatus {
    guard(|| {
        let s = &handle(solution, "solution")?.0;
        let x0 = s.trajectory.initial();
        let info = TpSolutionInfo {
            value: s.value,
            gradient_norm: s.gradient_norm,
            iterations: s.iterations,
            converged: s.converged as u8,
            n_agents: x0.n_agents(),
            dim: x0.dim(),
            m_steps: s.trajectory.grid().m_steps(),
        };
        put(out, info, "out")
    })
}

/// Copies the optimal controls, `M * n_agents * dim` values.
///
/// # Safety
/// `buf` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn tp_solution_controls(
    solution: *const TpSolution,
    buf: *mut f64,
    len: usize,
) -> TpStatus {
    guard(|| {
        let flat = handle(solution, "solution")?.0.controls.to_flat();
        output(buf, len, flat.len(), "buf")?.copy_from_slice(&flat);
        Ok(())
    })
}

/// Copies the optimal states, `(M + 1) * n_agents * dim` values.
///
/// # Safety
/// `buf` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn tp_solution_states(
    solution: *const TpSolution,
    buf: *mut f64,
    len: usize,
) -> TpStatus {
    guard(|| {
        let states = handle(solution, "solution")?.0.trajectory.states();
        let needed: usize = states.iter().map(|x| x.as_slice().len()).sum();
        let out = output(buf, len, needed, "buf")?;
        for (chunk, x) in out.chunks_exact_mut(needed / states.len()).zip(states) {
            chunk.copy_from_slice(x.as_slice());
        }
        Ok(())
    })
}

/// Closed-loop cheap-control rollout with gain `beta`. `states` receives
/// `(M + 1) * n_agents * dim` values and `controls` `M * n_agents * dim`.
///
/// # Safety
/// `model` must be a live handle; buffers must match the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tp_cheap_rollout(
    model: *const TpModel,
    t0: f64,
    t_final: f64,
    h: f64,
    initial: *const f64,
    beta: f64,
    states: *mut f64,
    states_len: usize,
    controls: *mut f64,
    controls_len: usize,
) -> TpStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let grid = TimeGrid::new(t0, t_final, h)?;
        let nd = model.n_agents() * model.dim();
        let x0 = state(model, input(initial, nd, "initial")?)?;
        let (traj, u) = closed_loop_rollout(&x0, &grid, model, beta)?;
        let m = grid.m_steps();
        let s_out = output(states, states_len, (m + 1) * nd, "states")?;
        let u_out = output(controls, controls_len, m * nd, "controls")?;
        for (chunk, x) in s_out.chunks_exact_mut(nd).zip(traj.states()) {
            chunk.copy_from_slice(x.as_slice());
        }
        u_out.copy_from_slice(&u.to_flat());
        Ok(())
    })
}

/// Cheap-control constants for step `h` and gain `beta`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tp_cheap_constants(
    h: f64,
    beta: f64,
    gamma: f64,
    kernel_bound: f64,
    out: *mut TpConstants,
) -> TpStatus {
    guard(|| {
        let c = TpConstants {
            c0_tilde: c0_constant(h, beta, gamma, kernel_bound)?,
            d0_tilde: d0_limit(beta, gamma, kernel_bound)?,
            decay_rate: decay_rate(h, beta)?,
        };
        put(out, c, "out")
    })
}

/// Turnpike certificate of a converged solution with tail fraction `lambda`
/// and constants from gain `beta`.
///
/// # Safety
/// Handles must be live and belong together; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tp_certificate(
    problem: *const TpProblem,
    solution: *const TpSolution,
    lambda: f64,
    beta: f64,
    out: *mut TpCertificate,
) -> TpStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let s = &handle(solution, "solution")?.0;
        let ledger = ConstantsLedger::new(p.params(), p.grid().h(), beta)?;
        let c = turnpike_report(p, s, lambda, &ledger)?;
        let cert = TpCertificate {
            r1: c.r1,
            c0_tilde: c.c0_tilde,
            c1_tilde: c.c1_tilde,
            tail_sum: c.tail_sum,
            bound: c.bound,
            dissipativity_violations: c.dissipativity_violations,
            passed: c.passed as u8,
        };
        put(out, cert, "out")
    })
}

/// Re-solves the tail from step `split` and compares it with the solution's
/// tail cost.
///
/// # Safety
/// Handles and `config` must be valid; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tp_dpp_check(
    problem: *const TpProblem,
    solution: *const TpSolution,
    split: usize,
    config: *const TpSolverConfig,
    out: *mut TpDppReport,
) -> TpStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let s = &handle(solution, "solution")?.0;
        let cfg = solver_config(handle(config, "config")?);
        let r = dpp_check(p, s, split, &cfg)?;
        let rep = TpDppReport {
            tail_cost: r.tail_cost,
            resolved_value: r.resolved_value,
            relative_gap: r.relative_gap,
            passed: r.passed as u8,
        };
        put(out, rep, "out")
    })
}
