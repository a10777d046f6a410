use proptest::prelude::*;

use turnpike::certificate::{c1_constant, r1_index};
use turnpike::{
    closed_loop_rollout, control_bound_check, dissipativity_check, dpp_check, drift, ensemble_norm,
    euler_step, lyapunov, rollout, running_cost, solve_ocp, solve_static, static_residual,
    total_cost, turnpike_report, ConstantsLedger, ControlSequence, InteractionKernel, ModelParams,
    OcpProblem, SolverConfig, StateMatrix, TimeGrid, Trajectory,
};

const KERNELS: [InteractionKernel; 3] = [
    InteractionKernel::Quadratic,
    InteractionKernel::Absolute,
    InteractionKernel::Zero,
];

fn matrix(n: usize, d: usize, lo: f64, hi: f64) -> impl Strategy<Value = StateMatrix> {
    prop::collection::vec(lo..hi, n * d).prop_map(move |v| StateMatrix::new(n, d, v).unwrap())
}

fn kernel() -> impl Strategy<Value = InteractionKernel> {
    prop::sample::select(KERNELS.to_vec())
}

fn params(n: usize, d: usize, target: Vec<f64>, gamma: f64, k: InteractionKernel) -> ModelParams {
    ModelParams::new(n, d, target, gamma, k, 1.0).unwrap()
}

/// `(params, initial, controls)` on a grid with `m` steps of size `h`.
fn instance(
    max_n: usize,
    max_d: usize,
    max_m: usize,
    kernels: Vec<InteractionKernel>,
) -> impl Strategy<Value = (ModelParams, StateMatrix, ControlSequence)> {
    (
        1..=max_n,
        1..=max_d,
        1..=max_m,
        prop::sample::select(kernels),
        0.01f64..0.2,
        0.01f64..1.0,
    )
        .prop_flat_map(|(n, d, m, k, h, gamma)| {
            (
                Just((n, d, m, k, h, gamma)),
                prop::collection::vec(-1.0f64..1.0, d),
                matrix(n, d, -1.0, 1.0),
                prop::collection::vec(-1.0f64..1.0, m * n * d),
            )
        })
        .prop_map(|((n, d, m, k, h, gamma), target, x0, u)| {
            let p = params(n, d, target, gamma, k);
            let grid = TimeGrid::from_steps(0.0, m as f64 * h, m).unwrap();
            let controls = ControlSequence::from_flat(grid, n, d, &u).unwrap();
            (p, x0, controls)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ensemble_norm_squares_to_row_sum(x in (1usize..12, 1usize..4).prop_flat_map(|(n, d)| matrix(n, d, -10.0, 10.0))) {
        let direct: f64 = x.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum();
        let norm = ensemble_norm(&x).unwrap();
        prop_assert!((norm * norm - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn running_cost_is_nonnegative((p, x0, u) in instance(6, 3, 2, KERNELS.to_vec())) {
        let g = running_cost(&x0, &u.controls()[0], &p).unwrap();
        prop_assert!(g >= 0.0);
        let s = solve_static(&p);
        prop_assert!(running_cost(&s.state, &s.control, &p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn static_pair_is_an_equilibrium(target in prop::collection::vec(-5.0f64..5.0, 1..4), n in 1usize..20, k in kernel()) {
        let p = params(n, target.len(), target, 0.1, k);
        let s = solve_static(&p);
        prop_assert!(static_residual(&s.state, &s.control, &p).unwrap() <= 1e-12);
    }

    #[test]
    fn terminal_state_is_not_charged((p, x0, u) in instance(5, 2, 6, KERNELS.to_vec()), junk in -100.0f64..100.0) {
        let traj = rollout(&x0, &u, &p).unwrap();
        let j = total_cost(&traj, &u, &p).unwrap();
        let mut states = traj.states().to_vec();
        let last = states.last_mut().unwrap();
        last.as_mut_slice().iter_mut().for_each(|v| *v = junk);
        let altered = Trajectory::new(states, *traj.grid()).unwrap();
        prop_assert_eq!(total_cost(&altered, &u, &p).unwrap(), j);
    }

    #[test]
    fn kernels_are_symmetric(
        d in 1usize..4,
        seed in prop::collection::vec(-10.0f64..10.0, 6),
        k in prop::sample::select(vec![InteractionKernel::Quadratic, InteractionKernel::Absolute]),
    ) {
        let x = &seed[..d];
        let y = &seed[3..3 + d];
        prop_assert!((k.eval(x, y) - k.eval(y, x)).abs() <= 1e-12);
        prop_assert_eq!(k.eval(x, x), 0.0);
    }

    #[test]
    fn interaction_conserves_the_mean(
        x in (2usize..15, 1usize..4).prop_flat_map(|(n, d)| matrix(n, d, -2.0, 2.0)),
        k in kernel(),
        h in 0.001f64..0.2,
    ) {
        let p = params(x.n_agents(), x.dim(), vec![0.0; x.dim()], 0.1, k);
        let u = StateMatrix::zeros(x.n_agents(), x.dim());
        let next = euler_step(&x, &u, h, &p).unwrap();
        for (a, b) in x.mean().iter().zip(next.mean()) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dynamics_are_permutation_equivariant(
        (p, x0, u) in instance(8, 3, 5, KERNELS.to_vec()),
        shuffle in any::<prop::sample::Index>(),
    ) {
        let n = p.n_agents();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(shuffle.index(n.max(1)));
        perm.swap(0, n - 1);
        let u_perm = ControlSequence::new(
            u.controls().iter().map(|c| c.permute_rows(&perm)).collect(),
            *u.grid(),
        ).unwrap();
        let x_perm = x0.permute_rows(&perm);

        let f = drift(&x0, &u.controls()[0], &p).unwrap();
        let f_perm = drift(&x_perm, &u_perm.controls()[0], &p).unwrap();
        prop_assert!(ensemble_norm(&f.permute_rows(&perm).sub(&f_perm)).unwrap() <= 1e-13);

        let a = rollout(&x0, &u, &p).unwrap();
        let b = rollout(&x_perm, &u_perm, &p).unwrap();
        for (sa, sb) in a.states().iter().zip(b.states()) {
            prop_assert!(ensemble_norm(&sa.permute_rows(&perm).sub(sb)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn rollout_is_deterministic((p, x0, u) in instance(6, 2, 8, KERNELS.to_vec())) {
        let a = rollout(&x0, &u, &p).unwrap();
        let b = rollout(&x0, &u, &p).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn closed_loop_matches_feedback_rollout(
        (p, x0, _) in instance(8, 3, 1, KERNELS.to_vec()),
        beta in 0.5f64..8.0,
        h in 0.01f64..0.1,
    ) {
        let grid = TimeGrid::from_steps(0.0, 40.0 * h, 40).unwrap();
        let p = p.with_kernel_bound(1.0).unwrap();
        let (traj, u) = closed_loop_rollout(&x0, &grid, &p, beta).unwrap();
        let open = rollout(&x0, &u, &p).unwrap();
        for (a, b) in traj.states().iter().zip(open.states()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cheap_cost_respects_its_bound(
        x0 in (1usize..12).prop_flat_map(|n| matrix(n, 1, 0.0, 1.0)),
        beta in prop::sample::select(vec![1.0, 3.0, 8.0]),
        h in prop::sample::select(vec![0.1, 0.01]),
        k in kernel(),
    ) {
        let n = x0.n_agents();
        let bound = k.max_pairwise(&x0);
        let p = ModelParams::new(n, 1, vec![0.5], 0.1, k, bound).unwrap();
        let grid = TimeGrid::new(0.0, 5.0, h).unwrap();
        let (traj, u) = closed_loop_rollout(&x0, &grid, &p, beta).unwrap();
        let j = total_cost(&traj, &u, &p).unwrap();
        let ledger = ConstantsLedger::new(&p, h, beta).unwrap();
        let e0 = ensemble_norm(&x0.minus_row(&[0.5])).unwrap();
        let rhs = ledger.c0_tilde * turnpike::alpha(e0, &p).unwrap();
        prop_assert!(j <= rhs * (1.0 + 1e-12), "J={j} bound={rhs}");
    }

    #[test]
    fn control_magnitude_estimate(
        x0 in (2usize..10).prop_flat_map(|n| matrix(n, 1, 0.0, 1.0)),
        beta in prop::sample::select(vec![1.0, 3.0, 8.0]),
        h in prop::sample::select(vec![0.1, 0.01]),
    ) {
        let k = InteractionKernel::Quadratic;
        let p = ModelParams::new(x0.n_agents(), 1, vec![0.5], 0.1, k, k.max_pairwise(&x0)).unwrap();
        let grid = TimeGrid::from_steps(0.0, 100.0 * h, 100).unwrap();
        let (traj, u) = closed_loop_rollout(&x0, &grid, &p, beta).unwrap();
        let report = control_bound_check(&traj, &u, &p, beta).unwrap();
        prop_assert!(report.applicable);
        prop_assert_eq!(report.violations, 0);
    }

    #[test]
    fn lyapunov_decays_geometrically(
        x0 in (1usize..10, 1usize..3).prop_flat_map(|(n, d)| matrix(n, d, -1.0, 2.0)),
        beta in 0.5f64..9.0,
        k in kernel(),
    ) {
        let h = 0.01;
        let d = x0.dim();
        let p = ModelParams::new(x0.n_agents(), d, vec![0.5; d], 0.1, k, 1.0).unwrap();
        let grid = TimeGrid::from_steps(0.0, 1.0, 100).unwrap();
        let (traj, _) = closed_loop_rollout(&x0, &grid, &p, beta).unwrap();
        let l0 = lyapunov(&x0, &p).unwrap();
        let q = (1.0 - h * beta).powi(2);
        for (i, x) in traj.states().iter().enumerate() {
            let want = q.powi(i as i32) * l0;
            let got = lyapunov(x, &p).unwrap();
            prop_assert!((got - want).abs() <= 1e-10 * want.max(f64::MIN_POSITIVE), "step {i}: {got} vs {want}");
        }
    }

    #[test]
    fn dissipativity_on_consistent_trajectories((p, x0, u) in instance(10, 3, 20, KERNELS.to_vec())) {
        let traj = rollout(&x0, &u, &p).unwrap();
        let report = dissipativity_check(&traj, &u, &p).unwrap();
        prop_assert_eq!(report.violations, 0, "min residual {}", report.min_residual);
    }
}

/// Small random differentiable problems for the solver properties.
fn small_problem() -> impl Strategy<Value = (OcpProblem, f64)> {
    (
        2usize..5,
        4usize..12,
        prop::sample::select(vec![InteractionKernel::Quadratic, InteractionKernel::Zero]),
    )
        .prop_flat_map(|(n, m, k)| {
            (
                Just((n, m, k)),
                matrix(n, 1, 0.0, 1.0),
                0.05f64..1.0,
                -5.0f64..5.0,
            )
        })
        .prop_map(|((n, m, k), x0, gamma, t0)| {
            let p =
                ModelParams::new(n, 1, vec![0.5], gamma, k, k.max_pairwise(&x0).max(1e-3)).unwrap();
            let grid = TimeGrid::from_steps(0.0, 0.1 * m as f64, m).unwrap();
            (OcpProblem::new(p, grid, x0).unwrap(), t0)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimal_value_dominated_by_cheap_control((prob, _) in small_problem()) {
        let sol = solve_ocp(&prob, &SolverConfig::default()).unwrap();
        prop_assert!(sol.converged);
        for w in sol.log.windows(2) {
            prop_assert!(w[1].objective <= w[0].objective * (1.0 + 1e-13));
        }
        for beta in [0.5, 1.0, 3.0, 9.0] {
            let (traj, u) = closed_loop_rollout(prob.initial(), prob.grid(), prob.params(), beta).unwrap();
            let j = total_cost(&traj, &u, prob.params()).unwrap();
            prop_assert!(sol.value <= j * (1.0 + 1e-12), "beta={beta}: v={} J={j}", sol.value);
        }
    }

    #[test]
    fn dynamic_programming_on_random_instances((prob, _) in small_problem()) {
        let cfg = SolverConfig::default();
        let sol = solve_ocp(&prob, &cfg).unwrap();
        let m = prob.grid().m_steps();
        for a in [m / 4, m / 2, 3 * m / 4] {
            if a == 0 {
                continue;
            }
            let r = dpp_check(&prob, &sol, a, &cfg).unwrap();
            prop_assert!(r.passed, "split {a}: gap {}", r.relative_gap);
        }
    }

    #[test]
    fn solutions_ignore_the_time_origin((prob, t0) in small_problem()) {
        let m = prob.grid().m_steps();
        let h = prob.grid().h();
        let shifted_grid = TimeGrid::from_steps(t0, t0 + h * m as f64, m).unwrap();
        let shifted = OcpProblem::new(prob.params().clone(), shifted_grid, prob.initial().clone()).unwrap();
        let cfg = SolverConfig::default();
        let a = solve_ocp(&prob, &cfg).unwrap();
        let b = solve_ocp(&shifted, &cfg).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.max(1e-300));
        let da: Vec<f64> = a.controls.to_flat();
        let db: Vec<f64> = b.controls.to_flat();
        for (x, y) in da.iter().zip(&db) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn certificate_chain_and_tail_bound((prob, _) in small_problem()) {
        let sol = solve_ocp(&prob, &SolverConfig::default()).unwrap();
        let k = prob.params().kernel();
        let along = sol.trajectory.states().iter().map(|s| k.max_pairwise(s)).fold(0.0, f64::max);
        let params = prob.params().clone().with_kernel_bound(along.max(1e-3)).unwrap();
        let prob = OcpProblem::new(params.clone(), *prob.grid(), prob.initial().clone()).unwrap();
        let ledger = ConstantsLedger::new(&params, prob.grid().h(), 3.0).unwrap();
        let cert = turnpike_report(&prob, &sol, 0.5, &ledger).unwrap();
        prop_assert!(cert.chain_holds);
        if k == InteractionKernel::Quadratic {
            prop_assert!(cert.passed, "{cert:?}");
        }
    }
}

#[test]
fn euler_rollout_converges_at_first_order() {
    let p = ModelParams::new(4, 1, vec![0.5], 0.1, InteractionKernel::Quadratic, 1.0).unwrap();
    let x0 = StateMatrix::new(4, 1, vec![0.1, 0.4, 0.8, 1.0]).unwrap();
    let field = |t: f64, k: usize| (t * (1.0 + k as f64)).sin() * 0.5;
    let terminal = |m: usize| {
        let grid = TimeGrid::from_steps(0.0, 1.0, m).unwrap();
        let controls = (0..m)
            .map(|i| {
                StateMatrix::new(4, 1, (0..4).map(|k| field(grid.time(i), k)).collect()).unwrap()
            })
            .collect();
        let u = ControlSequence::new(controls, grid).unwrap();
        rollout(&x0, &u, &p).unwrap().terminal().clone()
    };
    let reference = terminal(1 << 16);
    let err = |m: usize| ensemble_norm(&terminal(m).sub(&reference)).unwrap();
    for m in [50, 100, 200] {
        let ratio = err(m) / err(2 * m);
        assert!((ratio - 2.0).abs() <= 0.4, "m={m}: ratio {ratio}");
    }
}

#[test]
fn one_step_consistency_is_exact() {
    let p = ModelParams::new(3, 2, vec![0.0, 1.0], 0.1, InteractionKernel::Quadratic, 1.0).unwrap();
    let x = StateMatrix::new(3, 2, vec![0.1, 0.2, -0.3, 0.5, 1.0, 0.0]).unwrap();
    let u = StateMatrix::new(3, 2, vec![0.5, -0.5, 0.0, 0.25, -1.0, 2.0]).unwrap();
    let h = 0.125;
    let step = euler_step(&x, &u, h, &p).unwrap();
    let f = drift(&x, &u, &p).unwrap();
    for ((a, b), fi) in step.as_slice().iter().zip(x.as_slice()).zip(f.as_slice()) {
        // exact up to the rounding of x + h f
        assert!(((a - b) / h - fi).abs() <= 1e-14 * (1.0 + b.abs()) / h);
    }
}

#[test]
fn c1_is_uniform_in_h() {
    let (beta, gamma, bound, lambda, t) = (3.0, 0.1, 1.0, 0.5, 5.0_f64);
    let d0 = turnpike::d0_limit(beta, gamma, bound).unwrap();
    for h in [0.1, 0.05, 0.01, 0.005] {
        let m = (t / h).round() as usize;
        let r1 = r1_index(lambda, m).unwrap();
        let c0 = turnpike::c0_constant(h, beta, gamma, bound).unwrap();
        let c1 = c1_constant(c0, h, r1).unwrap();
        let stated = 2.0 * d0 * d0 / ((1.0 - lambda) * t);
        let general = 4.0 * d0 * d0 / ((1.0 - lambda) * t - h);
        assert!(
            c1 <= stated * (1.0 + h),
            "h={h}: C1={c1} stated bound {stated}"
        );
        assert!(c1 <= general, "h={h}: C1={c1} general bound {general}");
    }
}
