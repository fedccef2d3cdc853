mod common;

use approx::assert_relative_eq;
use common::*;
use lqport::backtest::tree_objective;
use lqport::fixedpoint::*;
use lqport::mgarch::{simulate_path, MarketState, ModelParams};
use lqport::tree::{build_tree, ScenarioTree};
use lqport::{Error, Matrix, Vector};
use proptest::prelude::*;

const BUDGET: usize = 1_000_000;

fn state2() -> MarketState {
    let sigma = Matrix::from_row_slice(2, 2, &[0.04, 0.012, 0.012, 0.09]);
    MarketState::new(3, Vector::from_vec(vec![1.3, 0.7]), sigma, 1e6).unwrap()
}

#[test]
fn forward_step_dense_matches_elementwise() {
    let st = state2();
    let c = cfg(0.9, 0.02, 2.0, 3, 2);
    let x_prev = Vector::from_vec(vec![0.4, -1.1]);
    let lambda = Vector::from_vec(vec![0.003, -0.007]);
    let got = forward_state_step(&x_prev, &lambda, &st, &c);
    for i in 0..2 {
        let want = x_prev[i] - lambda[i] / (c.epsilon * st.q * st.s[i]);
        assert_relative_eq!(got[i], want, epsilon = 1e-14);
    }
    assert_eq!(forward_state_step(&x_prev, &Vector::zeros(2), &st, &c), x_prev);
}

#[test]
fn backward_step_dense_matches_direct_solve() {
    let st = state2();
    let c = cfg(0.9, 0.02, 2.0, 3, 2);
    let mu = Vector::from_vec(vec![0.01, 0.004]);
    let next = Vector::from_vec(vec![0.002, -0.001]);
    let x_prev = Vector::from_vec(vec![0.5, 0.25]);
    let got = backward_costate_step(&next, &x_prev, &st, &c, &mu).unwrap();
    // (I + k P Ψ⁻¹) λ = rhs, assembled entry by entry.
    let k = c.gamma / (c.epsilon * st.q);
    let mut m = Matrix::identity(2, 2);
    for i in 0..2 {
        for j in 0..2 {
            m[(i, j)] += k * st.p[(i, j)] / st.s[j];
        }
    }
    let psi_mu = Vector::from_fn(2, |i, _| st.s[i] * mu[i]);
    let rhs = &next * c.delta - psi_mu + &st.p * &x_prev * c.gamma;
    let want = m.clone().lu().solve(&rhs).unwrap();
    assert!(max_abs_diff(&got, &want) < 1e-14);
    // The solved λ satisfies the unsolved equation.
    assert!(max_abs_diff(&(&m * &got), &rhs) < 1e-14);
}

#[test]
fn aim_portfolio_annihilates_costate_when_myopic() {
    let st = state2();
    let c = cfg(0.0, 0.02, 2.0, 3, 2);
    let mu = Vector::from_vec(vec![0.01, 0.004]);
    let aim = st.p.clone().lu().solve(&st.dollar_drift(&mu)).unwrap() / c.gamma;
    let l = backward_costate_step(&Vector::zeros(2), &aim, &st, &c, &mu).unwrap();
    assert!(l.amax() < 1e-15);
}

#[test]
fn inner_zero_problem_is_zero_after_one_sweep() {
    let dy = clamped(two_asset(0.01), 10.0);
    let tree = build_tree(&dy, 3, 2, 1, BUDGET).unwrap();
    let c = cfg(0.9, 0.01, 1.0, 3, 2);
    let x = vec![Vector::zeros(2); tree.len()];
    let sol = inner_fixed_point(&tree, &x, &c, &Vector::zeros(2), 1e-12, 100).unwrap();
    assert_eq!(sol.iterations, 1);
    assert!(sol.lambda.iter().all(|l| l.amax() == 0.0));
}

#[test]
fn inner_without_discount_takes_one_iteration() {
    let dy = clamped(two_asset(0.01), 10.0);
    let tree = build_tree(&dy, 4, 2, 2, BUDGET).unwrap();
    let c = cfg(0.0, 0.01, 1.0, 4, 2);
    let x: Vec<Vector> = (0..tree.len())
        .map(|i| Vector::from_element(2, 0.1 * i as f64))
        .collect();
    let sol = inner_fixed_point(&tree, &x, &c, &dy.params.mu, 1e-12, 100).unwrap();
    assert_eq!(sol.iterations, 1);
}

fn scalar_line() -> (lqport::mgarch::Dynamics, ScenarioTree) {
    let dy = multiplicative(scalar_params(0.01, 0.8, 0.3, 0.1, 0.04, 1.0));
    let tree = build_tree(&dy, 2, 1, 5, BUDGET).unwrap();
    (dy, tree)
}

#[test]
fn inner_matches_hand_unrolled_solve() {
    let (dy, tree) = scalar_line();
    let c = cfg(0.9, 0.01, 1.0, 2, 1);
    let mu = dy.params.mu.clone();
    let x = vec![
        Vector::from_element(1, 0.3),
        Vector::from_element(1, -0.2),
        Vector::zeros(1),
    ];
    let sol = inner_fixed_point(&tree, &x, &c, &mu, 1e-15, 100).unwrap();
    let (s1, s2) = (&tree.nodes[1].state, &tree.nodes[2].state);
    let k = |s: &MarketState| 1.0 + c.gamma * s.p[(0, 0)] / (c.epsilon * s.q * s.s[0]);
    let l2 = (-s2.s[0] * mu[0] + c.gamma * s2.p[(0, 0)] * x[1][0]) / k(s2);
    let l1 = (c.delta * l2 - s1.s[0] * mu[0] + c.gamma * s1.p[(0, 0)] * x[0][0]) / k(s1);
    assert_relative_eq!(sol.lambda[2][0], l2, epsilon = 1e-12);
    assert_relative_eq!(sol.lambda[1][0], l1, epsilon = 1e-12);
}

#[test]
fn two_step_matches_dense_kkt() {
    let (dy, tree) = scalar_line();
    let c = LQConfig::new(0.9, 0.01, 1.0, 2, Vector::from_element(1, 0.2)).unwrap();
    let mu = dy.params.mu.clone();
    let opts = TwoStepOptions {
        outer_tol: 1e-14,
        inner_tol: 1e-15,
        ..TwoStepOptions::default()
    };
    let sol = solve_two_step(&tree, &c, &mu, &opts).unwrap();
    let (s1, s2) = (&tree.nodes[1].state, &tree.nodes[2].state);
    let e = |s: &MarketState| 1.0 / (c.epsilon * s.q * s.s[0]);
    // Unknowns [X1, X2, λ1, λ2]: two holdings equations and two costate equations.
    #[rustfmt::skip]
    let kkt = Matrix::from_row_slice(4, 4, &[
        1.0, 0.0, e(s1), 0.0,
        -1.0, 1.0, 0.0, e(s2),
        -c.gamma * s1.p[(0, 0)], 0.0, 1.0, -c.delta,
        0.0, -c.gamma * s2.p[(0, 0)], 0.0, 1.0,
    ]);
    let rhs = Vector::from_vec(vec![c.x0[0], 0.0, -s1.s[0] * mu[0], -s2.s[0] * mu[0]]);
    let z = kkt.lu().solve(&rhs).unwrap();
    let t = &sol.trajectory;
    assert_relative_eq!(t.x[1][0], z[0], epsilon = 1e-9);
    assert_relative_eq!(t.x[2][0], z[1], epsilon = 1e-9);
    assert_relative_eq!(t.lambda[1][0], z[2], epsilon = 1e-11);
    assert_relative_eq!(t.lambda[2][0], z[3], epsilon = 1e-11);
}

#[test]
fn stationary_start_at_aim_portfolio() {
    // Prices pinned at the cap, A = B = 0 and C Cᵀ = Σ₀: one branch never moves.
    let base = two_asset(0.02);
    let c_chol = base.sigma0.clone().cholesky().unwrap().l();
    let zero = Matrix::zeros(2, 2);
    let params = ModelParams::new(
        base.mu,
        zero.clone(),
        zero,
        c_chol,
        base.sigma0,
        Vector::from_element(2, 2.0),
    )
    .unwrap();
    let dy = clamped(params, 1e6);
    let tree = build_tree(&dy, 3, 1, 9, BUDGET).unwrap();
    let st = &tree.nodes[1].state;
    let gamma = 2.0;
    let aim = st.p.clone().lu().solve(&st.dollar_drift(&dy.params.mu)).unwrap() / gamma;
    let c = LQConfig::new(0.0, 0.01, gamma, 3, aim.clone()).unwrap();
    let sol = solve_two_step(&tree, &c, &dy.params.mu, &TwoStepOptions::default()).unwrap();
    for i in 1..tree.len() {
        assert!(max_abs_diff(&sol.trajectory.x[i], &aim) < 1e-10);
        assert!(sol.trajectory.lambda[i].amax() < 1e-14);
    }
}

/// Objective of branch-contingent trades `a[i]` (one per non-root node), with
/// its own walk over the tree.
fn value_of_actions(tree: &ScenarioTree, a: &[f64], c: &LQConfig, mu: f64) -> f64 {
    let mut x = vec![c.x0[0]; tree.len()];
    let mut v = 0.0;
    for (i, node) in tree.nodes.iter().enumerate().skip(1) {
        let st = &node.state;
        x[i] = x[node.parent.unwrap()] + a[i - 1];
        let s = st.s[0];
        let reward = s * mu * x[i]
            - 0.5 * c.epsilon * st.q * s * a[i - 1] * a[i - 1]
            - 0.5 * c.gamma * st.p[(0, 0)] * x[i] * x[i];
        v += node.prob * c.delta.powi(node.depth as i32) * reward;
    }
    v
}

#[test]
fn two_step_attains_direct_policy_optimum() {
    let dy = clamped(scalar_params(0.01, 0.8, 0.3, 0.1, 0.04, 1.0), 10.0);
    let tree = build_tree(&dy, 3, 2, 17, BUDGET).unwrap();
    assert_eq!(tree.len() - 1, 14);
    let c = LQConfig::new(0.95, 0.05, 2.0, 3, Vector::from_element(1, 0.1)).unwrap();
    let mu = dy.params.mu[0];
    let m = tree.len() - 1;
    // V is an exact quadratic in the 14 actions; recover it from unit probes.
    let f = |a: &[f64]| value_of_actions(&tree, a, &c, mu);
    let zero = vec![0.0; m];
    let unit = |i: usize, j: Option<usize>| {
        let mut a = zero.clone();
        a[i] += 1.0;
        if let Some(j) = j {
            a[j] += 1.0;
        }
        a
    };
    let f0 = f(&zero);
    let fi: Vec<f64> = (0..m).map(|i| f(&unit(i, None))).collect();
    let h = Matrix::from_fn(m, m, |i, j| f(&unit(i, Some(j))) - fi[i] - fi[j] + f0);
    let g = Vector::from_fn(m, |i, _| fi[i] - f0 - 0.5 * h[(i, i)]);
    assert!(h.clone().symmetric_eigenvalues().max() < 0.0);
    let best = h.lu().solve(&(-g)).unwrap();
    let v_max = f(best.as_slice());

    let sol = solve_two_step(&tree, &c, &dy.params.mu, &TwoStepOptions::default()).unwrap();
    let x = &sol.trajectory.x;
    let actions: Vec<f64> = (1..tree.len())
        .map(|i| x[i][0] - x[tree.nodes[i].parent.unwrap()][0])
        .collect();
    let v_solver = f(&actions);
    assert!((v_solver - v_max).abs() < 1e-8, "{v_solver} vs {v_max}");
    for (a, b) in actions.iter().zip(best.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
    let decomposition = tree_objective(&tree, x, &c, &dy.params.mu).unwrap();
    assert_relative_eq!(decomposition.value, v_solver, epsilon = 1e-12);
}

#[test]
fn residuals_vanish_at_fixed_point() {
    let dy = clamped(desk_params(2), 1e6);
    let tree = build_tree(&dy, 5, 2, 3, BUDGET).unwrap();
    let c = LQConfig::new(0.99, 0.01, 1.0, 5, Vector::from_vec(vec![1.0, -2.0])).unwrap();
    let opts = TwoStepOptions::default();
    let sol = solve_two_step(&tree, &c, &dy.params.mu, &opts).unwrap();
    assert_eq!(sol.diagnostics.stop, StopReason::Tolerance);
    let (state_res, costate_res) = optimality_residuals(&tree, &sol.trajectory, &c, &dy.params.mu);
    assert_eq!(state_res, 0.0);
    assert!(costate_res < 1e-8, "{costate_res}");
}

#[test]
fn different_initial_costates_reach_same_fixed_point() {
    let dy = clamped(desk_params(2), 1e6);
    let tree = build_tree(&dy, 5, 2, 4, BUDGET).unwrap();
    let c = cfg(0.99, 0.01, 1.0, 5, 2);
    let opts = TwoStepOptions::default();
    let a = solve_two_step(&tree, &c, &dy.params.mu, &opts).unwrap();
    let start = vec![Vector::from_vec(vec![0.5, -0.3]); tree.len()];
    let opts_b = TwoStepOptions {
        initial_lambda: Some(start),
        ..opts.clone()
    };
    let b = solve_two_step(&tree, &c, &dy.params.mu, &opts_b).unwrap();
    let tol = 10.0 * opts.outer_tol;
    for i in 1..tree.len() {
        assert!(max_abs_diff(&a.trajectory.lambda[i], &b.trajectory.lambda[i]) < tol);
    }
}

#[test]
fn divergence_guard_rejects_wrong_shapes() {
    let dy = clamped(two_asset(0.01), 10.0);
    let tree = build_tree(&dy, 2, 2, 1, BUDGET).unwrap();
    let wrong = cfg(0.9, 0.01, 1.0, 3, 2);
    assert!(matches!(
        solve_two_step(&tree, &wrong, &dy.params.mu, &TwoStepOptions::default()),
        Err(Error::Argument(_))
    ));
    assert!(LQConfig::new(1.0, 0.01, 1.0, 2, Vector::zeros(2)).is_err());
    assert!(LQConfig::new(0.5, 0.0, 1.0, 2, Vector::zeros(2)).is_err());
}

#[test]
fn damping_matches_svd_oracle() {
    let st = state2();
    let c = cfg(0.95, 0.05, 3.0, 3, 2);
    let k = c.gamma / (c.epsilon * st.q);
    let psi_inv = Matrix::from_diagonal(&st.s.map(|s| 1.0 / s));
    let m = Matrix::identity(2, 2) + &st.p * psi_inv * k;
    let inv = m.try_inverse().unwrap();
    let want = c.delta * inv.svd(false, false).singular_values.max();
    assert_relative_eq!(measure_damping([&st], &c), want, max_relative = 1e-12);
    assert_eq!(measure_damping([&st], &c.with_delta(0.0)), 0.0);
}

#[test]
fn damping_is_permutation_invariant() {
    let dy = multiplicative(desk_params(3));
    let path = simulate_path(&dy, 20, 8).unwrap();
    let c = cfg(0.99, 0.003, 0.5, 20, 3);
    let perm = [2usize, 0, 1];
    let permuted: Vec<MarketState> = path
        .states
        .iter()
        .map(|st| {
            let s = Vector::from_fn(3, |i, _| st.s[perm[i]]);
            let sigma = Matrix::from_fn(3, 3, |i, j| st.sigma[(perm[i], perm[j])]);
            MarketState::new(st.t, s, sigma, dy.chi).unwrap()
        })
        .collect();
    let a = measure_damping(&path.states, &c);
    let b = measure_damping(&permuted, &c);
    assert_relative_eq!(a, b, max_relative = 1e-10);
}

/// κ and the measured sup of ‖(I + P̃Ψ⁻¹)⁻¹‖ for clamped prices in [0.5, 2].
fn small_cost_sweep(paths: usize, horizon: usize) -> Vec<(f64, f64, f64)> {
    let params = two_asset(0.05);
    let floor = params.innovation_floor();
    let dy = clamped(params, 5.0);
    let gamma = 5.0;
    let consts = BoundConstants::new(dy.chi, 2.0, 0.5, floor, gamma, 0.0).unwrap();
    let mut out = Vec::new();
    for eps in [1e-3, 1e-2, 1e-1] {
        let Ok(bound) = small_cost_inverse_bound(&consts, eps) else {
            continue;
        };
        let c = cfg(0.99, eps, gamma, horizon, 2);
        let mut worst: f64 = 0.0;
        for seed in 0..paths as u64 {
            let path = simulate_path(&dy, horizon, 1000 + seed).unwrap();
            for st in &path.states[1..] {
                worst = worst.max(inverse_system_norm(st, &c));
            }
        }
        out.push((eps, worst, bound));
    }
    out
}

#[test]
fn small_cost_bound_holds_on_simulated_paths() {
    let rows = small_cost_sweep(100, 50);
    assert!(!rows.is_empty());
    for (eps, measured, bound) in rows {
        assert!(measured <= bound, "eps {eps}: {measured} > {bound}");
    }
}

#[test]
fn bound_constants_from_clamped_primitives() {
    let params = two_asset(0.05);
    let floor = params.innovation_floor();
    let dy = clamped(params, 5.0);
    let tree = build_tree(&dy, 3, 2, 1, BUDGET).unwrap();
    let c = cfg(0.9, 1e-3, 5.0, 3, 2);
    let damping = measure_damping(tree.states(), &c);
    let consts = BoundConstants::new(dy.chi, 2.0, 0.5, floor, 5.0, damping).unwrap();
    assert!(consts.is_consistent());
    assert_relative_eq!(consts.omega, 5.0 * 2.0 / 0.5, epsilon = 1e-12);
    assert_relative_eq!(consts.kappa, 5.0 * 2.0 / (5.0 * 0.25 * floor), max_relative = 1e-12);
    assert!(consts.delta_eps < 1.0);
}

fn certificate(delta: f64, horizon: usize) -> CertificateReport {
    let dy = clamped(desk_params(2), 1e6);
    let tree = build_tree(&dy, horizon, 2, 11, BUDGET).unwrap();
    let c = cfg(delta, 0.01, 1.0, horizon, 2);
    let damping = measure_damping(tree.states(), &c);
    let consts = BoundConstants::new(dy.chi, 2.0, 0.5, dy.params.innovation_floor(), 1.0, damping).unwrap();
    iteration_certificate(&tree, &c, &dy.params.mu, &consts, horizon + 3).unwrap()
}

#[test]
fn single_period_error_is_zero() {
    let report = certificate(0.99, 1);
    assert!(report.errors.iter().all(|&e| e == 0.0));
    assert!(report.passed());
}

#[test]
fn myopic_certificate_is_exactly_nilpotent() {
    let report = certificate(0.0, 5);
    assert!(report.passed(), "{:?}", report.failure);
    for (k, e) in report.errors.iter().enumerate().skip(4) {
        assert_eq!(*e, 0.0, "k = {}", k + 1);
    }
}

#[test]
fn discounted_certificate_reports_offending_iteration() {
    let report = certificate(0.99, 5);
    assert!(report.bound_ok);
    match &report.failure {
        None => assert!(report.passed()),
        Some(CertificateFailure::Nilpotency { k, value, limit }) => {
            assert!(*k >= 5);
            assert_eq!(*value, report.errors[k - 1]);
            assert!(value > limit);
            assert!(!report.passed());
        }
        Some(other) => panic!("unexpected failure {other:?}"),
    }
    // The error sequence still contracts.
    let e = &report.errors;
    assert!(e[e.len() - 1] < 1e-3 * e[0]);
}

fn spd(n: usize, entries: &[f64], shift: f64) -> Matrix {
    let l = Matrix::from_fn(n, n, |i, j| entries[i * n + j]);
    &l * l.transpose() + Matrix::identity(n, n) * shift
}

fn inv_norm(m: &Matrix) -> f64 {
    1.0 / m.clone().svd(false, false).singular_values.min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sum_of_spd_has_smaller_inverse(
        a in prop::collection::vec(-2.0f64..2.0, 9),
        b in prop::collection::vec(-2.0f64..2.0, 9),
        sa in 1e-3f64..1.0,
        sb in 1e-3f64..1.0,
    ) {
        let ma = spd(3, &a, sa);
        let mb = spd(3, &b, sb);
        let lhs = inv_norm(&(&ma + &mb));
        let rhs = inv_norm(&ma).min(inv_norm(&mb));
        prop_assert!(lhs <= rhs * (1.0 + 1e-10), "{lhs} > {rhs}");
    }
}
