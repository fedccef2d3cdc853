mod common;

use approx::assert_relative_eq;
use chrono::{Datelike, NaiveDate, Weekday};
use common::*;
use lqport::backtest::*;
use lqport::expansion::{aim_portfolio, DriftConvention};
use lqport::fixedpoint::LQConfig;
use lqport::mgarch::{replay_path, simulate_path, ModelParams};
use lqport::neural::{layer_sizes, CorrectionNet, Mlp};
use lqport::{Error, Matrix, Vector};
use proptest::prelude::*;

#[test]
fn scalar_two_step_backtest_by_hand() {
    let dy = multiplicative(scalar_params(0.01, 0.8, 0.3, 0.1, 0.04, 10.0));
    let shocks = vec![Vector::from_element(1, 0.09), Vector::from_element(1, -0.06)];
    let path = replay_path(&dy, &shocks, 0).unwrap();
    let c = LQConfig::new(0.9, 0.02, 1.5, 2, Vector::from_element(1, 1.0)).unwrap();
    let given = vec![Vector::from_element(1, 3.0), Vector::from_element(1, 2.0)];
    let rep = run_backtest(&Policy::Given(given), &path, &c, &dy.params.mu, 100.0).unwrap();

    let s: Vec<f64> = path.states.iter().map(|st| st.s[0]).collect();
    let q: Vec<f64> = path.states.iter().map(|st| st.q).collect();
    let p: Vec<f64> = path.states.iter().map(|st| st.p[(0, 0)]).collect();
    assert_relative_eq!(s[1], 11.0, epsilon = 1e-12);
    assert_relative_eq!(s[2], 11.0 * 0.95, epsilon = 1e-12);
    let x = [1.0, 3.0, 2.0];
    let a = [2.0, -1.0];
    let cost1 = 0.5 * c.epsilon * q[1] * a[0] * a[0] * s[1];
    let cost2 = 0.5 * c.epsilon * q[2] * a[1] * a[1] * s[2];
    let w1 = 100.0 + x[0] * (s[1] - s[0]) - cost1;
    let w2 = w1 + x[1] * (s[2] - s[1]) - cost2;
    assert_relative_eq!(rep.steps[1].wealth, w1, epsilon = 1e-12);
    assert_relative_eq!(rep.final_wealth, w2, epsilon = 1e-12);
    // Invested: X₀·S₀, then the previous trade at its own price.
    let inv = [x[0] * s[0], x[0] * s[0], x[0] * s[0] + a[0] * s[1]];
    for (step, want) in rep.steps.iter().zip(inv) {
        assert_relative_eq!(step.invested, want, epsilon = 1e-12);
    }
    let mu = 0.01;
    let ret = 0.9 * s[1] * mu * x[1] + 0.81 * s[2] * mu * x[2];
    let cost = 0.9 * cost1 + 0.81 * cost2;
    let risk = 0.9 * 0.5 * c.gamma * p[1] * x[1] * x[1] + 0.81 * 0.5 * c.gamma * p[2] * x[2] * x[2];
    let d = rep.decomposition;
    assert_relative_eq!(d.total_return, ret, epsilon = 1e-12);
    assert_relative_eq!(d.total_cost, cost, epsilon = 1e-12);
    assert_relative_eq!(d.total_risk, risk, epsilon = 1e-12);
    assert_relative_eq!(d.value, ret - cost - risk, epsilon = 1e-12);
    assert_eq!(rep.steps[2].cost, cost2);
    assert_eq!(rep.label, "given");
}

#[test]
fn empty_portfolio_has_zero_objective() {
    let dy = multiplicative(desk_params(2));
    let path = simulate_path(&dy, 5, 1).unwrap();
    let c = cfg(0.99, 0.01, 1.0, 5, 2);
    let rep = run_backtest(
        &Policy::Given(vec![Vector::zeros(2); 5]),
        &path,
        &c,
        &dy.params.mu,
        100.0,
    )
    .unwrap();
    assert_eq!(rep.decomposition, Decomposition::default());
    assert!(rep.wealth().iter().all(|w| *w == 100.0));
}

#[test]
fn one_period_decomposition_by_hand() {
    let dy = multiplicative(desk_params(2));
    let path = simulate_path(&dy, 1, 3).unwrap();
    let c = LQConfig::new(0.8, 0.01, 2.0, 1, Vector::from_vec(vec![1.0, 0.0])).unwrap();
    let x1 = Vector::from_vec(vec![0.5, 2.0]);
    let d = objective_decomposition(&path.states, &[c.x0.clone(), x1.clone()], &c, &dy.params.mu).unwrap();
    let st = &path.states[1];
    let a = &x1 - &c.x0;
    let mut ret = 0.0;
    let mut cost = 0.0;
    for i in 0..2 {
        ret += dy.params.mu[i] * st.s[i] * x1[i];
        cost += 0.5 * c.epsilon * st.q * a[i] * a[i] * st.s[i];
    }
    let mut risk = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            risk += 0.5 * c.gamma * x1[i] * st.p[(i, j)] * x1[j];
        }
    }
    assert_relative_eq!(d.total_return, 0.8 * ret, max_relative = 1e-12);
    assert_relative_eq!(d.total_cost, 0.8 * cost, max_relative = 1e-12);
    assert_relative_eq!(d.total_risk, 0.8 * risk, max_relative = 1e-12);
}

#[test]
fn discounting_keeps_only_leading_term_in_the_limit() {
    let dy = multiplicative(desk_params(2));
    let path = simulate_path(&dy, 6, 4).unwrap();
    let holdings: Vec<Vector> = (0..=6).map(|t| Vector::from_vec(vec![0.2 * t as f64, -0.1])).collect();
    let c = cfg(0.0, 0.01, 1.0, 6, 2);
    let v = |delta: f64| {
        objective_decomposition(&path.states, &holdings, &c.with_delta(delta), &dy.params.mu)
            .unwrap()
            .value
    };
    // Summation from t = 1 with weight δᵗ: nothing survives at δ = 0, and V/δ
    // tends to the t = 1 reward alone.
    assert_eq!(v(0.0), 0.0);
    let first = objective_decomposition(&path.states[..2], &holdings[..2], &c.with_delta(1e-9), &dy.params.mu)
        .unwrap()
        .value;
    assert_relative_eq!(v(1e-9) / 1e-9, first / 1e-9, max_relative = 1e-6);
}

#[test]
fn myopic_from_aim_with_flat_market_never_trades() {
    // A = B = 0 and C Cᵀ = Σ₀ freeze the covariance; shocks of −μ freeze prices.
    let base = desk_params(2);
    let chol = base.sigma0.clone().cholesky().unwrap().l();
    let zero = Matrix::zeros(2, 2);
    let params = ModelParams::new(base.mu.clone(), zero.clone(), zero, chol, base.sigma0, base.s0.clone()).unwrap();
    let dy = multiplicative(params);
    let path = replay_path(&dy, &vec![-base.mu.clone(); 20], 0).unwrap();
    let c0 = cfg(0.99, 0.01, 0.5, 20, 2);
    let aim = aim_portfolio(&path.states[1], &c0, &base.mu, DriftConvention::Dollar).unwrap();
    let c = LQConfig { x0: aim.clone(), ..c0 };
    let rep = run_backtest(&Policy::Myopic(DriftConvention::Dollar), &path, &c, &base.mu, 100.0).unwrap();
    for a in rep.trades() {
        assert!(a.amax() < 1e-12);
    }
    assert_relative_eq!(rep.final_wealth, 100.0, epsilon = 1e-9);
}

#[test]
fn zero_network_reproduces_myopic_report() {
    let dy = multiplicative(desk_params(3));
    let path = simulate_path(&dy, 40, 8).unwrap();
    let c = cfg(0.99, 0.003, 0.5, 40, 3);
    let zero = CorrectionNet::plain(Mlp::zeros(&layer_sizes(3, 8, 2)).unwrap(), 0);
    let nn = run_backtest(&Policy::ExpansionNn(&zero), &path, &c, &dy.params.mu, 100.0).unwrap();
    let my = run_backtest(
        &Policy::Myopic(DriftConvention::Dollar),
        &path,
        &c,
        &dy.params.mu,
        100.0,
    )
    .unwrap();
    for (a, b) in nn.steps.iter().zip(&my.steps) {
        assert_relative_eq!(a.wealth, b.wealth, epsilon = 1e-9);
        for (x, y) in a.holdings.iter().zip(&b.holdings) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_relative_eq!(nn.decomposition.value, my.decomposition.value, max_relative = 1e-9);
}

#[test]
fn accounting_depends_only_on_trades() {
    let dy = multiplicative(desk_params(2));
    let path = simulate_path(&dy, 25, 12).unwrap();
    let c = cfg(0.99, 0.01, 1.0, 25, 2);
    let my = run_backtest(
        &Policy::Myopic(DriftConvention::Dollar),
        &path,
        &c,
        &dy.params.mu,
        100.0,
    )
    .unwrap();
    let given = Policy::Given(my.holdings()[1..].to_vec());
    let again = run_backtest(&given, &path, &c, &dy.params.mu, 100.0).unwrap();
    assert_eq!(again.steps, my.steps);
    assert_eq!(again.decomposition, my.decomposition);
    assert!(run_backtest(
        &Policy::Given(vec![Vector::zeros(2); 3]),
        &path,
        &c,
        &dy.params.mu,
        100.0
    )
    .is_err());
}

fn fake_report(label: &str, final_wealth: f64, fingerprint: u64) -> BacktestReport {
    BacktestReport {
        label: label.into(),
        steps: Vec::new(),
        decomposition: Decomposition::default(),
        initial_wealth: 100.0,
        final_wealth,
        path_fingerprint: fingerprint,
    }
}

#[test]
fn comparison_ratios() {
    let dy = multiplicative(desk_params(2));
    let path = simulate_path(&dy, 10, 2).unwrap();
    let c = cfg(0.99, 0.01, 1.0, 10, 2);
    let a = run_backtest(
        &Policy::Myopic(DriftConvention::Dollar),
        &path,
        &c,
        &dy.params.mu,
        100.0,
    )
    .unwrap();
    let cmp = compare_policies(&[a.clone(), a.clone()]).unwrap();
    assert_eq!(cmp.ratios[0].ratio, 1.0);

    let cmp = compare_policies(&[fake_report("a", 110.0, 1), fake_report("b", 100.0, 1)]).unwrap();
    assert_relative_eq!(cmp.ratios[0].ratio, 1.1, epsilon = 1e-15);
    assert_relative_eq!(cmp.rows[0].return_pct, 10.0, epsilon = 1e-12);
    assert_relative_eq!(annualize_linear(cmp.rows[0].return_pct, 126), 20.0, epsilon = 1e-12);

    let other = simulate_path(&dy, 10, 3).unwrap();
    let b = run_backtest(&Policy::ExpansionZeroth, &other, &c, &dy.params.mu, 100.0).unwrap();
    assert!(matches!(compare_policies(&[a, b]), Err(Error::Argument(_))));
}

fn weekdays(from: (i32, u32, u32), to: (i32, u32, u32)) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(from.0, from.1, from.2).unwrap();
    let end = NaiveDate::from_ymd_opt(to.0, to.1, to.2).unwrap();
    start
        .iter_days()
        .take_while(|d| *d <= end)
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .collect()
}

#[test]
fn decade_of_trading_days_gives_ten_folds() {
    let dates = weekdays((2010, 1, 4), (2019, 12, 31));
    let folds = make_folds(&dates, FoldWindow::default()).unwrap();
    assert_eq!(folds.len(), 10);
    for (k, f) in folds.iter().enumerate() {
        assert!(f.train_end <= f.test_start);
        assert!(f.train_start < f.train_end && f.test_start < f.test_end);
        let (tr, te) = (f.train_indices(&dates), f.test_indices(&dates));
        assert!(tr.end <= te.start);
        assert!(!te.is_empty());
        if k > 0 {
            assert_eq!(
                f.train_start,
                folds[k - 1]
                    .train_start
                    .checked_add_months(chrono::Months::new(6))
                    .unwrap()
            );
        }
    }
    assert_eq!(folds[9].test_end, NaiveDate::from_ymd_opt(2020, 1, 1).unwrap());
}

#[test]
fn fold_edge_cases() {
    let dates = weekdays((2010, 1, 4), (2014, 12, 31));
    let err = make_folds(&dates, FoldWindow::default()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    let obs = FoldWindow::Observations {
        train: 100,
        test: 20,
        stride: dates.len(),
    };
    assert_eq!(make_folds(&dates, obs).unwrap().len(), 1);
    let rolling = FoldWindow::Observations {
        train: 100,
        test: 20,
        stride: 20,
    };
    for f in make_folds(&dates, rolling).unwrap() {
        let (tr, te) = (f.train_indices(&dates), f.test_indices(&dates));
        assert_eq!((tr.len(), te.len()), (100, 20));
        assert_eq!(tr.end, te.start);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_identity_and_nonnegative_cost(
        seed in 0u64..10_000,
        h in prop::collection::vec(-5.0f64..5.0, 20),
        delta in 0.0f64..0.999,
    ) {
        let dy = multiplicative(desk_params(2));
        let path = simulate_path(&dy, 10, seed).unwrap();
        let c = cfg(delta, 0.01, 1.0, 10, 2);
        let given: Vec<Vector> = h.chunks(2).map(|v| Vector::from_vec(v.to_vec())).collect();
        let rep = run_backtest(&Policy::Given(given), &path, &c, &dy.params.mu, 100.0).unwrap();
        let d = rep.decomposition;
        prop_assert_eq!(d.value, d.total_return - d.total_cost - d.total_risk);
        prop_assert!(rep.steps.iter().all(|s| s.cost >= 0.0 && s.risk >= 0.0));
        prop_assert!(d.total_cost >= 0.0);
    }
}
