//! Small-cost expansion of the costate, λ = ε(λ̃⁰ + ε λ̃¹ + …), the myopic
//! baseline, and the accuracy measurement of the truncated expansion.

use crate::fixedpoint::{self, LQConfig, TwoStepOptions};
use crate::linalg::{self, Factorized};
use crate::mgarch::MarketState;
use crate::tree::ScenarioTree;
use crate::{Error, Matrix, Result, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    /// Keeps ε inside the inverted operator.
    #[default]
    Stabilized,
    /// Drops ε from the base term.
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DriftConvention {
    /// Drift enters as Ψμ.
    #[default]
    Dollar,
    /// Drift enters as μ.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionTerms {
    pub lambda0: Vector,
    pub lambda1: Vector,
    pub variant: Variant,
}

/// (γ/q) P Ψ⁻¹.
fn scaled_risk(state: &MarketState, cfg: &LQConfig) -> Matrix {
    let n = state.n();
    let k = cfg.gamma / state.q;
    Matrix::from_fn(n, n, |i, j| k * state.p[(i, j)] / state.s[j])
}

/// ε I + (γ/q) P Ψ⁻¹.
pub fn expansion_matrix(state: &MarketState, cfg: &LQConfig) -> Matrix {
    let mut m = scaled_risk(state, cfg);
    for i in 0..m.nrows() {
        m[(i, i)] += cfg.epsilon;
    }
    m
}

/// Ψμ − γ P X_{t−1}.
fn trading_signal(x_prev: &Vector, state: &MarketState, cfg: &LQConfig, mu: &Vector) -> Vector {
    state.dollar_drift(mu) - &state.p * x_prev * cfg.gamma
}

pub fn lambda0(x_prev: &Vector, state: &MarketState, cfg: &LQConfig, mu: &Vector, variant: Variant) -> Result<Vector> {
    match variant {
        // (εI + (γ/q)PΨ⁻¹)⁻¹ = (I + P̃Ψ⁻¹)⁻¹/ε; sharing the costate operator keeps
        // the δ = 0 expansion bit-identical to the exact costate.
        Variant::Stabilized => {
            let zero = Vector::zeros(x_prev.len());
            Ok(fixedpoint::backward_costate_step(&zero, x_prev, state, &cfg.with_delta(0.0), mu)? / cfg.epsilon)
        }
        Variant::Naive => Ok(-linalg::solve(
            &scaled_risk(state, cfg),
            &trading_signal(x_prev, state, cfg, mu),
        )?),
    }
}

/// First-order term from an expected next-period base term:
/// δ (εI + (γ/q)PΨ⁻¹)⁻¹ E_t λ̃⁰_{t+1}. The naive variant inverts (γ/q)PΨ⁻¹
/// alone and adds ((γ/q)PΨ⁻¹)⁻² (Ψμ − γPX_{t−1}).
pub fn lambda1_from_expectation(
    expected_next: &Vector,
    x_prev: &Vector,
    state: &MarketState,
    cfg: &LQConfig,
    mu: &Vector,
    variant: Variant,
) -> Result<Vector> {
    match variant {
        Variant::Stabilized => Ok(linalg::solve(&expansion_matrix(state, cfg), expected_next)? * cfg.delta),
        Variant::Naive => {
            let f = Factorized::new(&scaled_risk(state, cfg))?;
            let signal = trading_signal(x_prev, state, cfg, mu);
            let twice = f.solve(&f.solve(&signal)?)?;
            Ok(f.solve(expected_next)? * cfg.delta + twice)
        }
    }
}

/// Base and first-order terms at tree node `idx`. `x_prev` is X_{t−1} at the
/// node and `x_now` the holdings X_t from which the children's base terms are
/// evaluated.
pub fn lambda1_oracle(
    tree: &ScenarioTree,
    idx: usize,
    x_prev: &Vector,
    x_now: &Vector,
    cfg: &LQConfig,
    mu: &Vector,
    variant: Variant,
) -> Result<ExpansionTerms> {
    let node = &tree.nodes[idx];
    let l0 = lambda0(x_prev, &node.state, cfg, mu, variant)?;
    if node.depth == 0 {
        return Err(Error::arg("the root carries no decision"));
    }
    if node.depth >= tree.horizon {
        return Ok(ExpansionTerms {
            lambda1: Vector::zeros(l0.len()),
            lambda0: l0,
            variant,
        });
    }
    if node.children.is_empty() {
        return Err(Error::arg(format!(
            "node {idx} at depth {} has no children before the horizon",
            node.depth
        )));
    }
    let mut expected = Vector::zeros(l0.len());
    for c in node.children.clone() {
        expected += lambda0(x_now, &tree.nodes[c].state, cfg, mu, variant)?;
    }
    expected /= node.children.len() as f64;
    let l1 = lambda1_from_expectation(&expected, x_prev, &node.state, cfg, mu, variant)?;
    Ok(ExpansionTerms {
        lambda0: l0,
        lambda1: l1,
        variant,
    })
}

/// X_t = X_{t−1} − Ψ⁻¹ (λ̃⁰ + ε λ̃¹) / q.
pub fn expansion_state_step(
    x_prev: &Vector,
    lambda0: &Vector,
    lambda1: &Vector,
    state: &MarketState,
    cfg: &LQConfig,
) -> Vector {
    let total = lambda0 + lambda1 * cfg.epsilon;
    x_prev - total.component_div(&state.s) / state.q
}

/// One-period-ahead optimal trade:
/// X_t = X_{t−1} + Ψ⁻¹ (I + P̃Ψ⁻¹)⁻¹ (m − γ P X_{t−1}) / (ε q).
pub fn myopic_step(
    x_prev: &Vector,
    state: &MarketState,
    cfg: &LQConfig,
    mu: &Vector,
    convention: DriftConvention,
) -> Result<Vector> {
    let m = match convention {
        DriftConvention::Dollar => state.dollar_drift(mu),
        DriftConvention::Literal => mu.clone(),
    };
    let rhs = m - &state.p * x_prev * cfg.gamma;
    let y = linalg::solve(&fixedpoint::system_matrix(state, cfg), &rhs)?;
    Ok(x_prev + y.component_div(&state.s) / (cfg.epsilon * state.q))
}

/// Holdings at which the myopic trade vanishes under the given convention.
pub fn aim_portfolio(state: &MarketState, cfg: &LQConfig, mu: &Vector, convention: DriftConvention) -> Result<Vector> {
    let m = match convention {
        DriftConvention::Dollar => state.dollar_drift(mu),
        DriftConvention::Literal => mu.clone(),
    };
    Ok(linalg::solve(&state.p, &m)? / cfg.gamma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub epsilon: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionErrorTable {
    pub rows: Vec<ErrorRow>,
    /// Least-squares slope of log(error) against log(ε); `None` when some error
    /// is zero.
    pub slope: Option<f64>,
}

/// Error of the truncated stabilized expansion against the rescaled exact
/// costate along the exact optimal holdings, for each ε of the grid.
pub fn expansion_error_table(
    tree: &ScenarioTree,
    cfg: &LQConfig,
    mu: &Vector,
    eps_grid: &[f64],
) -> Result<ExpansionErrorTable> {
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let c = cfg.with_epsilon(eps);
        let opts = TwoStepOptions {
            outer_tol: 0.0,
            inner_tol: 1e-14,
            max_outer: 300,
            ..TwoStepOptions::default()
        };
        let sol = fixedpoint::solve_two_step(tree, &c, mu, &opts)?;
        let traj = &sol.trajectory;
        let mut per_node = vec![0.0; tree.len()];
        for (i, node) in tree.nodes.iter().enumerate().skip(1) {
            let parent = node.parent.unwrap();
            let terms = lambda1_oracle(tree, i, &traj.x[parent], &traj.x[i], &c, mu, Variant::Stabilized)?;
            let approx = &terms.lambda0 + &terms.lambda1 * eps;
            per_node[i] = (approx - &traj.lambda[i] / eps).norm();
        }
        let error = (1..=tree.horizon)
            .map(|d| tree.level_mean(d, |i| per_node[i]))
            .fold(0.0, f64::max);
        rows.push(ErrorRow { epsilon: eps, error });
    }
    let slope = log_log_slope(&rows);
    Ok(ExpansionErrorTable { rows, slope })
}

fn log_log_slope(rows: &[ErrorRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| !(r.error > 0.0)) {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.epsilon.ln(), r.error.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}
