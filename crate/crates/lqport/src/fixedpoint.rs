//! Forward-backward optimality system for the holdings and the costate, solved
//! on a scenario tree by the two-step fixed-point scheme, plus the diagnostics
//! behind the convergence guarantees (damping constant, small-cost bound, and
//! the nilpotent error certificate).

use rayon::prelude::*;

use crate::linalg::{self, Factorized};
use crate::mgarch::MarketState;
use crate::tree::ScenarioTree;
use crate::{Error, Matrix, Result, Vector};

/// Preferences and horizon of the control problem.
#[derive(Clone, Debug, PartialEq)]
pub struct LQConfig {
    /// Discount factor in [0, 1).
    pub delta: f64,
    /// Transaction-cost scale.
    pub epsilon: f64,
    /// Risk aversion.
    pub gamma: f64,
    pub horizon: usize,
    /// Initial holdings.
    pub x0: Vector,
}

impl LQConfig {
    pub fn new(delta: f64, epsilon: f64, gamma: f64, horizon: usize, x0: Vector) -> Result<Self> {
        let cfg = LQConfig {
            delta,
            epsilon,
            gamma,
            horizon,
            x0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::arg(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::arg(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::arg(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::arg("horizon must be at least 1"));
        }
        Ok(())
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        LQConfig {
            epsilon,
            ..self.clone()
        }
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        LQConfig { delta, ..self.clone() }
    }
}

/// I + P̃ Ψ⁻¹ with P̃ = γ/(ε q) P.
pub fn system_matrix(state: &MarketState, cfg: &LQConfig) -> Matrix {
    let n = state.n();
    let k = cfg.gamma / (cfg.epsilon * state.q);
    Matrix::from_fn(n, n, |i, j| {
        let v = k * state.p[(i, j)] / state.s[j];
        if i == j {
            1.0 + v
        } else {
            v
        }
    })
}

/// X_t = X_{t-1} − Ψ⁻¹ λ_t / (ε q).
pub fn forward_state_step(x_prev: &Vector, lambda: &Vector, state: &MarketState, cfg: &LQConfig) -> Vector {
    let k = 1.0 / (cfg.epsilon * state.q);
    x_prev - lambda.component_div(&state.s) * k
}

/// λ_t = (I + P̃Ψ⁻¹)⁻¹ (δ E_t λ_{t+1} − Ψμ + γ P X_{t-1}).
pub fn backward_costate_step(
    expected_next: &Vector,
    x_prev: &Vector,
    state: &MarketState,
    cfg: &LQConfig,
    mu: &Vector,
) -> Result<Vector> {
    let rhs = expected_next * cfg.delta - state.dollar_drift(mu) + &state.p * x_prev * cfg.gamma;
    linalg::solve(&system_matrix(state, cfg), &rhs)
}

/// Costate and holdings indexed by tree node. The root carries X₀ and a zero
/// costate; beyond the leaves the costate is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CostateTrajectory {
    pub lambda: Vec<Vector>,
    pub x: Vec<Vector>,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerSolution {
    pub lambda: Vec<Vector>,
    pub iterations: usize,
}

/// Per-node factorizations reused across iterations.
pub struct TreeSystem<'a> {
    tree: &'a ScenarioTree,
    cfg: LQConfig,
    lu: Vec<Option<Factorized>>,
    drift: Vec<Vector>,
}

impl<'a> TreeSystem<'a> {
    pub fn new(tree: &'a ScenarioTree, cfg: &LQConfig, mu: &Vector) -> Result<Self> {
        cfg.validate()?;
        if cfg.horizon != tree.horizon {
            return Err(Error::arg(format!(
                "config horizon {} differs from tree depth {}",
                cfg.horizon, tree.horizon
            )));
        }
        if cfg.x0.len() != tree.n() || mu.len() != tree.n() {
            return Err(Error::arg("x0 or mu has the wrong dimension"));
        }
        let lu = tree
            .nodes
            .par_iter()
            .map(|node| {
                if node.depth == 0 {
                    Ok(None)
                } else {
                    Factorized::new(&system_matrix(&node.state, cfg)).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let drift = tree.nodes.iter().map(|n| n.state.dollar_drift(mu)).collect();
        Ok(TreeSystem {
            tree,
            cfg: cfg.clone(),
            lu,
            drift,
        })
    }

    pub fn tree(&self) -> &ScenarioTree {
        self.tree
    }

    /// Holdings generated from a costate by the forward step.
    pub fn forward(&self, lambda: &[Vector]) -> Vec<Vector> {
        let tree = self.tree;
        let mut x = vec![Vector::zeros(0); tree.len()];
        x[0] = self.cfg.x0.clone();
        for depth in 1..=tree.horizon {
            for i in tree.level(depth) {
                let parent = tree.nodes[i].parent.unwrap();
                x[i] = forward_state_step(&x[parent], &lambda[i], &tree.nodes[i].state, &self.cfg);
            }
        }
        x
    }

    /// One backward-in-time sweep of the costate update with fixed holdings.
    /// Depth t uses the values just computed at depth t+1.
    fn sweep(&self, base: &[Vector], lambda: &mut [Vector]) -> Result<f64> {
        let tree = self.tree;
        let mut change: f64 = 0.0;
        for depth in (1..=tree.horizon).rev() {
            let range = tree.level(depth);
            let updated = range
                .clone()
                .into_par_iter()
                .map(|i| {
                    let mut rhs = base[i].clone();
                    if depth < tree.horizon && self.cfg.delta != 0.0 {
                        rhs += tree.child_mean(i, lambda) * self.cfg.delta;
                    }
                    self.lu[i].as_ref().unwrap().solve(&rhs)
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, v) in range.zip(updated) {
                change = change.max((&v - &lambda[i]).amax());
                lambda[i] = v;
            }
        }
        Ok(change)
    }

    /// Costate fixed point for fixed holdings `x` (`x[parent]` is X_{t-1}).
    pub fn inner(&self, x: &[Vector], init: Option<&[Vector]>, tol: f64, max_iter: usize) -> Result<InnerSolution> {
        let tree = self.tree;
        let n = tree.n();
        let base: Vec<Vector> = (0..tree.len())
            .map(|i| match tree.nodes[i].parent {
                None => Vector::zeros(n),
                Some(p) => &tree.nodes[i].state.p * &x[p] * self.cfg.gamma - &self.drift[i],
            })
            .collect();
        let mut lambda: Vec<Vector> = match init {
            Some(l) => l.to_vec(),
            None => vec![Vector::zeros(n); tree.len()],
        };
        lambda[0] = Vector::zeros(n);
        // The first sweep produces iterate 1; every later sweep both measures the
        // residual of the current iterate and advances it.
        self.sweep(&base, &mut lambda)?;
        let mut iterations = 1;
        loop {
            let change = self.sweep(&base, &mut lambda)?;
            if !change.is_finite() {
                return Err(Error::Divergence {
                    message: "inner costate iteration produced non-finite values".into(),
                    trace: vec![change],
                    damping: Some(measure_damping(tree.states(), &self.cfg)),
                });
            }
            if change < tol {
                return Ok(InnerSolution { lambda, iterations });
            }
            iterations += 1;
            if iterations >= max_iter {
                let damping = measure_damping(tree.states(), &self.cfg);
                return Err(Error::Divergence {
                    message: format!("inner iteration reached {max_iter} sweeps (damping constant {damping:.6})"),
                    trace: vec![change],
                    damping: Some(damping),
                });
            }
        }
    }

    /// Per-depth expected norm of `a − b`, depths 1..=T.
    pub fn level_errors(&self, a: &[Vector], b: &[Vector]) -> Vec<f64> {
        let tree = self.tree;
        (1..=tree.horizon)
            .map(|d| tree.level_mean(d, |i| (&a[i] - &b[i]).norm()))
            .collect()
    }
}

/// Costate fixed point on a tree for a given holdings assignment.
pub fn inner_fixed_point(
    tree: &ScenarioTree,
    x: &[Vector],
    cfg: &LQConfig,
    mu: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<InnerSolution> {
    TreeSystem::new(tree, cfg, mu)?.inner(x, None, tol, max_iter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Tolerance,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct TwoStepOptions {
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Refuse to start when the measured damping constant is not below one.
    pub enforce_damping: bool,
    /// Starting costate; by default the costate of the no-trade holdings path.
    pub initial_lambda: Option<Vec<Vector>>,
}

impl Default for TwoStepOptions {
    fn default() -> Self {
        TwoStepOptions {
            outer_tol: 1e-8,
            inner_tol: 1e-10,
            max_outer: 200,
            max_inner: 1000,
            enforce_damping: true,
            initial_lambda: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStepDiagnostics {
    /// E^(k) = sup_t E‖λ^(k) − λ^(k−1)‖ for k = 1, 2, ...
    pub errors: Vec<f64>,
    /// The per-depth terms behind each entry of `errors`.
    pub level_errors: Vec<Vec<f64>>,
    pub inner_iterations: Vec<usize>,
    pub stop: StopReason,
    pub damping: f64,
    /// sup_t E‖λ^(0)‖, a magnitude reference for the error sequence.
    pub initial_scale: f64,
}

#[derive(Clone, Debug)]
pub struct TwoStepSolution {
    pub trajectory: CostateTrajectory,
    pub diagnostics: TwoStepDiagnostics,
}

/// Alternate the forward holdings pass and the inner costate fixed point until
/// the costate stops moving.
pub fn solve_two_step(
    tree: &ScenarioTree,
    cfg: &LQConfig,
    mu: &Vector,
    opts: &TwoStepOptions,
) -> Result<TwoStepSolution> {
    let system = TreeSystem::new(tree, cfg, mu)?;
    let damping = measure_damping(tree.states(), cfg);
    if opts.enforce_damping && damping >= 1.0 {
        return Err(Error::Precondition(format!(
            "damping constant {damping} is not below 1"
        )));
    }
    let n = tree.n();
    let mut lambda = match &opts.initial_lambda {
        Some(l) => {
            if l.len() != tree.len() {
                return Err(Error::arg("initial costate does not match the tree"));
            }
            l.clone()
        }
        None => {
            let flat = vec![cfg.x0.clone(); tree.len()];
            system.inner(&flat, None, opts.inner_tol, opts.max_inner)?.lambda
        }
    };
    let zero = vec![Vector::zeros(n); tree.len()];
    let initial_scale = system.level_errors(&lambda, &zero).into_iter().fold(0.0, f64::max);
    let mut errors = Vec::new();
    let mut level_errors = Vec::new();
    let mut inner_iterations = Vec::new();
    let mut stop = StopReason::MaxIterations;
    for _ in 0..opts.max_outer {
        let x = system.forward(&lambda);
        let inner = system.inner(&x, Some(&lambda), opts.inner_tol, opts.max_inner)?;
        let levels = system.level_errors(&inner.lambda, &lambda);
        let e = levels.iter().copied().fold(0.0, f64::max);
        lambda = inner.lambda;
        errors.push(e);
        level_errors.push(levels);
        inner_iterations.push(inner.iterations);
        let first = errors[0].max(initial_scale).max(1.0);
        if !e.is_finite() || e > 1e50 * first {
            return Err(Error::Divergence {
                message: format!("two-step iteration diverged at k = {}", errors.len()),
                trace: errors,
                damping: Some(damping),
            });
        }
        if e < opts.outer_tol || e == 0.0 {
            stop = StopReason::Tolerance;
            break;
        }
    }
    let x = system.forward(&lambda);
    let iteration = errors.len();
    Ok(TwoStepSolution {
        trajectory: CostateTrajectory { lambda, x, iteration },
        diagnostics: TwoStepDiagnostics {
            errors,
            level_errors,
            inner_iterations,
            stop,
            damping,
            initial_scale,
        },
    })
}

/// Largest violations of the holdings equation and of the costate equation
/// λ_t = δ E_t λ_{t+1} − Ψμ + γ P X_t over all decision nodes.
pub fn optimality_residuals(tree: &ScenarioTree, traj: &CostateTrajectory, cfg: &LQConfig, mu: &Vector) -> (f64, f64) {
    let mut state_res: f64 = 0.0;
    let mut costate_res: f64 = 0.0;
    for (i, node) in tree.nodes.iter().enumerate().skip(1) {
        let parent = node.parent.unwrap();
        let x = forward_state_step(&traj.x[parent], &traj.lambda[i], &node.state, cfg);
        state_res = state_res.max((&x - &traj.x[i]).amax());
        let mut rhs = &node.state.p * &traj.x[i] * cfg.gamma - node.state.dollar_drift(mu);
        if node.depth < tree.horizon {
            rhs += tree.child_mean(i, &traj.lambda) * cfg.delta;
        }
        costate_res = costate_res.max((&rhs - &traj.lambda[i]).amax());
    }
    (state_res, costate_res)
}

/// sup over states of δ ‖(I + P̃Ψ⁻¹)⁻¹‖₂.
pub fn measure_damping<'s>(states: impl IntoIterator<Item = &'s MarketState>, cfg: &LQConfig) -> f64 {
    if cfg.delta == 0.0 {
        return 0.0;
    }
    states
        .into_iter()
        .map(|s| cfg.delta * inverse_system_norm(s, cfg))
        .fold(0.0, f64::max)
}

/// ‖(I + P̃Ψ⁻¹)⁻¹‖₂ at one state.
pub fn inverse_system_norm(state: &MarketState, cfg: &LQConfig) -> f64 {
    let lo = linalg::singular_values(&system_matrix(state, cfg)).min();
    if lo > 0.0 {
        1.0 / lo
    } else {
        f64::INFINITY
    }
}

/// Primitive constants of the convergence bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundConstants {
    pub chi: f64,
    pub h_inf: f64,
    pub s_floor: f64,
    /// Smallest eigenvalue of C Cᵀ.
    pub c: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub delta_eps: f64,
    pub omega: f64,
}

impl BoundConstants {
    pub fn new(chi: f64, h_inf: f64, s_floor: f64, c: f64, gamma: f64, delta_eps: f64) -> Result<Self> {
        if !(chi >= 1.0 && h_inf > 0.0 && s_floor > 0.0 && c > 0.0 && gamma > 0.0) {
            return Err(Error::arg("bound constants must be positive (and chi >= 1)"));
        }
        Ok(BoundConstants {
            chi,
            h_inf,
            s_floor,
            c,
            gamma,
            kappa: chi * h_inf / (gamma * s_floor * s_floor * c),
            delta_eps,
            omega: chi * h_inf / s_floor,
        })
    }

    /// True when the stored derived constants match a fresh recomputation.
    pub fn is_consistent(&self) -> bool {
        let kappa = self.chi * self.h_inf / (self.gamma * self.s_floor * self.s_floor * self.c);
        let omega = self.chi * self.h_inf / self.s_floor;
        (kappa - self.kappa).abs() <= 1e-12 * kappa.abs() && (omega - self.omega).abs() <= 1e-12 * omega.abs()
    }
}

/// εκ / (1 − ε²κ²), valid when εκ < 1.
pub fn small_cost_inverse_bound(consts: &BoundConstants, epsilon: f64) -> Result<f64> {
    let ek = epsilon * consts.kappa;
    if !(ek < 1.0) {
        return Err(Error::Precondition(format!(
            "small-cost hypothesis eps*chi*h_inf < gamma*s_floor^2*c fails: {:e} >= {:e}",
            epsilon * consts.chi * consts.h_inf,
            consts.gamma * consts.s_floor * consts.s_floor * consts.c
        )));
    }
    Ok(ek / (1.0 - ek * ek))
}

#[derive(Clone, Debug, PartialEq)]
pub enum CertificateFailure {
    /// E^(k) for k ≥ T was not negligible.
    Nilpotency { k: usize, value: f64, limit: f64 },
    /// E^(k+1) exceeded the explicit factorial bound.
    Bound { k: usize, value: f64, limit: f64 },
}

#[derive(Clone, Debug)]
pub struct CertificateReport {
    pub errors: Vec<f64>,
    /// errors divided by `scale`.
    pub relative: Vec<f64>,
    pub scale: f64,
    /// Explicit bound on ‖e^(k+1)‖₂ for k = 1..T−1 (Euclidean over depths).
    pub bound_limits: Vec<f64>,
    pub damping: f64,
    pub nilpotent_ok: bool,
    pub bound_ok: bool,
    pub failure: Option<CertificateFailure>,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.nilpotent_ok && self.bound_ok
    }
}

/// (1/(1−Δ))^k Ω^k T^{k+1/2} / k!, evaluated in log space.
pub fn iteration_bound_factor(delta_eps: f64, omega: f64, horizon: usize, k: usize) -> f64 {
    if k >= horizon {
        return 0.0;
    }
    let kf = k as f64;
    let t = horizon as f64;
    let ln_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    let ln = -kf * (1.0 - delta_eps).ln() + kf * omega.ln() + (kf + 0.5) * t.ln() - ln_fact;
    ln.exp()
}

/// Run the two-step scheme for `k_max` outer iterations and certify that the
/// error sequence vanishes from k = T on and respects the factorial bound.
pub fn iteration_certificate(
    tree: &ScenarioTree,
    cfg: &LQConfig,
    mu: &Vector,
    consts: &BoundConstants,
    k_max: usize,
) -> Result<CertificateReport> {
    let opts = TwoStepOptions {
        outer_tol: 0.0,
        max_outer: k_max.max(cfg.horizon + 1),
        ..TwoStepOptions::default()
    };
    let sol = solve_two_step(tree, cfg, mu, &opts)?;
    let diag = sol.diagnostics;
    let errors = diag.errors;
    let scale = if errors[0] > 0.0 {
        errors[0]
    } else if diag.initial_scale > 0.0 {
        diag.initial_scale
    } else {
        1.0
    };
    let relative: Vec<f64> = errors.iter().map(|e| e / scale).collect();
    let horizon = cfg.horizon;
    let mut failure = None;
    let mut nilpotent_ok = true;
    for (idx, &e) in errors.iter().enumerate() {
        let k = idx + 1;
        if k >= horizon && e > 1e-10 * scale {
            nilpotent_ok = false;
            failure.get_or_insert(CertificateFailure::Nilpotency {
                k,
                value: e,
                limit: 1e-10 * scale,
            });
        }
    }
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let first = norm2(&diag.level_errors[0]);
    let mut bound_ok = true;
    let mut bound_limits = Vec::new();
    for k in 1..horizon.min(errors.len()) {
        let limit = iteration_bound_factor(consts.delta_eps, consts.omega, horizon, k) * first;
        bound_limits.push(limit);
        let value = norm2(&diag.level_errors[k]);
        // Allow rounding noise when the bound itself is tiny.
        if value > limit * (1.0 + 1e-9) + 1e-14 * scale {
            bound_ok = false;
            failure.get_or_insert(CertificateFailure::Bound { k, value, limit });
        }
    }
    Ok(CertificateReport {
        errors,
        relative,
        scale,
        bound_limits,
        damping: diag.damping,
        nilpotent_ok,
        bound_ok,
        failure,
    })
}
