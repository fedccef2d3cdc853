//! Self-checks of the solver and expansion guarantees on small markets.

use lqport::fixedpoint::{self, BoundConstants, LQConfig};
use lqport::mgarch::{self, Dynamics, ModelParams, PriceFunction};
use lqport::neural::{self, Mlp};
use lqport::tree::{build_tree, DEFAULT_NODE_BUDGET};
use lqport::{expansion, Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::commands::Market;
use crate::config::{RunConfig, Scenario};
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub limit: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, measured: f64, limit: f64, detail: String) -> Self {
        CheckOutcome {
            name,
            passed,
            measured,
            limit,
            detail,
        }
    }

    fn errored(name: &'static str, err: impl std::fmt::Display) -> Self {
        CheckOutcome::new(name, false, f64::NAN, f64::NAN, err.to_string())
    }
}

/// Two correlated assets with variance `v`, unit prices clamped to
/// [floor, cap].
pub fn scenario_market(s: &Scenario) -> lqport::Result<Dynamics> {
    let v = s.variance;
    let r = v.sqrt();
    let params = ModelParams::new(
        Vector::from_vec(vec![0.001, 0.0005]),
        Matrix::identity(2, 2) * 0.8,
        Matrix::identity(2, 2) * 0.3,
        Matrix::from_row_slice(2, 2, &[0.5 * r, 0.0, 0.1 * r, 0.5 * r]),
        Matrix::from_row_slice(2, 2, &[v, 0.3 * v, 0.3 * v, v]),
        Vector::from_element(2, 1.0),
    )?;
    Dynamics::new(params, PriceFunction::clamped(s.floor, s.cap)?, s.chi)
}

fn scenario_config(s: &Scenario, epsilon: f64, horizon: usize) -> lqport::Result<LQConfig> {
    LQConfig::new(s.delta, epsilon, s.gamma, horizon, Vector::zeros(2))
}

fn damping(cfg: &RunConfig, market: &Market) -> lqport::Result<CheckOutcome> {
    let c = &cfg.verify.damping;
    let lq = cfg
        .control
        .lq_config(&market.dynamics.params, cfg.control.horizon)
        .map_err(|e| lqport::Error::Argument(e.to_string()))?;
    let mut worst: f64 = 0.0;
    for k in 0..c.paths as u64 {
        let path = mgarch::simulate_path(&market.dynamics, lq.horizon, c.seed.wrapping_add(k))?;
        worst = worst.max(fixedpoint::measure_damping(path.states.iter().skip(1), &lq));
    }
    Ok(CheckOutcome::new(
        "damping",
        worst < 1.0,
        worst,
        1.0,
        format!("sup over {} paths of length {}", c.paths, lq.horizon),
    ))
}

fn small_cost(cfg: &RunConfig) -> lqport::Result<CheckOutcome> {
    let c = &cfg.verify.small_cost;
    let dy = scenario_market(&c.scenario)?;
    let consts = BoundConstants::new(
        dy.chi,
        dy.price.cap,
        dy.price.floor,
        dy.params.innovation_floor(),
        c.scenario.gamma,
        0.0,
    )?;
    let paths: Vec<_> = (0..c.paths as u64)
        .map(|k| mgarch::simulate_path(&dy, c.horizon, c.seed.wrapping_add(k)))
        .collect::<lqport::Result<_>>()?;
    let mut checked = Vec::new();
    let mut skipped = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for &eps in &c.epsilons {
        let Ok(bound) = fixedpoint::small_cost_inverse_bound(&consts, eps) else {
            skipped.push(eps);
            continue;
        };
        let lq = scenario_config(&c.scenario, eps, c.horizon)?;
        let measured = paths
            .iter()
            .flat_map(|p| p.states.iter().skip(1))
            .map(|st| fixedpoint::inverse_system_norm(st, &lq))
            .fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(measured / bound);
        checked.push(eps);
    }
    Ok(CheckOutcome::new(
        "small-cost-bound",
        !checked.is_empty() && worst_ratio <= 1.0,
        worst_ratio,
        1.0,
        format!("measured/bound; eps checked {checked:?}, outside hypothesis {skipped:?}"),
    ))
}

fn certificate(cfg: &RunConfig) -> lqport::Result<CheckOutcome> {
    let c = &cfg.verify.certificate;
    let dy = scenario_market(&c.scenario)?;
    let tree = build_tree(&dy, c.horizon, c.branching, c.seed, DEFAULT_NODE_BUDGET)?;
    let lq = scenario_config(&c.scenario, c.epsilon, c.horizon)?;
    let delta_eps = fixedpoint::measure_damping(tree.states(), &lq);
    let consts = BoundConstants::new(
        dy.chi,
        dy.price.cap,
        dy.price.floor,
        dy.params.innovation_floor(),
        c.scenario.gamma,
        delta_eps,
    )?;
    let rep = fixedpoint::iteration_certificate(&tree, &lq, &dy.params.mu, &consts, c.iterations)?;
    let tail = rep.relative.iter().skip(c.horizon - 1).copied().fold(0.0, f64::max);
    let detail = match &rep.failure {
        None => format!(
            "max relative error for k >= {} over {} iterations",
            c.horizon,
            rep.errors.len()
        ),
        Some(f) => format!("{f:?}"),
    };
    Ok(CheckOutcome::new(
        "fixed-point-certificate",
        rep.passed(),
        tail,
        1e-10,
        detail,
    ))
}

fn expansion_order(cfg: &RunConfig) -> lqport::Result<CheckOutcome> {
    let c = &cfg.verify.expansion;
    let dy = scenario_market(&c.scenario)?;
    let tree = build_tree(&dy, c.horizon, c.branching, c.seed, DEFAULT_NODE_BUDGET)?;
    let lq = scenario_config(&c.scenario, c.epsilons[0], c.horizon)?;
    let table = expansion::expansion_error_table(&tree, &lq, &dy.params.mu, &c.epsilons)?;
    let errors: Vec<f64> = table.rows.iter().map(|r| r.error).collect();
    Ok(match table.slope {
        Some(s) => CheckOutcome::new(
            "expansion-order",
            s >= c.min_slope,
            s,
            c.min_slope,
            format!("errors {errors:?}"),
        ),
        None => CheckOutcome::new(
            "expansion-order",
            false,
            f64::NAN,
            c.min_slope,
            format!("slope undefined; errors {errors:?}"),
        ),
    })
}

fn gradient(cfg: &RunConfig) -> lqport::Result<CheckOutcome> {
    let c = &cfg.verify.gradient;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut worst: f64 = 0.0;
    for case in 0..c.instances as u64 {
        let depth = rng.random_range(2..5);
        let mut sizes = vec![rng.random_range(2..6)];
        sizes.extend((1..depth).map(|_| rng.random_range(3..8)));
        sizes.push(rng.random_range(1..4));
        let net = Mlp::init(c.seed.wrapping_add(case), &sizes, 0.7)?;
        let batch = rng.random_range(1..6);
        let x = Matrix::from_fn(sizes[0], batch, |_, _| rng.random_range(-2.0..2.0));
        let y = Matrix::from_fn(*sizes.last().unwrap(), batch, |_, _| rng.random_range(-1.0..1.0));
        let scale = rng.random_range(0.5..3.0);
        worst = worst.max(neural::gradient_check(&net, &x, &y, scale, None, 1e-3, 1e-6)?);
    }
    Ok(CheckOutcome::new(
        "gradient-check",
        worst < c.tolerance,
        worst,
        c.tolerance,
        format!("max relative gap over {} networks", c.instances),
    ))
}

fn equilibrium(cfg: &RunConfig, market: &Market) -> lqport::Result<CheckOutcome> {
    let params = &market.dynamics.params;
    let sigma = mgarch::equilibrium_covariance(params)?;
    let res = mgarch::equilibrium_residual(params, &sigma);
    let tol = cfg.verify.equilibrium_tolerance;
    Ok(CheckOutcome::new(
        "equilibrium-residual",
        res < tol,
        res,
        tol,
        format!("{} assets", params.n()),
    ))
}

pub fn run_checks(cfg: &RunConfig) -> CliResult<Vec<CheckOutcome>> {
    let market = Market::resolve(cfg)?;
    let named =
        |name: &'static str, r: lqport::Result<CheckOutcome>| r.unwrap_or_else(|e| CheckOutcome::errored(name, e));
    Ok(vec![
        named("damping", damping(cfg, &market)),
        named("small-cost-bound", small_cost(cfg)),
        named("fixed-point-certificate", certificate(cfg)),
        named("expansion-order", expansion_order(cfg)),
        named("gradient-check", gradient(cfg)),
        named("equilibrium-residual", equilibrium(cfg, &market)),
    ])
}

pub fn render(checks: &[CheckOutcome]) -> String {
    let mut out = String::new();
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{status}  {:<24} measured {:<12.4e} limit {:<10.3e} {}\n",
            c.name, c.measured, c.limit, c.detail
        ));
    }
    out
}
