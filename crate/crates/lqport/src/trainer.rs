//! Fixed-point training of the correction network: roll the expansion policy
//! forward with the current network, regress the network on the realized
//! next-period base terms, and relax the parameters toward the fit.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::expansion::{self, ExpansionTerms, Variant};
use crate::fixedpoint::LQConfig;
use crate::mgarch::{self, Dynamics, MarketPath, MarketState};
use crate::neural::{self, AdamConfig, CorrectionNet, FitOptions, Mlp};
use crate::tree::ScenarioTree;
use crate::{Error, Matrix, Result, Vector};

/// Network input: [X_{t−1}, μᵢ sᵢ, P row-major].
pub fn features(x_prev: &Vector, state: &MarketState, mu: &Vector) -> Vec<f64> {
    let n = state.n();
    let mut out = Vec::with_capacity(n * n + 2 * n);
    out.extend(x_prev.iter());
    out.extend(state.dollar_drift(mu).iter());
    for i in 0..n {
        for j in 0..n {
            out.push(state.p[(i, j)]);
        }
    }
    out
}

/// Source of the correction φ standing in for E_t λ̃⁰_{t+1}.
pub trait Corrector: Sync {
    fn correct(&self, features: &[f64]) -> Result<Vector>;
}

impl Corrector for CorrectionNet {
    fn correct(&self, features: &[f64]) -> Result<Vector> {
        self.eval(features)
    }
}

/// φ ≡ 0, which turns the expansion policy into the myopic one.
pub struct ZeroCorrection(pub usize);

impl Corrector for ZeroCorrection {
    fn correct(&self, _features: &[f64]) -> Result<Vector> {
        Ok(Vector::zeros(self.0))
    }
}

/// One step of the expansion policy with λ̃¹ = δ (εI + (γ/q)PΨ⁻¹)⁻¹ φ.
pub fn expansion_policy_step(
    x_prev: &Vector,
    state: &MarketState,
    cfg: &LQConfig,
    mu: &Vector,
    phi: &Vector,
) -> Result<(Vector, ExpansionTerms)> {
    let l0 = expansion::lambda0(x_prev, state, cfg, mu, Variant::Stabilized)?;
    let l1 = expansion::lambda1_from_expectation(phi, x_prev, state, cfg, mu, Variant::Stabilized)?;
    let x = expansion::expansion_state_step(x_prev, &l0, &l1, state, cfg);
    Ok((
        x,
        ExpansionTerms {
            lambda0: l0,
            lambda1: l1,
            variant: Variant::Stabilized,
        },
    ))
}

/// Regression rows: features at t and the realized base term at t+1 (zero at
/// the horizon).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vector>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.features.extend(other.features);
        self.targets.extend(other.targets);
    }

    pub fn target_matrix(&self) -> Matrix {
        let n = self.targets.first().map_or(0, |t| t.len());
        Matrix::from_fn(n, self.len(), |i, j| self.targets[j][i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub path: MarketPath,
    /// X_0..=X_T.
    pub holdings: Vec<Vector>,
    /// Expansion terms used at t = 1..=T.
    pub terms: Vec<ExpansionTerms>,
}

/// Run the expansion policy along a given path and collect regression rows.
pub fn rollout_on_path(
    path: &MarketPath,
    corrector: &dyn Corrector,
    cfg: &LQConfig,
    mu: &Vector,
) -> Result<(Rollout, Dataset)> {
    let horizon = path.horizon();
    let mut holdings = Vec::with_capacity(horizon + 1);
    holdings.push(cfg.x0.clone());
    let mut terms = Vec::with_capacity(horizon);
    let mut data = Dataset::default();
    for t in 1..=horizon {
        let state = &path.states[t];
        let x_prev = holdings.last().unwrap();
        let feat = features(x_prev, state, mu);
        let step = corrector
            .correct(&feat)
            .and_then(|phi| expansion_policy_step(x_prev, state, cfg, mu, &phi));
        let (x, term) = step.map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("rollout step {t}: {m}")),
            other => other,
        })?;
        let target = if t < horizon {
            expansion::lambda0(&x, &path.states[t + 1], cfg, mu, Variant::Stabilized)?
        } else {
            Vector::zeros(x.len())
        };
        data.features.push(feat);
        data.targets.push(target);
        holdings.push(x);
        terms.push(term);
    }
    Ok((
        Rollout {
            path: path.clone(),
            holdings,
            terms,
        },
        data,
    ))
}

/// Simulate one path and roll the expansion policy along it.
pub fn rollout_and_targets(
    dynamics: &Dynamics,
    corrector: &dyn Corrector,
    cfg: &LQConfig,
    seed: u64,
) -> Result<(Rollout, Dataset)> {
    let path = mgarch::simulate_path(dynamics, cfg.horizon, seed)?;
    rollout_on_path(&path, corrector, cfg, &dynamics.params.mu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iter: usize,
    /// Relaxation weight on the freshly fitted parameters, in (0, 1].
    pub alpha: f64,
    pub epochs: usize,
    /// Mini-batch size; `None` uses every pooled row.
    pub batch: Option<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub paths_per_iter: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub init_std: f64,
    /// Fixed output scale; `None` derives it from a pilot rollout.
    pub output_scale: Option<f64>,
    pub holdout_paths: usize,
    /// Inner draws per held-out step for the conditional-mean target of the
    /// proxy; 0 scores against the single realized target instead.
    pub proxy_draws: usize,
    pub checkpoint_every: Option<usize>,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iter: 20,
            alpha: 1.0,
            epochs: 100,
            batch: None,
            adam: AdamConfig::default(),
            seed: 0,
            paths_per_iter: 1,
            width: 400,
            hidden_layers: 5,
            init_std: neural::DEFAULT_INIT_STD,
            output_scale: None,
            holdout_paths: 8,
            proxy_draws: 64,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::arg(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.paths_per_iter == 0 {
            return Err(Error::arg("paths_per_iter must be at least 1"));
        }
        if self.width == 0 || self.hidden_layers == 0 {
            return Err(Error::arg("network needs at least one hidden layer"));
        }
        Ok(())
    }

    fn rollout_seed(&self, k: usize, p: usize) -> u64 {
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add((k * self.paths_per_iter + p) as u64)
    }

    fn holdout_seed(&self, j: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(u64::MAX / 2 + j as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    /// Best fitted loss per outer iteration.
    pub losses: Vec<f64>,
    /// Held-out mean squared error of φ against fresh targets after each update.
    pub proxy_errors: Vec<f64>,
    pub iterations: usize,
    /// Iteration at which the divergence heuristic stopped training.
    pub aborted_at: Option<usize>,
    pub output_scale: f64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let k = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / k).collect();
    let std = (0..d)
        .map(|i| {
            let var = rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / k;
            let s = var.sqrt();
            if s > 1e-12 * mean[i].abs().max(1e-300) && s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// 99th percentile of |target| over all components; 1 when every target is 0.
pub fn default_output_scale(data: &Dataset) -> f64 {
    let mut mags: Vec<f64> = data.targets.iter().flat_map(|t| t.iter().map(|v| v.abs())).collect();
    if mags.is_empty() {
        return 1.0;
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let idx = ((mags.len() as f64 - 1.0) * 0.99).round() as usize;
    let v = mags[idx.min(mags.len() - 1)];
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

fn regression_error(net: &CorrectionNet, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (f, t) in data.features.iter().zip(&data.targets) {
        total += (net.eval(f)? - t).norm_squared();
    }
    Ok(total / data.len() as f64)
}

/// Replace each realized target by a Monte Carlo estimate of E_t λ̃⁰_{t+1},
/// averaging over `draws` fresh next-period shocks from the state at t.
fn conditional_targets(
    dynamics: &Dynamics,
    roll: &Rollout,
    data: &mut Dataset,
    cfg: &LQConfig,
    draws: usize,
    seed: u64,
) -> Result<()> {
    let mu = &dynamics.params.mu;
    let horizon = roll.path.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 1..horizon {
        let state = &roll.path.states[t];
        let mut mean = Vector::zeros(mu.len());
        for _ in 0..draws {
            let (_, z) = mgarch::sample_return(&state.sigma, mu, &mut rng)?;
            let (next, _) = dynamics.advance(state, &z)?;
            mean += expansion::lambda0(&roll.holdings[t], &next, cfg, mu, Variant::Stabilized)?;
        }
        data.targets[t - 1] = mean / draws as f64;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub net: CorrectionNet,
    pub report: TrainReport,
}

/// Outer fixed-point loop over network parameters.
pub fn train(dynamics: &Dynamics, cfg: &LQConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    tcfg.validate()?;
    cfg.validate()?;
    let started = Instant::now();
    let n = dynamics.params.n();
    let mu = &dynamics.params.mu;
    let sizes = neural::layer_sizes(n, tcfg.width, tcfg.hidden_layers);

    // Standardization and output scale come from a pilot rollout with φ ≡ 0.
    let (_, pilot) = rollout_and_targets(dynamics, &ZeroCorrection(n), cfg, tcfg.rollout_seed(0, 0))?;
    let (feature_mean, feature_std) = column_stats(&pilot.features);
    let output_scale = tcfg.output_scale.unwrap_or_else(|| default_output_scale(&pilot));
    let mut net = CorrectionNet {
        mlp: Mlp::init(tcfg.seed, &sizes, tcfg.init_std)?,
        feature_mean,
        feature_std,
        output_scale,
        seed: tcfg.seed,
    };

    let holdout: Vec<MarketPath> = (0..tcfg.holdout_paths)
        .map(|j| mgarch::simulate_path(dynamics, cfg.horizon, tcfg.holdout_seed(j)))
        .collect::<Result<_>>()?;

    let mut report = TrainReport {
        losses: Vec::new(),
        proxy_errors: Vec::new(),
        iterations: 0,
        aborted_at: None,
        output_scale,
        wall_time_secs: 0.0,
    };
    let mut rising = 0;
    for k in 1..=tcfg.max_iter {
        let pooled = (0..tcfg.paths_per_iter)
            .into_par_iter()
            .map(|p| rollout_and_targets(dynamics, &net, cfg, tcfg.rollout_seed(k, p)).map(|r| r.1))
            .collect::<Result<Vec<_>>>()?;
        let mut data = Dataset::default();
        for d in pooled {
            data.extend(d);
        }
        let inputs = net.standardize_batch(&data.features);
        let targets = data.target_matrix();
        let opts = FitOptions {
            epochs: tcfg.epochs,
            batch_size: tcfg.batch,
            seed: tcfg.seed.wrapping_add(k as u64),
            adam: tcfg.adam,
        };
        let fitted = neural::fit(&net.mlp, &inputs, &targets, net.output_scale, &opts)?;
        net.mlp = net.mlp.relaxed_toward(&fitted.params, tcfg.alpha);

        let proxy = if holdout.is_empty() {
            f64::NAN
        } else {
            let errs = holdout
                .par_iter()
                .map(|path| {
                    let (roll, mut d) = rollout_on_path(path, &net, cfg, mu)?;
                    if tcfg.proxy_draws > 0 {
                        conditional_targets(dynamics, &roll, &mut d, cfg, tcfg.proxy_draws, path.seed)?;
                    }
                    regression_error(&net, &d)
                })
                .collect::<Result<Vec<_>>>()?;
            errs.iter().sum::<f64>() / errs.len() as f64
        };

        if let Some(&prev) = report.losses.last() {
            if fitted.best_loss > 10.0 * prev {
                rising += 1;
            } else {
                rising = 0;
            }
        }
        report.losses.push(fitted.best_loss);
        report.proxy_errors.push(proxy);
        report.iterations = k;

        if let (Some(every), Some(dir)) = (tcfg.checkpoint_every, &tcfg.checkpoint_dir) {
            if every > 0 && k % every == 0 {
                write_checkpoint(dir, k, &net, tcfg)?;
            }
        }
        if rising >= 5 {
            report.aborted_at = Some(k);
            break;
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { net, report })
}

fn write_checkpoint(dir: &std::path::Path, k: usize, net: &CorrectionNet, tcfg: &TrainConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Checkpoint<'a> {
        format_version: u32,
        iteration: usize,
        model: neural::ModelFile,
        train_config: &'a TrainConfig,
    }
    std::fs::create_dir_all(dir)?;
    let ck = Checkpoint {
        format_version: neural::MODEL_FORMAT_VERSION,
        iteration: k,
        model: net.to_file(),
        train_config: tcfg,
    };
    let text = serde_json::to_string_pretty(&ck).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(format!("checkpoint_{k:04}.json")), text)?;
    Ok(())
}

/// Holdings of the expansion policy on every tree node, driven by `phi`, which
/// receives the node index and the node's features.
pub fn tree_policy_holdings(
    tree: &ScenarioTree,
    cfg: &LQConfig,
    mu: &Vector,
    phi: &dyn Fn(usize, &[f64]) -> Result<Vector>,
) -> Result<Vec<Vector>> {
    let mut x = vec![Vector::zeros(0); tree.len()];
    x[0] = cfg.x0.clone();
    for (i, node) in tree.nodes.iter().enumerate().skip(1) {
        let xp = &x[node.parent.unwrap()];
        let f = phi(i, &features(xp, &node.state, mu))?;
        x[i] = expansion_policy_step(xp, &node.state, cfg, mu, &f)?.0;
    }
    Ok(x)
}

/// sup_t of the node-averaged ‖φ − E_t λ̃⁰_{t+1}·1_{t<T}‖ along the holdings the
/// φ-driven policy produces on the tree.
pub fn nn_error_probe_with(
    tree: &ScenarioTree,
    cfg: &LQConfig,
    mu: &Vector,
    phi: &dyn Fn(usize, &[f64]) -> Result<Vector>,
) -> Result<f64> {
    let x = tree_policy_holdings(tree, cfg, mu, phi)?;
    let mut per_node = vec![0.0; tree.len()];
    for (i, node) in tree.nodes.iter().enumerate().skip(1) {
        let xp = &x[node.parent.unwrap()];
        let f = phi(i, &features(xp, &node.state, mu))?;
        let mut target = Vector::zeros(f.len());
        if node.depth < tree.horizon {
            for c in node.children.clone() {
                target += expansion::lambda0(&x[i], &tree.nodes[c].state, cfg, mu, Variant::Stabilized)?;
            }
            target /= node.children.len() as f64;
        }
        per_node[i] = (f - target).norm();
    }
    Ok((1..=tree.horizon)
        .map(|d| tree.level_mean(d, |i| per_node[i]))
        .fold(0.0, f64::max))
}

pub fn nn_error_probe(net: &CorrectionNet, tree: &ScenarioTree, cfg: &LQConfig, mu: &Vector) -> Result<f64> {
    nn_error_probe_with(tree, cfg, mu, &|_, f| net.eval(f))
}
