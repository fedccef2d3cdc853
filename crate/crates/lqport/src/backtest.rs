//! Wealth and investment accounting, objective decomposition, policy
//! comparison and rolling train/test folds.

use chrono::{Datelike, Months, NaiveDate};
use serde::Serialize;

use crate::expansion::{self, DriftConvention};
use crate::fixedpoint::LQConfig;
use crate::mgarch::{MarketPath, MarketState};
use crate::neural::CorrectionNet;
use crate::trainer::{self, Corrector, ZeroCorrection};
use crate::tree::ScenarioTree;
use crate::{Error, Result, Vector};

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioState {
    pub x: Vector,
    pub w: f64,
    pub invested: f64,
    /// Trade made at the previous step; enters the invested amount one step late.
    pub prev_trade: Vector,
}

impl PortfolioState {
    pub fn new(x0: Vector, w0: f64, s0: &Vector) -> Self {
        let n = x0.len();
        PortfolioState {
            invested: x0.dot(s0),
            x: x0,
            w: w0,
            prev_trade: Vector::zeros(n),
        }
    }
}

/// (εq/2) aᵀΨa.
pub fn trade_cost(a: &Vector, state: &MarketState, cfg: &LQConfig) -> f64 {
    let quad: f64 = a.iter().zip(state.s.iter()).map(|(ai, si)| ai * ai * si).sum();
    0.5 * cfg.epsilon * state.q * quad
}

/// (γ/2) XᵀPX.
pub fn risk_penalty(x: &Vector, state: &MarketState, cfg: &LQConfig) -> f64 {
    0.5 * cfg.gamma * x.dot(&(&state.p * x))
}

pub fn wealth_step(
    prev: &PortfolioState,
    a: &Vector,
    state_prev: &MarketState,
    state_now: &MarketState,
    cfg: &LQConfig,
) -> PortfolioState {
    let pnl = prev.x.dot(&(&state_now.s - &state_prev.s));
    PortfolioState {
        x: &prev.x + a,
        w: prev.w + pnl - trade_cost(a, state_now, cfg),
        invested: prev.invested + prev.prev_trade.dot(&state_prev.s),
        prev_trade: a.clone(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Decomposition {
    pub value: f64,
    pub total_return: f64,
    pub total_cost: f64,
    pub total_risk: f64,
}

/// Discounted return, cost and risk for t = 1..=T given `states[t]` and
/// `holdings[t]` for t = 0..=T.
pub fn objective_decomposition(
    states: &[MarketState],
    holdings: &[Vector],
    cfg: &LQConfig,
    mu: &Vector,
) -> Result<Decomposition> {
    if states.len() != holdings.len() || states.is_empty() {
        return Err(Error::arg(format!(
            "need matching state and holding sequences, got {} and {}",
            states.len(),
            holdings.len()
        )));
    }
    let mut d = Decomposition::default();
    let mut disc = 1.0;
    for t in 1..states.len() {
        disc *= cfg.delta;
        let (st, x) = (&states[t], &holdings[t]);
        let a = x - &holdings[t - 1];
        d.total_return += disc * st.dollar_drift(mu).dot(x);
        d.total_cost += disc * trade_cost(&a, st, cfg);
        d.total_risk += disc * risk_penalty(x, st, cfg);
    }
    d.value = d.total_return - d.total_cost - d.total_risk;
    Ok(d)
}

/// Expected decomposition over a scenario tree with per-node holdings.
pub fn tree_objective(tree: &ScenarioTree, holdings: &[Vector], cfg: &LQConfig, mu: &Vector) -> Result<Decomposition> {
    if holdings.len() != tree.len() {
        return Err(Error::arg("one holding vector per tree node required"));
    }
    let mut d = Decomposition::default();
    for (i, node) in tree.nodes.iter().enumerate().skip(1) {
        let w = node.prob * cfg.delta.powi(node.depth as i32);
        let x = &holdings[i];
        let a = x - &holdings[node.parent.unwrap()];
        d.total_return += w * node.state.dollar_drift(mu).dot(x);
        d.total_cost += w * trade_cost(&a, &node.state, cfg);
        d.total_risk += w * risk_penalty(x, &node.state, cfg);
    }
    d.value = d.total_return - d.total_cost - d.total_risk;
    Ok(d)
}

pub enum Policy<'a> {
    Myopic(DriftConvention),
    /// Expansion policy with the correction term dropped.
    ExpansionZeroth,
    ExpansionNn(&'a CorrectionNet),
    /// Precomputed holdings X_1..=X_T.
    Given(Vec<Vector>),
}

impl Policy<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Policy::Myopic(_) => "myopic",
            Policy::ExpansionZeroth => "expansion-zeroth",
            Policy::ExpansionNn(_) => "expansion-nn",
            Policy::Given(_) => "given",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub wealth: f64,
    pub invested: f64,
    pub holdings: Vec<f64>,
    pub cost: f64,
    pub risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BacktestReport {
    pub label: String,
    /// Step 0 is the initial state.
    pub steps: Vec<StepRecord>,
    pub decomposition: Decomposition,
    pub initial_wealth: f64,
    pub final_wealth: f64,
    /// Identifies the path so reports on different paths are not compared.
    pub path_fingerprint: u64,
}

impl BacktestReport {
    pub fn wealth(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.wealth).collect()
    }

    pub fn holdings(&self) -> Vec<Vector> {
        self.steps
            .iter()
            .map(|s| Vector::from_vec(s.holdings.clone()))
            .collect()
    }

    pub fn trades(&self) -> Vec<Vector> {
        let h = self.holdings();
        h.windows(2).map(|w| &w[1] - &w[0]).collect()
    }
}

/// FNV-1a over the bit patterns of prices and shocks.
pub fn path_fingerprint(path: &MarketPath) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for st in &path.states {
        st.s.iter().for_each(|&v| eat(v));
        st.sigma.iter().for_each(|&v| eat(v));
    }
    for z in &path.shocks {
        z.iter().for_each(|&v| eat(v));
    }
    h
}

fn policy_holdings(policy: &Policy<'_>, path: &MarketPath, cfg: &LQConfig, mu: &Vector) -> Result<Vec<Vector>> {
    let horizon = path.horizon();
    let mut xs = vec![cfg.x0.clone()];
    match policy {
        Policy::Given(h) => {
            if h.len() != horizon {
                return Err(Error::arg(format!(
                    "given holdings cover {} steps, path has {horizon}",
                    h.len()
                )));
            }
            xs.extend(h.iter().cloned());
        }
        Policy::Myopic(conv) => {
            for t in 1..=horizon {
                let x = expansion::myopic_step(xs.last().unwrap(), &path.states[t], cfg, mu, *conv)?;
                xs.push(x);
            }
        }
        Policy::ExpansionZeroth | Policy::ExpansionNn(_) => {
            let zero = ZeroCorrection(mu.len());
            let corrector: &dyn Corrector = match policy {
                Policy::ExpansionNn(net) => *net,
                _ => &zero,
            };
            let (rollout, _) = trainer::rollout_on_path(path, corrector, cfg, mu)?;
            xs = rollout.holdings;
        }
    }
    Ok(xs)
}

/// Step a policy along a path with wealth, investment and objective accounting.
pub fn run_backtest(
    policy: &Policy<'_>,
    path: &MarketPath,
    cfg: &LQConfig,
    mu: &Vector,
    w0: f64,
) -> Result<BacktestReport> {
    let xs = policy_holdings(policy, path, cfg, mu)?;
    let mut pf = PortfolioState::new(cfg.x0.clone(), w0, &path.states[0].s);
    let mut steps = vec![StepRecord {
        t: 0,
        wealth: pf.w,
        invested: pf.invested,
        holdings: pf.x.iter().copied().collect(),
        cost: 0.0,
        risk: 0.0,
    }];
    for t in 1..xs.len() {
        let a = &xs[t] - &pf.x;
        let state = &path.states[t];
        pf = wealth_step(&pf, &a, &path.states[t - 1], state, cfg);
        steps.push(StepRecord {
            t,
            wealth: pf.w,
            invested: pf.invested,
            holdings: pf.x.iter().copied().collect(),
            cost: trade_cost(&a, state, cfg),
            risk: risk_penalty(&pf.x, state, cfg),
        });
    }
    let decomposition = objective_decomposition(&path.states, &xs, cfg, mu)?;
    Ok(BacktestReport {
        label: policy.label().to_string(),
        initial_wealth: w0,
        final_wealth: pf.w,
        steps,
        decomposition,
        path_fingerprint: path_fingerprint(path),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub final_wealth: f64,
    pub return_pct: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ratio {
    pub numerator: String,
    pub denominator: String,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub ratios: Vec<Ratio>,
}

/// Final wealth, percentage gain and pairwise final-wealth ratios.
pub fn compare_policies(reports: &[BacktestReport]) -> Result<Comparison> {
    if let Some(first) = reports.first() {
        if let Some(bad) = reports.iter().find(|r| r.path_fingerprint != first.path_fingerprint) {
            return Err(Error::arg(format!(
                "reports '{}' and '{}' were produced on different paths",
                first.label, bad.label
            )));
        }
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            final_wealth: r.final_wealth,
            return_pct: 100.0 * (r.final_wealth / r.initial_wealth - 1.0),
            value: r.decomposition.value,
        })
        .collect();
    let mut ratios = Vec::new();
    for (i, a) in reports.iter().enumerate() {
        for b in reports.iter().skip(i + 1) {
            ratios.push(Ratio {
                numerator: a.label.clone(),
                denominator: b.label.clone(),
                ratio: a.final_wealth / b.final_wealth,
            });
        }
    }
    Ok(Comparison { rows, ratios })
}

/// Linear annualization of a percentage gain earned over `days` trading days.
pub fn annualize_linear(return_pct: f64, days: usize) -> f64 {
    return_pct * TRADING_DAYS_PER_YEAR / days as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FoldSpec {
    pub train_start: NaiveDate,
    /// Exclusive.
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    /// Exclusive.
    pub test_end: NaiveDate,
}

impl FoldSpec {
    pub fn train_indices(&self, dates: &[NaiveDate]) -> std::ops::Range<usize> {
        index_range(dates, self.train_start, self.train_end)
    }

    pub fn test_indices(&self, dates: &[NaiveDate]) -> std::ops::Range<usize> {
        index_range(dates, self.test_start, self.test_end)
    }
}

fn index_range(dates: &[NaiveDate], start: NaiveDate, end: NaiveDate) -> std::ops::Range<usize> {
    dates.partition_point(|d| *d < start)..dates.partition_point(|d| *d < end)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FoldWindow {
    /// Calendar months, anchored at the first of the month of the first date.
    Months { train: u32, test: u32, stride: u32 },
    /// Observation counts.
    Observations { train: usize, test: usize, stride: usize },
}

impl Default for FoldWindow {
    fn default() -> Self {
        FoldWindow::Months {
            train: 60,
            test: 6,
            stride: 6,
        }
    }
}

pub fn make_folds(dates: &[NaiveDate], window: FoldWindow) -> Result<Vec<FoldSpec>> {
    if dates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("dates must be strictly increasing".into()));
    }
    let (first, last) = match (dates.first(), dates.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Data("no dates supplied".into())),
    };
    let mut folds = Vec::new();
    match window {
        FoldWindow::Months { train, test, stride } => {
            if train == 0 || test == 0 || stride == 0 {
                return Err(Error::arg("fold windows must be positive"));
            }
            let anchor = NaiveDate::from_ymd_opt(first.year(), first.month(), 1).unwrap();
            let limit = last.succ_opt().unwrap_or(last);
            let add = |d: NaiveDate, m: u32| d.checked_add_months(Months::new(m)).unwrap_or(NaiveDate::MAX);
            let mut k = 0;
            loop {
                let train_start = add(anchor, k * stride);
                let train_end = add(train_start, train);
                let test_end = add(train_end, test);
                if test_end > limit {
                    break;
                }
                folds.push(FoldSpec {
                    train_start,
                    train_end,
                    test_start: train_end,
                    test_end,
                });
                k += 1;
            }
            if folds.is_empty() {
                return Err(Error::Data(format!(
                    "need {} months of data from {anchor} for one fold, data ends {last}",
                    train + test
                )));
            }
        }
        FoldWindow::Observations { train, test, stride } => {
            if train == 0 || test == 0 || stride == 0 {
                return Err(Error::arg("fold windows must be positive"));
            }
            let mut start = 0;
            while start + train + test <= dates.len() {
                let end_date = |i: usize| dates.get(i).copied().unwrap_or_else(|| last.succ_opt().unwrap_or(last));
                folds.push(FoldSpec {
                    train_start: dates[start],
                    train_end: dates[start + train],
                    test_start: dates[start + train],
                    test_end: end_date(start + train + test),
                });
                start += stride;
            }
            if folds.is_empty() {
                return Err(Error::Data(format!(
                    "need {} observations for one fold, have {}",
                    train + test,
                    dates.len()
                )));
            }
        }
    }
    Ok(folds)
}
