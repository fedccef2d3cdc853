use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use lqport::backtest::{self, BacktestReport, Policy};
use lqport::estimation::{self, ReturnPanel};
use lqport::fixedpoint::LQConfig;
use lqport::mgarch::{self, Dynamics, MarketPath, ModelParams};
use lqport::neural::CorrectionNet;
use lqport::trainer::{self, TrainReport};
use lqport::{Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::config::{PolicyName, RunConfig, Source, FORMAT_VERSION};
use crate::error::{CliError, CliResult};
use crate::formats::{self, csv_err, FitSummary, ParamsFile, PriceTable};

/// Built-in synthetic market: daily-scale volatilities near 1%, pairwise
/// correlation 0.3 and A = 0.9 I, B = 0.3 I, C Cᵀ = 0.1 Σ₀.
pub fn desk_model(n: usize) -> CliResult<ModelParams> {
    if n == 0 {
        return Err(CliError::usage("model.assets must be at least 1"));
    }
    let sd = [0.012, 0.010, 0.011];
    let drift = [6e-4, 4e-4, 5e-4];
    let price = [50.0, 80.0, 100.0];
    let sd_i = |i: usize| sd[i % 3];
    let sigma0 = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.3 } * sd_i(i) * sd_i(j));
    let c = (&sigma0 * 0.1)
        .cholesky()
        .ok_or_else(|| CliError::Numerical("desk covariance is not positive definite".into()))?
        .l();
    let mu = Vector::from_fn(n, |i, _| drift[i % 3]);
    let s0 = Vector::from_fn(n, |i, _| price[i % 3] + 10.0 * (i / 3) as f64);
    Ok(ModelParams::new(
        mu,
        Matrix::identity(n, n) * 0.9,
        Matrix::identity(n, n) * 0.3,
        c,
        sigma0,
        s0,
    )?)
}

/// Parameters and price map in use, with asset names.
pub struct Market {
    pub dynamics: Dynamics,
    pub tickers: Vec<String>,
}

impl Market {
    pub fn resolve(cfg: &RunConfig) -> CliResult<Self> {
        let (params, tickers) = match &cfg.model.params {
            Some(path) => {
                let file = ParamsFile::load(path)?;
                (file.params()?, file.tickers)
            }
            None => {
                let p = desk_model(cfg.model.assets)?;
                let names = (1..=p.n()).map(|i| format!("ASSET{i}")).collect();
                (p, names)
            }
        };
        Market::from_params(cfg, params, tickers)
    }

    pub fn from_params(cfg: &RunConfig, params: ModelParams, tickers: Vec<String>) -> CliResult<Self> {
        let dynamics = Dynamics::new(params, cfg.model.price.function()?, cfg.model.chi)?;
        Ok(Market { dynamics, tickers })
    }

    pub fn mu(&self) -> &Vector {
        &self.dynamics.params.mu
    }
}

fn echo(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn fit_window(cfg: &RunConfig, panel: &ReturnPanel, s0: Vector) -> CliResult<(ModelParams, estimation::FitReport)> {
    let sigma0 = estimation::sample_initial_covariance(panel)?;
    let mu = estimation::estimate_mu(panel, cfg.fit.mu)?;
    let rep = estimation::fit_mgarch(panel, &sigma0, &mu, &s0, cfg.fit.loss, &cfg.fit.options)?;
    Ok((rep.params.clone(), rep))
}

pub fn fit(cfg: &RunConfig, prices: &Path, out: &Path) -> CliResult<()> {
    let table = formats::read_prices(prices)?;
    let panel = ReturnPanel::from_prices(&table.dates, &table.prices)?;
    let last = table.prices.row(table.prices.nrows() - 1).transpose();
    let started = Instant::now();
    let (params, rep) = fit_window(cfg, &panel, last)?;
    let mut file = ParamsFile::new(&params, table.tickers.clone());
    file.fit = Some(FitSummary::new(&rep, &panel.dates));
    file.config = Some(echo(cfg));
    formats::write_json(out, &file)?;
    eprintln!(
        "fit: {} assets, {} returns, converged={}, {:.2}s",
        params.n(),
        panel.len(),
        rep.converged,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulateMeta<'a> {
    format_version: u32,
    seed: u64,
    horizon: usize,
    price_warnings: usize,
    config: serde_json::Value,
    tickers: &'a [String],
}

/// Business days from 2000-01-03, used to date simulated prices.
pub fn synthetic_dates(count: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        use chrono::Datelike;
        if !matches!(d.weekday(), chrono::Weekday::Sat | chrono::Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().unwrap();
    }
    out
}

pub fn simulate(cfg: &RunConfig, seed: u64, out: &Path, prices_out: Option<&Path>) -> CliResult<()> {
    let market = Market::resolve(cfg)?;
    let horizon = cfg.control.horizon;
    let path = mgarch::simulate_path(&market.dynamics, horizon, seed)?;
    formats::write_path(out, &market.tickers, &path, market.mu())?;
    let meta = SimulateMeta {
        format_version: FORMAT_VERSION,
        seed,
        horizon,
        price_warnings: path.price_warnings,
        config: echo(cfg),
        tickers: &market.tickers,
    };
    formats::write_json(&sidecar(out), &meta)?;
    if let Some(p) = prices_out {
        let prices: Vec<Vector> = path.states.iter().map(|s| s.s.clone()).collect();
        formats::write_prices(p, &market.tickers, &synthetic_dates(prices.len()), &prices)?;
    }
    Ok(())
}

/// `name.csv` → `name.meta.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

#[derive(Serialize)]
struct TrainFile<'a> {
    format_version: u32,
    gamma: f64,
    horizon: usize,
    report: &'a TrainReport,
    config: serde_json::Value,
}

fn train_on(
    cfg: &RunConfig,
    dynamics: &Dynamics,
    lq: &LQConfig,
    checkpoints: Option<PathBuf>,
) -> CliResult<(CorrectionNet, TrainReport)> {
    let mut tcfg = cfg.nn.clone();
    tcfg.checkpoint_dir = checkpoints;
    let out = trainer::train(dynamics, lq, &tcfg)?;
    if let Some(k) = out.report.aborted_at {
        eprintln!("train: divergence heuristic stopped training at iteration {k}");
    }
    Ok((out.net, out.report))
}

pub fn train(cfg: &RunConfig, out_dir: &Path) -> CliResult<()> {
    let market = Market::resolve(cfg)?;
    let lq = cfg.control.lq_config(&market.dynamics.params, cfg.control.horizon)?;
    ensure_dir(out_dir)?;
    let checkpoints = cfg.nn.checkpoint_every.map(|_| out_dir.join("checkpoints"));
    let started = Instant::now();
    let (net, report) = train_on(cfg, &market.dynamics, &lq, checkpoints)?;
    net.save(&out_dir.join("model.json"))?;
    let file = TrainFile {
        format_version: FORMAT_VERSION,
        gamma: lq.gamma,
        horizon: lq.horizon,
        report: &report,
        config: echo(cfg),
    };
    formats::write_json(&out_dir.join("train_report.json"), &file)?;
    eprintln!(
        "train: {} iterations, final proxy {:.4e}, {:.1}s",
        report.iterations,
        report.proxy_errors.last().copied().unwrap_or(f64::NAN),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn policy_label(p: PolicyName) -> &'static str {
    match p {
        PolicyName::Myopic => "myopic",
        PolicyName::ExpansionZeroth => "expansion-zeroth",
        PolicyName::ExpansionNn => "expansion-nn",
    }
}

/// Means over the paths of one run for one policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub final_wealth: f64,
    pub return_pct: f64,
    pub value: f64,
    pub total_return: f64,
    pub total_cost: f64,
    pub total_risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    /// Trading steps per path.
    pub days: usize,
    pub paths: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub policies: Vec<PolicySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub format_version: u32,
    pub w0: f64,
    pub runs: Vec<RunSummary>,
    pub config: serde_json::Value,
}

#[derive(Serialize)]
struct PathRecord<'a> {
    run: &'a str,
    seed: u64,
    final_wealth: f64,
    decomposition: backtest::Decomposition,
    wealth: Vec<f64>,
    invested: Vec<f64>,
    holdings: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct PolicyFile<'a> {
    format_version: u32,
    policy: &'a str,
    paths: Vec<PathRecord<'a>>,
}

struct RunInput {
    name: String,
    tickers: Vec<String>,
    /// Calendar date of each step in fold mode; empty for simulated paths.
    dates: Vec<NaiveDate>,
    dynamics: Dynamics,
    lq: LQConfig,
    paths: Vec<MarketPath>,
    net: Option<CorrectionNet>,
}

fn summarize(run: &RunInput, reports: &[Vec<BacktestReport>], policies: &[PolicyName]) -> RunSummary {
    let k = reports.len() as f64;
    let summaries = policies
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mean = |f: &dyn Fn(&BacktestReport) -> f64| reports.iter().map(|r| f(&r[j])).sum::<f64>() / k;
            PolicySummary {
                policy: policy_label(*p).to_string(),
                final_wealth: mean(&|r| r.final_wealth),
                return_pct: mean(&|r| 100.0 * (r.final_wealth / r.initial_wealth - 1.0)),
                value: mean(&|r| r.decomposition.value),
                total_return: mean(&|r| r.decomposition.total_return),
                total_cost: mean(&|r| r.decomposition.total_cost),
                total_risk: mean(&|r| r.decomposition.total_risk),
            }
        })
        .collect();
    RunSummary {
        run: run.name.clone(),
        days: run.lq.horizon,
        paths: reports.len(),
        epsilon: run.lq.epsilon,
        gamma: run.lq.gamma,
        policies: summaries,
    }
}

fn evaluate(cfg: &RunConfig, run: &RunInput, policies: &[PolicyName]) -> CliResult<Vec<Vec<BacktestReport>>> {
    let mu = &run.dynamics.params.mu;
    let mut out = Vec::with_capacity(run.paths.len());
    for path in &run.paths {
        let mut row = Vec::with_capacity(policies.len());
        for p in policies {
            let policy = match p {
                PolicyName::Myopic => Policy::Myopic(cfg.control.drift.into()),
                PolicyName::ExpansionZeroth => Policy::ExpansionZeroth,
                PolicyName::ExpansionNn => Policy::ExpansionNn(run.net.as_ref().expect("network resolved")),
            };
            row.push(backtest::run_backtest(&policy, path, &run.lq, mu, cfg.control.w0)?);
        }
        backtest::compare_policies(&row)?;
        out.push(row);
    }
    Ok(out)
}

pub struct BacktestArgs<'a> {
    pub policies: Vec<PolicyName>,
    pub model: Option<&'a Path>,
    pub prices: Option<&'a Path>,
    pub out_dir: &'a Path,
}

pub fn backtest(cfg: &RunConfig, args: &BacktestArgs<'_>) -> CliResult<()> {
    let policies = if args.policies.is_empty() {
        cfg.backtest.policies.clone()
    } else {
        args.policies.clone()
    };
    if policies.is_empty() {
        return Err(CliError::usage("no policies selected"));
    }
    let mut unique = policies.clone();
    unique.dedup();
    if unique.len() != policies.len() || policies.iter().enumerate().any(|(i, p)| policies[..i].contains(p)) {
        return Err(CliError::usage("each policy may be listed once"));
    }
    let wants_nn = policies.contains(&PolicyName::ExpansionNn);
    let given = match args.model {
        Some(p) if wants_nn => {
            Some(CorrectionNet::load(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?)
        }
        _ => None,
    };
    let started = Instant::now();
    let runs = match args.prices {
        Some(p) => fold_runs(cfg, &formats::read_prices(p)?, given.as_ref(), wants_nn)?,
        None => {
            let market = Market::resolve(cfg)?;
            let lq = cfg.control.lq_config(&market.dynamics.params, cfg.control.horizon)?;
            let net = match (given, wants_nn) {
                (Some(n), _) => Some(n),
                (None, true) => Some(train_on(cfg, &market.dynamics, &lq, None)?.0),
                (None, false) => None,
            };
            let paths = simulate_paths(cfg, &market.dynamics, lq.horizon)?;
            vec![RunInput {
                name: "synthetic".into(),
                tickers: market.tickers,
                dates: Vec::new(),
                dynamics: market.dynamics,
                lq,
                paths,
                net,
            }]
        }
    };
    if let Some(run) = runs.iter().find(|r| {
        r.net
            .as_ref()
            .is_some_and(|n| n.mlp.output_dim() != r.dynamics.params.n())
    }) {
        return Err(CliError::data(format!(
            "model output size does not match the {} assets of run {}",
            run.dynamics.params.n(),
            run.name
        )));
    }

    ensure_dir(args.out_dir)?;
    let mut summaries = Vec::new();
    let mut per_policy: Vec<Vec<PathRecord>> = policies.iter().map(|_| Vec::new()).collect();
    let mut all_reports = Vec::new();
    for run in &runs {
        let reports = evaluate(cfg, run, &policies)?;
        summaries.push(summarize(run, &reports, &policies));
        all_reports.push(reports);
    }
    for (run, reports) in runs.iter().zip(&all_reports) {
        for (path, row) in run.paths.iter().zip(reports) {
            for (j, r) in row.iter().enumerate() {
                per_policy[j].push(PathRecord {
                    run: &run.name,
                    seed: path.seed,
                    final_wealth: r.final_wealth,
                    decomposition: r.decomposition,
                    wealth: r.wealth(),
                    invested: r.steps.iter().map(|s| s.invested).collect(),
                    holdings: r.steps.iter().map(|s| s.holdings.clone()).collect(),
                });
            }
        }
    }
    for (j, p) in policies.iter().enumerate() {
        let label = policy_label(*p);
        let records = std::mem::take(&mut per_policy[j]);
        write_policy_csv(
            &args.out_dir.join(format!("backtest_{label}.csv")),
            &runs,
            &all_reports,
            j,
        )?;
        let file = PolicyFile {
            format_version: FORMAT_VERSION,
            policy: label,
            paths: records,
        };
        formats::write_json(&args.out_dir.join(format!("backtest_{label}.json")), &file)?;
    }
    write_comparison(&args.out_dir.join("comparison.csv"), &summaries)?;
    let summary = BacktestSummary {
        format_version: FORMAT_VERSION,
        w0: cfg.control.w0,
        runs: summaries,
        config: echo(cfg),
    };
    formats::write_json(&args.out_dir.join("summary.json"), &summary)?;
    for run in &summary.runs {
        for p in &run.policies {
            eprintln!(
                "{} {:>16}: mean W_T {:.4}  mean V {:.6}",
                run.run, p.policy, p.final_wealth, p.value
            );
        }
    }
    eprintln!("backtest: {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn simulate_paths(cfg: &RunConfig, dynamics: &Dynamics, horizon: usize) -> CliResult<Vec<MarketPath>> {
    if cfg.backtest.paths == 0 {
        return Err(CliError::usage("backtest.paths must be at least 1"));
    }
    (0..cfg.backtest.paths as u64)
        .map(|k| {
            Ok(mgarch::simulate_path(
                dynamics,
                horizon,
                cfg.backtest.seed.wrapping_add(k),
            )?)
        })
        .collect()
}

fn fold_runs(
    cfg: &RunConfig,
    table: &PriceTable,
    given: Option<&CorrectionNet>,
    wants_nn: bool,
) -> CliResult<Vec<RunInput>> {
    let panel = ReturnPanel::from_prices(&table.dates, &table.prices)?;
    let folds = backtest::make_folds(&panel.dates, cfg.backtest.folds.into())?;
    let mut runs = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        let (tr, te) = (fold.train_indices(&panel.dates), fold.test_indices(&panel.dates));
        let train_panel = ReturnPanel::new(
            panel.dates[tr.clone()].to_vec(),
            panel.returns.rows(tr.start, tr.len()).into_owned(),
        )?;
        // Return row r moves prices from row r to row r + 1.
        let s0 = table.prices.row(te.start).transpose();
        let (params, _) = fit_window(cfg, &train_panel, s0)?;
        let market = Market::from_params(cfg, params, table.tickers.clone())?;
        let lq = cfg.control.lq_config(&market.dynamics.params, te.len())?;
        let paths = match cfg.backtest.source {
            Source::Historical => {
                let mu = market.mu();
                let shocks: Vec<Vector> = te.clone().map(|r| panel.row(r) - mu).collect();
                vec![mgarch::replay_path(&market.dynamics, &shocks, k as u64)?]
            }
            Source::Synthetic => simulate_paths(cfg, &market.dynamics, te.len())?,
        };
        let net = match (given, wants_nn) {
            (Some(n), _) => Some(n.clone()),
            (None, true) => Some(train_on(cfg, &market.dynamics, &lq, None)?.0),
            (None, false) => None,
        };
        eprintln!("fold {}: train {} returns, test {} returns", k + 1, tr.len(), te.len());
        runs.push(RunInput {
            name: format!("fold-{:02}", k + 1),
            tickers: market.tickers,
            dates: table.dates[te.start..=te.end].to_vec(),
            dynamics: market.dynamics,
            lq,
            paths,
            net,
        });
    }
    Ok(runs)
}

/// One row per step of every path run by policy `j`.
fn write_policy_csv(path: &Path, runs: &[RunInput], reports: &[Vec<Vec<BacktestReport>>], j: usize) -> CliResult<()> {
    let mut w = formats::csv_writer(path)?;
    let tickers = &runs[0].tickers;
    let mut header: Vec<String> = ["run", "seed", "t", "date", "wealth", "invested"]
        .map(String::from)
        .to_vec();
    header.extend(tickers.iter().map(|t| format!("holding_{t}")));
    header.extend(["cost", "risk"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (run, rows) in runs.iter().zip(reports) {
        for (p, row) in run.paths.iter().zip(rows) {
            for s in &row[j].steps {
                let date = run.dates.get(s.t).map(|d| d.to_string()).unwrap_or_default();
                let mut rec = vec![
                    run.name.clone(),
                    p.seed.to_string(),
                    s.t.to_string(),
                    date,
                    s.wealth.to_string(),
                    s.invested.to_string(),
                ];
                rec.extend(s.holdings.iter().map(f64::to_string));
                rec.extend([s.cost.to_string(), s.risk.to_string()]);
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_comparison(path: &Path, runs: &[RunSummary]) -> CliResult<()> {
    let mut w = formats::csv_writer(path)?;
    w.write_record([
        "run",
        "numerator",
        "denominator",
        "wealth_numerator",
        "wealth_denominator",
        "wealth_ratio",
        "value_difference",
    ])
    .map_err(csv_err)?;
    for run in runs {
        for (i, a) in run.policies.iter().enumerate() {
            for b in &run.policies[i + 1..] {
                w.write_record([
                    run.run.clone(),
                    a.policy.clone(),
                    b.policy.clone(),
                    a.final_wealth.to_string(),
                    b.final_wealth.to_string(),
                    (a.final_wealth / b.final_wealth).to_string(),
                    (a.value - b.value).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Table {
    /// Final wealth, percentage gain and wealth ratio per run.
    Wealth,
    /// As `wealth` with gains annualized linearly.
    Annualized,
    /// Objective, cost and risk of the two policies per cost scale.
    Decomposition,
}

pub struct ReportArgs<'a> {
    pub inputs: &'a [PathBuf],
    pub table: Table,
    pub candidate: PolicyName,
    pub baseline: PolicyName,
    pub out: &'a Path,
}

fn pick(run: &RunSummary, p: PolicyName) -> CliResult<&PolicySummary> {
    let label = policy_label(p);
    run.policies
        .iter()
        .find(|s| s.policy == label)
        .ok_or_else(|| CliError::data(format!("run {} has no results for policy {label}", run.run)))
}

/// Fixed-point rendering; negative zero prints as zero.
fn fixed(v: f64, places: usize) -> String {
    let s = format!("{v:.places$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

#[derive(Serialize)]
struct ReportMeta<'a> {
    format_version: u32,
    table: &'a str,
    candidate: &'a str,
    baseline: &'a str,
    inputs: Vec<String>,
    /// Decimal places of amount, percentage and ratio columns.
    places: [usize; 3],
    annualization: Option<&'a str>,
}

pub fn report(args: &ReportArgs<'_>) -> CliResult<()> {
    if args.inputs.is_empty() {
        return Err(CliError::usage("report needs at least one --input"));
    }
    let mut runs = Vec::new();
    let mut w0 = None;
    for input in args.inputs {
        let file = if input.is_dir() {
            input.join("summary.json")
        } else {
            input.clone()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
        let summary: BacktestSummary =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", file.display())))?;
        if summary.format_version != FORMAT_VERSION {
            return Err(CliError::data(format!(
                "{}: unsupported format version {}",
                file.display(),
                summary.format_version
            )));
        }
        w0.get_or_insert(summary.w0);
        runs.extend(summary.runs);
    }
    let w0 = w0.unwrap();
    let mut w = formats::csv_writer(args.out)?;
    let (c, b) = (policy_label(args.candidate), policy_label(args.baseline));
    let places = match args.table {
        Table::Wealth => [2, 2, 3],
        Table::Annualized => [2, 4, 4],
        Table::Decomposition => [4, 2, 0],
    };
    match args.table {
        Table::Wealth | Table::Annualized => {
            let annual = args.table == Table::Annualized;
            let [pw, pp, pr] = places;
            let row = |v: [f64; 5]| {
                [
                    fixed(v[0], pw),
                    fixed(v[1], pw),
                    fixed(v[2], pp),
                    fixed(v[3], pp),
                    fixed(v[4], pr),
                ]
            };
            w.write_record([
                "run".to_string(),
                format!("wealth_{c}"),
                format!("wealth_{b}"),
                format!("return_pct_{c}"),
                format!("return_pct_{b}"),
                "wealth_ratio".to_string(),
            ])
            .map_err(csv_err)?;
            let mut rows = Vec::new();
            for run in &runs {
                let (pc, pb) = (pick(run, args.candidate)?, pick(run, args.baseline)?);
                let (mut rc, mut rb) = (pc.return_pct, pb.return_pct);
                if annual {
                    rc = backtest::annualize_linear(rc, run.days);
                    rb = backtest::annualize_linear(rb, run.days);
                }
                let (wc, wb) = (w0 * (1.0 + rc / 100.0), w0 * (1.0 + rb / 100.0));
                rows.push([wc, wb, rc, rb, wc / wb]);
                w.write_record(std::iter::once(run.run.clone()).chain(row([wc, wb, rc, rb, wc / wb])))
                    .map_err(csv_err)?;
            }
            let k = rows.len() as f64;
            let avg = std::array::from_fn(|i| rows.iter().map(|r| r[i]).sum::<f64>() / k);
            w.write_record(std::iter::once("average".to_string()).chain(row(avg)))
                .map_err(csv_err)?;
        }
        Table::Decomposition => {
            w.write_record(["epsilon", "metric", c, b, "difference", "difference_pct"])
                .map_err(csv_err)?;
            let mut eps: Vec<f64> = runs.iter().map(|r| r.epsilon).collect();
            eps.sort_by(|x, y| y.total_cmp(x));
            eps.dedup();
            for e in eps {
                let group: Vec<&RunSummary> = runs.iter().filter(|r| r.epsilon == e).collect();
                let k = group.len() as f64;
                for (metric, get) in [
                    ("value", (|p: &PolicySummary| p.value) as fn(&PolicySummary) -> f64),
                    ("total_cost", |p| p.total_cost),
                    ("total_risk", |p| p.total_risk),
                ] {
                    let mut vc = 0.0;
                    let mut vb = 0.0;
                    for run in &group {
                        vc += get(pick(run, args.candidate)?) / k;
                        vb += get(pick(run, args.baseline)?) / k;
                    }
                    let diff = vc - vb;
                    w.write_record([
                        e.to_string(),
                        metric.to_string(),
                        fixed(vc, places[0]),
                        fixed(vb, places[0]),
                        fixed(diff, places[0]),
                        fixed(100.0 * diff / vc, places[1]),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| CliError::io(args.out, e))?;
    let meta = ReportMeta {
        format_version: FORMAT_VERSION,
        table: match args.table {
            Table::Wealth => "wealth",
            Table::Annualized => "annualized",
            Table::Decomposition => "decomposition",
        },
        candidate: c,
        baseline: b,
        inputs: args.inputs.iter().map(|p| p.display().to_string()).collect(),
        places,
        annualization: (args.table == Table::Annualized).then_some("linear, 252 trading days"),
    };
    formats::write_json(&sidecar(args.out), &meta)
}
