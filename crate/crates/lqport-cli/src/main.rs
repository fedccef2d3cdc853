use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lqport_cli::commands::{self, BacktestArgs, ReportArgs, Table};
use lqport_cli::config::{Drift, PolicyName, RunConfig, Source};
use lqport_cli::error::{CliError, CliResult};
use lqport_cli::{formats, verify};

/// Multi-asset portfolio control under transaction costs and MGARCH volatility.
#[derive(Parser)]
#[command(name = "lqport", version)]
struct Cli {
    /// JSON run configuration; missing sections take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the commands that build a market and a control problem.
#[derive(Args, Default)]
struct ModelArgs {
    /// Parameter file written by `fit`; otherwise the built-in market is used.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Asset count of the built-in market.
    #[arg(long)]
    assets: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Risk aversion; computed from the initial covariance when absent.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    w0: Option<f64>,
    #[arg(long, value_enum)]
    drift: Option<Drift>,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.params {
            cfg.model.params = Some(p.clone());
        }
        if let Some(n) = self.assets {
            cfg.model.assets = n;
        }
        let c = &mut cfg.control;
        if let Some(h) = self.horizon {
            c.horizon = h;
        }
        if let Some(e) = self.epsilon {
            c.epsilon = e;
        }
        if let Some(d) = self.delta {
            c.delta = d;
        }
        if self.gamma.is_some() {
            c.gamma = self.gamma;
        }
        if let Some(w) = self.w0 {
            c.w0 = w;
        }
        if let Some(d) = self.drift {
            c.drift = d;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate model parameters from a price CSV.
    Fit {
        #[arg(long)]
        prices: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one market path.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the prices in the input CSV format.
        #[arg(long)]
        prices_out: Option<PathBuf>,
    },
    /// Train the correction network on simulated paths.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run policies on simulated paths or on rolling folds of a price CSV.
    Backtest {
        #[command(flatten)]
        model: ModelArgs,
        /// Policy to run; repeat for several.
        #[arg(long = "policy", value_enum)]
        policies: Vec<PolicyName>,
        /// Trained network; trained on the fly when absent.
        #[arg(long)]
        model_file: Option<PathBuf>,
        /// Price CSV for fold mode.
        #[arg(long)]
        prices: Option<PathBuf>,
        #[arg(long, value_enum)]
        source: Option<Source>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the numerical self-checks; exits 4 if any fails.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        /// JSON file for the check results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate backtest summaries.
    Report {
        /// `summary.json` files or backtest output directories.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "wealth")]
        table: Table,
        #[arg(long, value_enum, default_value = "expansion-nn")]
        candidate: PolicyName,
        #[arg(long, value_enum, default_value = "myopic")]
        baseline: PolicyName,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(serde::Serialize)]
struct VerifyFile<'a> {
    format_version: u32,
    passed: bool,
    checks: &'a [verify::CheckOutcome],
    config: serde_json::Value,
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Fit { prices, out } => commands::fit(&cfg, &prices, &out),
        Command::Simulate {
            model,
            seed,
            out,
            prices_out,
        } => {
            model.apply(&mut cfg);
            commands::simulate(&cfg, seed, &out, prices_out.as_deref())
        }
        Command::Train { model, seed, out_dir } => {
            model.apply(&mut cfg);
            if let Some(s) = seed {
                cfg.nn.seed = s;
            }
            commands::train(&cfg, &out_dir)
        }
        Command::Backtest {
            model,
            policies,
            model_file,
            prices,
            source,
            paths,
            seed,
            out_dir,
        } => {
            model.apply(&mut cfg);
            if let Some(s) = source {
                cfg.backtest.source = s;
            }
            if let Some(p) = paths {
                cfg.backtest.paths = p;
            }
            if let Some(s) = seed {
                cfg.backtest.seed = s;
            }
            let args = BacktestArgs {
                policies,
                model: model_file.as_deref(),
                prices: prices.as_deref(),
                out_dir: &out_dir,
            };
            commands::backtest(&cfg, &args)
        }
        Command::Verify { model, out } => {
            model.apply(&mut cfg);
            let checks = verify::run_checks(&cfg)?;
            print!("{}", verify::render(&checks));
            let failed: Vec<String> = checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.to_string())
                .collect();
            if let Some(path) = out {
                let file = VerifyFile {
                    format_version: lqport_cli::config::FORMAT_VERSION,
                    passed: failed.is_empty(),
                    checks: &checks,
                    config: serde_json::to_value(&cfg).expect("config serializes"),
                };
                formats::write_json(&path, &file)?;
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Verification(failed))
            }
        }
        Command::Report {
            inputs,
            table,
            candidate,
            baseline,
            out,
        } => commands::report(&ReportArgs {
            inputs: &inputs,
            table,
            candidate,
            baseline,
            out: &out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let started = Instant::now();
    let result = run(cli);
    eprintln!("wall time {:.2}s", started.elapsed().as_secs_f64());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
