//! Run configuration read from JSON. Every section is optional and unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use lqport::backtest::FoldWindow;
use lqport::estimation::{self, LossKind, MuMethod};
use lqport::expansion::DriftConvention;
use lqport::fixedpoint::LQConfig;
use lqport::mgarch::PriceFunction;
use lqport::trainer::TrainConfig;
use lqport::Vector;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub control: ControlSection,
    pub fit: FitSection,
    pub nn: TrainConfig,
    pub backtest: BacktestSection,
    pub verify: VerifySection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Fitted parameter file; the built-in synthetic desk model when absent.
    pub params: Option<PathBuf>,
    /// Asset count of the synthetic desk model.
    pub assets: usize,
    pub price: PriceSection,
    /// Cap on the transaction-cost factor.
    pub chi: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            params: None,
            assets: 3,
            price: PriceSection::Multiplicative,
            chi: lqport::mgarch::DEFAULT_CHI,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriceSection {
    Multiplicative,
    Clamped { floor: f64, cap: f64 },
}

impl PriceSection {
    pub fn function(&self) -> CliResult<PriceFunction> {
        match *self {
            PriceSection::Multiplicative => Ok(PriceFunction::multiplicative()),
            PriceSection::Clamped { floor, cap } => Ok(PriceFunction::clamped(floor, cap)?),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Drift {
    #[default]
    Dollar,
    Literal,
}

impl From<Drift> for DriftConvention {
    fn from(d: Drift) -> Self {
        match d {
            Drift::Dollar => DriftConvention::Dollar,
            Drift::Literal => DriftConvention::Literal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    pub delta: f64,
    pub epsilon: f64,
    /// Risk aversion; derived from the model and `w0` when absent.
    pub gamma: Option<f64>,
    pub w0: f64,
    pub horizon: usize,
    /// Drift convention of the myopic policy.
    pub drift: Drift,
    /// Starting holdings; all zero when absent.
    pub x0: Option<Vec<f64>>,
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection {
            delta: 0.99,
            epsilon: 0.003,
            gamma: None,
            w0: 100.0,
            horizon: 60,
            drift: Drift::Dollar,
            x0: None,
        }
    }
}

impl ControlSection {
    pub fn gamma_for(&self, params: &lqport::mgarch::ModelParams) -> CliResult<f64> {
        match self.gamma {
            Some(g) => Ok(g),
            None => {
                let g = estimation::compute_gamma(&params.sigma0, &params.mu, self.w0)?;
                if g > 0.0 {
                    Ok(g)
                } else {
                    Err(CliError::data(format!(
                        "risk aversion derived from the drift estimate is {g:.4e}, not positive; set control.gamma"
                    )))
                }
            }
        }
    }

    pub fn lq_config(&self, params: &lqport::mgarch::ModelParams, horizon: usize) -> CliResult<LQConfig> {
        let n = params.n();
        let x0 = match &self.x0 {
            Some(v) if v.len() != n => {
                return Err(CliError::usage(format!(
                    "control.x0 has {} entries for {n} assets",
                    v.len()
                )))
            }
            Some(v) => Vector::from_column_slice(v),
            None => Vector::zeros(n),
        };
        Ok(LQConfig::new(
            self.delta,
            self.epsilon,
            self.gamma_for(params)?,
            horizon,
            x0,
        )?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub loss: LossKind,
    pub mu: MuMethod,
    pub options: estimation::FitOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Myopic,
    ExpansionZeroth,
    ExpansionNn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Replay the realized test-window returns.
    #[default]
    Historical,
    /// Simulate paths from the parameters fitted on each training window.
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FoldSection {
    Months { train: u32, test: u32, stride: u32 },
    Observations { train: usize, test: usize, stride: usize },
}

impl Default for FoldSection {
    fn default() -> Self {
        FoldSection::Months {
            train: 60,
            test: 6,
            stride: 6,
        }
    }
}

impl From<FoldSection> for FoldWindow {
    fn from(f: FoldSection) -> Self {
        match f {
            FoldSection::Months { train, test, stride } => FoldWindow::Months { train, test, stride },
            FoldSection::Observations { train, test, stride } => FoldWindow::Observations { train, test, stride },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestSection {
    /// Simulated paths per run (synthetic evaluation).
    pub paths: usize,
    /// Seed of the first path; path k uses `seed + k`.
    pub seed: u64,
    pub policies: Vec<PolicyName>,
    pub folds: FoldSection,
    pub source: Source,
}

impl Default for BacktestSection {
    fn default() -> Self {
        BacktestSection {
            paths: 50,
            seed: 10_000,
            policies: vec![PolicyName::Myopic, PolicyName::ExpansionNn],
            folds: FoldSection::default(),
            source: Source::Historical,
        }
    }
}

/// Two-asset test market: correlation 0.3, unit starting prices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub variance: f64,
    pub gamma: f64,
    pub delta: f64,
    pub chi: f64,
    pub floor: f64,
    pub cap: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            variance: 0.05,
            gamma: 5.0,
            delta: 0.99,
            chi: 5.0,
            floor: 0.5,
            cap: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DampingCheck {
    pub paths: usize,
    pub seed: u64,
}

impl Default for DampingCheck {
    fn default() -> Self {
        DampingCheck { paths: 20, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateCheck {
    pub scenario: Scenario,
    pub epsilon: f64,
    pub horizon: usize,
    pub branching: usize,
    pub seed: u64,
    /// Outer iterations to run.
    pub iterations: usize,
}

impl Default for CertificateCheck {
    fn default() -> Self {
        CertificateCheck {
            scenario: Scenario {
                variance: 1e-4,
                gamma: 1.0,
                chi: lqport::mgarch::DEFAULT_CHI,
                ..Scenario::default()
            },
            epsilon: 0.01,
            horizon: 5,
            branching: 2,
            seed: 11,
            iterations: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmallCostCheck {
    pub scenario: Scenario,
    pub epsilons: Vec<f64>,
    pub paths: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SmallCostCheck {
    fn default() -> Self {
        SmallCostCheck {
            scenario: Scenario::default(),
            epsilons: vec![1e-3, 1e-2, 1e-1],
            paths: 100,
            horizon: 50,
            seed: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionCheck {
    pub scenario: Scenario,
    pub epsilons: Vec<f64>,
    pub horizon: usize,
    pub branching: usize,
    pub seed: u64,
    pub min_slope: f64,
}

impl Default for ExpansionCheck {
    fn default() -> Self {
        ExpansionCheck {
            scenario: Scenario {
                gamma: 20.0,
                ..Scenario::default()
            },
            epsilons: vec![0.001, 0.003, 0.01, 0.03],
            horizon: 4,
            branching: 2,
            seed: 11,
            min_slope: 1.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientCheck {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for GradientCheck {
    fn default() -> Self {
        GradientCheck {
            instances: 20,
            seed: 42,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub damping: DampingCheck,
    pub certificate: CertificateCheck,
    pub small_cost: SmallCostCheck,
    pub expansion: ExpansionCheck,
    pub gradient: GradientCheck,
    /// Frobenius tolerance on the equilibrium equation.
    pub equilibrium_tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            damping: DampingCheck::default(),
            certificate: CertificateCheck::default(),
            small_cost: SmallCostCheck::default(),
            expansion: ExpansionCheck::default(),
            gradient: GradientCheck::default(),
            equilibrium_tolerance: 1e-10,
        }
    }
}
