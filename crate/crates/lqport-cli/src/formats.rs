//! On-disk formats: the price CSV, the parameter file, path and report CSVs.

use std::path::Path;

use chrono::NaiveDate;
use lqport::estimation::FitReport;
use lqport::mgarch::{MarketPath, ModelParams};
use lqport::{Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::config::FORMAT_VERSION;
use crate::error::{CliError, CliResult};

/// Adjusted close prices, one row per date.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceTable {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub prices: Matrix,
}

pub fn read_prices(path: &Path) -> CliResult<PriceTable> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_prices(file, &path.display().to_string())
}

/// Header `date,TICKER1,...`, ISO dates strictly ascending, positive prices.
pub fn parse_prices<R: std::io::Read>(reader: R, name: &str) -> CliResult<PriceTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let fail = |line: u64, msg: String| CliError::data(format!("{name} line {line}: {msg}"));
    let header = rdr.headers().map_err(|e| fail(1, e.to_string()))?.clone();
    if header.get(0).map(|h| h.eq_ignore_ascii_case("date")) != Some(true) {
        return Err(fail(1, "first column must be 'date'".into()));
    }
    let tickers: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if tickers.is_empty() {
        return Err(fail(1, "no ticker columns".into()));
    }
    if let Some(t) = tickers.iter().find(|t| t.is_empty()) {
        return Err(fail(1, format!("empty ticker name '{t}'")));
    }
    let mut dates = Vec::new();
    let mut flat = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fail(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != tickers.len() + 1 {
            return Err(fail(
                line,
                format!("expected {} fields, found {}", tickers.len() + 1, rec.len()),
            ));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| fail(line, format!("bad date '{}': {e}", &rec[0])))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(fail(line, format!("date {date} is not after {prev}")));
            }
        }
        dates.push(date);
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| fail(line, format!("bad price '{field}' for {}", tickers[j])))?;
            if v <= 0.0 || !v.is_finite() {
                return Err(fail(
                    line,
                    format!("price for {} must be positive, got {field}", tickers[j]),
                ));
            }
            flat.push(v);
        }
    }
    if dates.len() < 3 {
        return Err(CliError::data(format!(
            "{name}: need at least 3 price rows, have {}",
            dates.len()
        )));
    }
    let prices = Matrix::from_row_slice(dates.len(), tickers.len(), &flat);
    Ok(PriceTable { tickers, dates, prices })
}

pub fn write_prices(path: &Path, tickers: &[String], dates: &[NaiveDate], prices: &[Vector]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(tickers.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (d, s) in dates.iter().zip(prices) {
        let mut row = vec![d.format("%Y-%m-%d").to_string()];
        row.extend(s.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>], n: usize) -> CliResult<Matrix> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::data(format!("{name} must be {n}x{n}")));
    }
    Ok(Matrix::from_fn(n, n, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub loss_kind: lqport::estimation::LossKind,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub loss_trace: Vec<f64>,
    pub observations: usize,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
}

impl FitSummary {
    pub fn new(rep: &FitReport, dates: &[NaiveDate]) -> Self {
        FitSummary {
            loss_kind: rep.loss_kind,
            converged: rep.converged,
            iterations: rep.iterations,
            gradient_norm: rep.gradient_norm,
            loss_trace: rep.loss_trace.clone(),
            observations: dates.len(),
            first_date: dates[0],
            last_date: *dates.last().unwrap(),
        }
    }
}

/// Model parameters with row-major matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub format_version: u32,
    pub tickers: Vec<String>,
    pub mu: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub sigma0: Vec<Vec<f64>>,
    pub s0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl ParamsFile {
    pub fn new(params: &ModelParams, tickers: Vec<String>) -> Self {
        ParamsFile {
            format_version: FORMAT_VERSION,
            tickers,
            mu: params.mu.iter().copied().collect(),
            a: rows(&params.a),
            b: rows(&params.b),
            c: rows(&params.c),
            sigma0: rows(&params.sigma0),
            s0: params.s0.iter().copied().collect(),
            fit: None,
            config: None,
        }
    }

    pub fn params(&self) -> CliResult<ModelParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::data(format!(
                "unsupported params format version {}",
                self.format_version
            )));
        }
        let n = self.mu.len();
        if self.tickers.len() != n {
            return Err(CliError::data(format!("{} tickers for {n} assets", self.tickers.len())));
        }
        ModelParams::new(
            Vector::from_column_slice(&self.mu),
            from_rows("a", &self.a, n)?,
            from_rows("b", &self.b, n)?,
            from_rows("c", &self.c, n)?,
            from_rows("sigma0", &self.sigma0, n)?,
            Vector::from_column_slice(&self.s0),
        )
        .map_err(|e| CliError::data(format!("invalid parameters: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn csv_writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn csv_err(e: csv::Error) -> CliError {
    CliError::data(e.to_string())
}

/// One row per step: prices, realized returns (blank at t = 0), return
/// variances and the cost factor.
pub fn write_path(path: &Path, tickers: &[String], market: &MarketPath, mu: &Vector) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["t".to_string()];
    for prefix in ["price", "return", "variance"] {
        header.extend(tickers.iter().map(|t| format!("{prefix}_{t}")));
    }
    header.push("q".into());
    w.write_record(&header).map_err(csv_err)?;
    let returns = market.returns(mu);
    for (t, st) in market.states.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(st.s.iter().map(|v| v.to_string()));
        match t.checked_sub(1) {
            Some(k) => row.extend(returns[k].iter().map(|v| v.to_string())),
            None => row.extend(tickers.iter().map(|_| String::new())),
        }
        row.extend((0..tickers.len()).map(|i| st.sigma[(i, i)].to_string()));
        row.push(st.q.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
