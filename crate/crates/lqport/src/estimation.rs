//! Parameter estimation from historical prices: sample covariance, a BFGS
//! minimizer with finite-difference gradients, the MGARCH fit, and μ and γ.

use chrono::NaiveDate;
use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Factorized};
use crate::mgarch::ModelParams;
use crate::{Error, Matrix, Result, Vector};

/// Simple returns, one row per period.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnPanel {
    /// Date at the end of each return period.
    pub dates: Vec<NaiveDate>,
    pub returns: Matrix,
}

impl ReturnPanel {
    pub fn new(dates: Vec<NaiveDate>, returns: Matrix) -> Result<Self> {
        if dates.len() != returns.nrows() {
            return Err(Error::Data(format!(
                "{} dates for {} return rows",
                dates.len(),
                returns.nrows()
            )));
        }
        if returns.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("returns must be finite".into()));
        }
        if returns.nrows() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 returns, have {}",
                returns.nrows()
            )));
        }
        Ok(ReturnPanel { dates, returns })
    }

    /// R_t = (S_{t+1} − S_t)/S_t from a price matrix with one row per date.
    pub fn from_prices(dates: &[NaiveDate], prices: &Matrix) -> Result<Self> {
        if dates.len() != prices.nrows() {
            return Err(Error::Data("one date per price row required".into()));
        }
        if dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("dates must be strictly increasing".into()));
        }
        if prices.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Data("prices must be positive and finite".into()));
        }
        let l = prices.nrows().saturating_sub(1);
        let r = Matrix::from_fn(l, prices.ncols(), |t, i| {
            (prices[(t + 1, i)] - prices[(t, i)]) / prices[(t, i)]
        });
        ReturnPanel::new(dates[1..].to_vec(), r)
    }

    pub fn len(&self) -> usize {
        self.returns.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.nrows() == 0
    }

    pub fn n(&self) -> usize {
        self.returns.ncols()
    }

    pub fn mean(&self) -> Vector {
        let l = self.len() as f64;
        Vector::from_iterator(self.n(), self.returns.column_iter().map(|c| c.sum() / l))
    }

    pub fn row(&self, t: usize) -> Vector {
        self.returns.row(t).transpose()
    }
}

/// (1/L) Σ (R_t − R̄)(R_t − R̄)ᵀ.
pub fn sample_initial_covariance(panel: &ReturnPanel) -> Result<Matrix> {
    let l = panel.len();
    if l < 2 {
        return Err(Error::Data(format!("need at least 2 returns, have {l}")));
    }
    let mean = panel.mean();
    let n = panel.n();
    let mut cov = Matrix::zeros(n, n);
    for t in 0..l {
        let d = panel.row(t) - &mean;
        cov += &d * d.transpose();
    }
    Ok(linalg::symmetrize(&(cov / l as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 200,
            grad_tol: 1e-8,
            fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BfgsReport {
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Objective after each accepted step, starting at x0.
    pub loss_trace: Vec<f64>,
    pub evaluations: usize,
}

fn fd_gradient(f: &(dyn Fn(&[f64]) -> f64 + Sync), x: &[f64], fx: f64, rel: f64) -> Result<Vec<f64>> {
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let h = rel * x[i].abs().max(1.0);
            let mut xp = x.to_vec();
            xp[i] += h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            match (fp.is_finite(), fm.is_finite()) {
                (true, true) => Ok((fp - fm) / (2.0 * h)),
                (true, false) => Ok((fp - fx) / h),
                (false, true) => Ok((fx - fm) / h),
                (false, false) => Err(Error::Optimization(format!(
                    "objective not finite on either side of coordinate {i}"
                ))),
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient callback `grad(x, f(x))`.
pub type GradientFn<'a> = dyn Fn(&[f64], f64) -> Result<Vec<f64>> + 'a;

/// BFGS with a backtracking Armijo search refined by one quadratic
/// interpolation step; gradients by central differences.
pub fn quasi_newton_minimize(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    x0: &[f64],
    opts: &BfgsOptions,
) -> Result<(Vec<f64>, BfgsReport)> {
    let calls = std::cell::Cell::new(0);
    let grad = |x: &[f64], fx: f64| {
        calls.set(calls.get() + 1);
        fd_gradient(f, x, fx, opts.fd_step)
    };
    let (x, mut rep) = quasi_newton_with_gradient(f, &grad, x0, opts)?;
    rep.evaluations += 2 * x0.len() * calls.get();
    Ok((x, rep))
}

/// As [`quasi_newton_minimize`] with a caller-supplied gradient, called
/// as `grad(x, f(x))`. `evaluations` counts objective calls only.
pub fn quasi_newton_with_gradient(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    grad: &GradientFn<'_>,
    x0: &[f64],
    opts: &BfgsOptions,
) -> Result<(Vec<f64>, BfgsReport)> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::Optimization(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut evals = 1;
    let mut g = grad(&x, fx)?;
    let mut h = Matrix::identity(n, n);
    let mut first = true;
    let mut report = BfgsReport {
        iterations: 0,
        converged: false,
        gradient_norm: norm(&g),
        loss_trace: vec![fx],
        evaluations: 0,
    };
    while report.gradient_norm >= opts.grad_tol && report.iterations < opts.max_iter {
        let gv = Vector::from_column_slice(&g);
        let mut p: Vec<f64> = (-(&h * &gv)).iter().copied().collect();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            h = Matrix::identity(n, n);
            p = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let trial = |a: f64| -> Vec<f64> { x.iter().zip(&p).map(|(xi, pi)| xi + a * pi).collect() };

        let mut alpha = 1.0;
        let mut saw_finite = false;
        let mut accepted = None;
        while alpha > 1e-20 {
            let fa = f(&trial(alpha));
            evals += 1;
            if !fa.is_finite() {
                alpha *= 0.5;
                continue;
            }
            saw_finite = true;
            if fa <= fx + 1e-4 * alpha * slope {
                accepted = Some((alpha, fa));
                break;
            }
            alpha *= 0.5;
        }
        let Some((mut alpha, mut fa)) = accepted else {
            if !saw_finite {
                return Err(Error::Optimization(
                    "objective stayed non-finite along the search direction".into(),
                ));
            }
            break;
        };
        // Minimizer of the quadratic through f(0), f'(0) and f(alpha).
        let curv = fa - fx - slope * alpha;
        if curv > 0.0 {
            let a_star = -slope * alpha * alpha / (2.0 * curv);
            if a_star > 0.0 && (a_star - alpha).abs() > 1e-12 * alpha {
                let fs = f(&trial(a_star));
                evals += 1;
                if fs.is_finite() && fs < fa {
                    alpha = a_star;
                    fa = fs;
                }
            }
        }
        let x_new = trial(alpha);
        let g_new = grad(&x_new, fa)?;
        let s = Vector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = Vector::from_iterator(n, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-300 {
            if first {
                h = Matrix::identity(n, n) * (sy / y.dot(&y));
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = x_new;
        fx = fa;
        g = g_new;
        report.iterations += 1;
        report.gradient_norm = norm(&g);
        report.loss_trace.push(fx);
    }
    report.converged = report.gradient_norm < opts.grad_tol;
    report.evaluations = evals;
    Ok((x, report))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Mean squared Frobenius change of consecutive filtered covariances.
    #[default]
    Smoothness,
    /// Negative Gaussian quasi-log-likelihood.
    GaussianQml,
}

/// How the fit computes gradients of the filtered loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    /// Reverse sweep through the covariance recursion.
    #[default]
    Adjoint,
    /// Central differences with step `bfgs.fd_step`.
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub bfgs: BfgsOptions,
    pub gradient: GradientMethod,
    /// Starting diagonal of A.
    pub init_a: f64,
    /// Starting diagonal of B.
    pub init_b: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            bfgs: BfgsOptions::default(),
            gradient: GradientMethod::Adjoint,
            init_a: 0.05,
            init_b: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub params: ModelParams,
    pub loss_kind: LossKind,
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

const DIAG_FLOOR: f64 = 1e-6;

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn inv_softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp_m1().max(1e-300).ln()
    }
}

struct Layout {
    n: usize,
}

impl Layout {
    fn len(&self) -> usize {
        2 * self.n * self.n + self.n * (self.n + 1) / 2
    }

    fn unpack(&self, theta: &[f64]) -> (Matrix, Matrix, Matrix) {
        let n = self.n;
        let a = Matrix::from_row_slice(n, n, &theta[..n * n]);
        let b = Matrix::from_row_slice(n, n, &theta[n * n..2 * n * n]);
        let mut c = Matrix::zeros(n, n);
        let mut k = 2 * n * n;
        for i in 0..n {
            for j in 0..=i {
                c[(i, j)] = if i == j {
                    softplus(theta[k]) + DIAG_FLOOR
                } else {
                    theta[k]
                };
                k += 1;
            }
        }
        (a, b, c)
    }

    /// Gradient in packed coordinates from gradients in A, B and C.
    fn pull_back(&self, theta: &[f64], ga: &Matrix, gb: &Matrix, gc: &Matrix) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity(self.len());
        for m in [ga, gb] {
            out.extend(m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
        }
        let mut k = 2 * n * n;
        for i in 0..n {
            for j in 0..=i {
                // d softplus(v)/dv is the logistic function.
                let d = if i == j { 1.0 / (1.0 + (-theta[k]).exp()) } else { 1.0 };
                out.push(gc[(i, j)] * d);
                k += 1;
            }
        }
        out
    }

    fn pack(&self, a: &Matrix, b: &Matrix, c: &Matrix) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity(self.len());
        for m in [a, b] {
            for i in 0..n {
                for j in 0..n {
                    out.push(m[(i, j)]);
                }
            }
        }
        for i in 0..n {
            for j in 0..=i {
                out.push(if i == j {
                    inv_softplus((c[(i, j)] - DIAG_FLOOR).max(1e-12))
                } else {
                    c[(i, j)]
                });
            }
        }
        out
    }
}

fn filtered_loss(a: &Matrix, b: &Matrix, c: &Matrix, sigma0: &Matrix, shocks: &[Vector], kind: LossKind) -> f64 {
    if linalg::spectral_norm(a).powi(2) + linalg::spectral_norm(b).powi(2) >= 1.0 {
        return f64::INFINITY;
    }
    let cct = c * c.transpose();
    let at = a.transpose();
    let mut sigma = sigma0.clone();
    let mut total = 0.0;
    for z in shocks {
        if kind == LossKind::GaussianQml {
            let Some(ch) = sigma.clone().cholesky() else {
                return f64::INFINITY;
            };
            let logdet: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let w = ch.solve(z);
            total += 0.5 * (logdet + z.dot(&w));
        }
        let bz = b * z;
        let next = &cct + a * &sigma * &at + &bz * bz.transpose();
        if kind == LossKind::Smoothness {
            total += (&next - &sigma).norm_squared();
        }
        sigma = next;
    }
    total / shocks.len() as f64
}

/// Gradient of [`filtered_loss`] with respect to A, B and C, by a backward
/// pass over the stored covariance sequence.
fn filtered_loss_grad(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    sigma0: &Matrix,
    shocks: &[Vector],
    kind: LossKind,
) -> Option<(Matrix, Matrix, Matrix)> {
    let n = a.nrows();
    let cct = c * c.transpose();
    let at = a.transpose();
    let mut sigmas = Vec::with_capacity(shocks.len() + 1);
    sigmas.push(sigma0.clone());
    for z in shocks {
        let bz = b * z;
        let next = &cct + a * sigmas.last().unwrap() * &at + &bz * bz.transpose();
        sigmas.push(next);
    }
    let (mut ga, mut gb, mut gk) = (Matrix::zeros(n, n), Matrix::zeros(n, n), Matrix::zeros(n, n));
    // Adjoint of sigma_{t+1} while processing step t.
    let mut g = Matrix::zeros(n, n);
    for t in (0..shocks.len()).rev() {
        let z = &shocks[t];
        let (cur, next) = (&sigmas[t], &sigmas[t + 1]);
        let diff = if kind == LossKind::Smoothness {
            Some((next - cur) * 2.0)
        } else {
            None
        };
        if let Some(d) = &diff {
            g += d;
        }
        let gs = &g + g.transpose();
        gk += &g;
        ga += &gs * a * cur;
        gb += &gs * (b * z) * z.transpose();
        let mut prev = &at * &g * a;
        if let Some(d) = &diff {
            prev -= d;
        }
        if kind == LossKind::GaussianQml {
            let ch = cur.clone().cholesky()?;
            let w = ch.solve(z);
            prev += (ch.inverse() - &w * w.transpose()) * 0.5;
        }
        g = prev;
    }
    let scale = 1.0 / shocks.len() as f64;
    let gc = (&gk + gk.transpose()) * c;
    Some((ga * scale, gb * scale, gc * scale))
}

/// BFGS fit of A, B and lower-triangular C along the covariance sequence
/// filtered from Z_t = R_t − μ.
pub fn fit_mgarch(
    panel: &ReturnPanel,
    sigma0: &Matrix,
    mu: &Vector,
    s0: &Vector,
    kind: LossKind,
    opts: &FitOptions,
) -> Result<FitReport> {
    let n = panel.n();
    if sigma0.nrows() != n || mu.len() != n {
        return Err(Error::arg("sigma0 and mu must match the panel width"));
    }
    let sigma0 = linalg::repair_psd(sigma0)?;
    // Work on returns divided by a scalar so the parameters are O(1).
    let scale = (sigma0.trace() / n as f64).sqrt();
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let shocks: Vec<Vector> = (0..panel.len()).map(|t| (panel.row(t) - mu) / scale).collect();
    let s0n = &sigma0 / (scale * scale);

    let layout = Layout { n };
    let a0 = Matrix::identity(n, n) * opts.init_a;
    let b0 = Matrix::identity(n, n) * opts.init_b;
    let persistence = 1.0 - opts.init_a.powi(2) - opts.init_b.powi(2);
    if !(persistence > 0.0) {
        return Err(Error::arg("initial A and B must satisfy ‖A‖² + ‖B‖² < 1"));
    }
    let target = &s0n * persistence + Matrix::identity(n, n) * 1e-8;
    let c0 = target
        .clone()
        .cholesky()
        .map(|ch| ch.l())
        .unwrap_or_else(|| Matrix::identity(n, n) * (target.trace() / n as f64).sqrt().max(1e-3));
    let theta0 = layout.pack(&a0, &b0, &c0);

    let objective = |theta: &[f64]| {
        let (a, b, c) = layout.unpack(theta);
        filtered_loss(&a, &b, &c, &s0n, &shocks, kind)
    };
    let gradient = |theta: &[f64], _: f64| {
        let (a, b, c) = layout.unpack(theta);
        filtered_loss_grad(&a, &b, &c, &s0n, &shocks, kind)
            .map(|(ga, gb, gc)| layout.pull_back(theta, &ga, &gb, &gc))
            .ok_or_else(|| Error::Optimization("filtered covariance lost positive definiteness".into()))
    };
    let (theta, rep) = match opts.gradient {
        GradientMethod::Adjoint => quasi_newton_with_gradient(&objective, &gradient, &theta0, &opts.bfgs)?,
        GradientMethod::FiniteDifference => quasi_newton_minimize(&objective, &theta0, &opts.bfgs)?,
    };
    let (a, b, c) = layout.unpack(&theta);
    let params = ModelParams::new(mu.clone(), a, b, c * scale, sigma0, s0.clone())?;
    Ok(FitReport {
        params,
        loss_kind: kind,
        loss_trace: rep.loss_trace,
        converged: rep.converged,
        iterations: rep.iterations,
        gradient_norm: rep.gradient_norm,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuMethod {
    #[default]
    SampleMean,
    /// Projection of the sample mean onto the leading correlation eigenvectors.
    EigenPortfolio { factors: usize },
}

pub fn estimate_mu(panel: &ReturnPanel, method: MuMethod) -> Result<Vector> {
    let mean = panel.mean();
    let k = match method {
        MuMethod::SampleMean => return Ok(mean),
        MuMethod::EigenPortfolio { factors } => factors,
    };
    let n = panel.n();
    if k == 0 || k > n {
        return Err(Error::arg(format!("factor count must lie in 1..={n}, got {k}")));
    }
    let cov = sample_initial_covariance(panel)?;
    let sd: Vec<f64> = (0..n).map(|i| cov[(i, i)].sqrt()).collect();
    if sd.iter().any(|&s| !(s > 0.0)) {
        return Ok(mean);
    }
    let corr = Matrix::from_fn(n, n, |i, j| cov[(i, j)] / (sd[i] * sd[j]));
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let standardized = Vector::from_fn(n, |i, _| mean[i] / sd[i]);
    let mut proj = Vector::zeros(n);
    for &idx in order.iter().take(k) {
        let v = eig.eigenvectors.column(idx);
        proj += v * v.dot(&standardized);
    }
    let mut out = Vector::from_fn(n, |i, _| proj[i] * sd[i]);
    let (target, got) = (mean.mean(), out.mean());
    if got.abs() > 1e-300 {
        out *= target / got;
    }
    Ok(out)
}

/// γ = (1/W₀) Σᵢ (Σ̄⁻¹μ)ᵢ.
pub fn compute_gamma(sigma_bar: &Matrix, mu: &Vector, w0: f64) -> Result<f64> {
    if !(w0 > 0.0) {
        return Err(Error::arg(format!("initial wealth must be positive, got {w0}")));
    }
    Ok(Factorized::new(sigma_bar)?.solve(mu)?.sum() / w0)
}
