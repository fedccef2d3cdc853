//! MGARCH(1,1) dynamics: covariance recursion, price compounding, dollar-return
//! covariance, the condition-number cost factor and path simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{self, PSD_TOLERANCE};
use crate::{Error, Matrix, Result, Vector};

/// Default cap on the cost factor q.
pub const DEFAULT_CHI: f64 = 1e6;

/// Model coefficients and initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Per-period expected return.
    pub mu: Vector,
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    /// Initial return covariance.
    pub sigma0: Matrix,
    /// Initial prices.
    pub s0: Vector,
}

impl ModelParams {
    pub fn new(mu: Vector, a: Matrix, b: Matrix, c: Matrix, sigma0: Matrix, s0: Vector) -> Result<Self> {
        let n = mu.len();
        if n == 0 {
            return Err(Error::arg("model needs at least one asset"));
        }
        for (name, m) in [("A", &a), ("B", &b), ("C", &c), ("sigma0", &sigma0)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::arg(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if s0.len() != n {
            return Err(Error::arg(format!("s0 has length {}, expected {n}", s0.len())));
        }
        if s0.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::arg("initial prices must be positive and finite"));
        }
        let finite =
            [&a, &b, &c, &sigma0].iter().all(|m| m.iter().all(|v| v.is_finite())) && mu.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::arg("model coefficients must be finite"));
        }
        if linalg::singular_values(&c).min() <= 0.0 {
            return Err(Error::arg("C must have full rank"));
        }
        let sigma0 = linalg::repair_psd(&sigma0).map_err(|_| Error::arg("sigma0 must be positive semidefinite"))?;
        Ok(ModelParams {
            mu,
            a,
            b,
            c,
            sigma0,
            s0,
        })
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    /// Constant innovation term C Cᵀ.
    pub fn cct(&self) -> Matrix {
        &self.c * self.c.transpose()
    }

    /// Smallest eigenvalue of C Cᵀ, the uniform lower bound on every Σ_t.
    pub fn innovation_floor(&self) -> f64 {
        linalg::sym_eigenvalues(&self.cct())[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriceKind {
    Multiplicative,
    Clamped,
}

/// Maps a price and a return to the next price.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriceFunction {
    pub kind: PriceKind,
    pub floor: f64,
    pub cap: f64,
}

impl PriceFunction {
    pub fn multiplicative() -> Self {
        PriceFunction {
            kind: PriceKind::Multiplicative,
            floor: 0.0,
            cap: f64::INFINITY,
        }
    }

    pub fn clamped(floor: f64, cap: f64) -> Result<Self> {
        if !(floor > 0.0) || !(cap >= floor) || !cap.is_finite() {
            return Err(Error::arg(format!(
                "clamped prices need 0 < floor <= cap < inf, got floor={floor}, cap={cap}"
            )));
        }
        Ok(PriceFunction {
            kind: PriceKind::Clamped,
            floor,
            cap,
        })
    }

    pub fn apply_scalar(&self, s: f64, r: f64) -> f64 {
        let raw = s * (1.0 + r);
        match self.kind {
            PriceKind::Multiplicative => raw,
            PriceKind::Clamped => raw.max(self.floor).min(self.cap),
        }
    }
}

impl Default for PriceFunction {
    fn default() -> Self {
        PriceFunction::multiplicative()
    }
}

/// Next prices, plus a flag raised when a multiplicative update is not positive.
pub fn compound_prices(s: &Vector, r: &Vector, h: &PriceFunction) -> (Vector, bool) {
    let next = s.zip_map(r, |si, ri| h.apply_scalar(si, ri));
    let warn = next.iter().any(|&v| v <= 0.0);
    (next, warn)
}

/// diag(s) Σ diag(s).
pub fn dollar_covariance(s: &Vector, sigma: &Matrix) -> Matrix {
    let n = s.len();
    Matrix::from_fn(n, n, |i, j| s[i] * s[j] * sigma[(i, j)])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostFactor {
    pub q: f64,
    /// Set when the smallest eigenvalue was too small to trust; q is then the cap.
    pub degenerate: bool,
}

fn condition_factor(sigma: &Matrix, chi: f64) -> CostFactor {
    let ev = linalg::sym_eigenvalues(sigma);
    let lo = ev[0];
    let hi = *ev.last().unwrap();
    if !(lo > 1e-14 * hi.abs().max(f64::MIN_POSITIVE)) {
        return CostFactor {
            q: chi,
            degenerate: true,
        };
    }
    CostFactor {
        q: (hi / lo).clamp(1.0, chi),
        degenerate: false,
    }
}

/// Condition number of diag(s)⁻¹ P diag(s)⁻¹, clamped to [1, chi].
pub fn cost_factor(s: &Vector, p: &Matrix, chi: f64) -> Result<CostFactor> {
    if s.len() != p.nrows() || !p.is_square() {
        return Err(Error::arg("price vector and dollar covariance disagree in size"));
    }
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::arg("prices must be positive"));
    }
    let n = s.len();
    let sigma = Matrix::from_fn(n, n, |i, j| p[(i, j)] / (s[i] * s[j]));
    Ok(condition_factor(&sigma, chi))
}

/// One-period market snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketState {
    pub t: usize,
    /// Prices; Ψ_t is diag(s).
    pub s: Vector,
    /// Return covariance for the next period.
    pub sigma: Matrix,
    /// Dollar covariance Ψ Σ Ψ.
    pub p: Matrix,
    /// Transaction-cost factor.
    pub q: f64,
    pub degenerate: bool,
}

impl MarketState {
    pub fn new(t: usize, s: Vector, sigma: Matrix, chi: f64) -> Result<Self> {
        if s.len() != sigma.nrows() || !sigma.is_square() {
            return Err(Error::arg("prices and covariance disagree in size"));
        }
        if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::num(format!("non-positive or non-finite price at step {t}")));
        }
        let cf = condition_factor(&sigma, chi);
        let p = dollar_covariance(&s, &sigma);
        Ok(MarketState {
            t,
            s,
            sigma,
            p,
            q: cf.q,
            degenerate: cf.degenerate,
        })
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    pub fn psi(&self) -> Matrix {
        Matrix::from_diagonal(&self.s)
    }

    /// Ψ μ, the per-asset dollar drift.
    pub fn dollar_drift(&self, mu: &Vector) -> Vector {
        self.s.component_mul(mu)
    }
}

/// Model parameters together with the price map and the cost-factor cap.
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub params: ModelParams,
    pub price: PriceFunction,
    pub chi: f64,
}

impl Dynamics {
    pub fn new(params: ModelParams, price: PriceFunction, chi: f64) -> Result<Self> {
        if !(chi >= 1.0) {
            return Err(Error::arg(format!("cost-factor cap must be >= 1, got {chi}")));
        }
        Ok(Dynamics { params, price, chi })
    }

    pub fn initial_state(&self) -> Result<MarketState> {
        MarketState::new(0, self.params.s0.clone(), self.params.sigma0.clone(), self.chi)
    }

    /// Child state reached from `state` through shock `z`.
    pub fn advance(&self, state: &MarketState, z: &Vector) -> Result<(MarketState, bool)> {
        let r = &self.params.mu + z;
        let (s, warn) = compound_prices(&state.s, &r, &self.price);
        let sigma = step_covariance(&state.sigma, z, &self.params)?;
        Ok((MarketState::new(state.t + 1, s, sigma, self.chi)?, warn))
    }
}

/// Σ_{t+1} = C Cᵀ + A Σ Aᵀ + B z zᵀ Bᵀ.
pub fn step_covariance(sigma: &Matrix, z: &Vector, params: &ModelParams) -> Result<Matrix> {
    let n = params.n();
    if sigma.nrows() != n || sigma.ncols() != n || z.len() != n {
        return Err(Error::arg(format!(
            "covariance step expects {n}-dimensional inputs, got sigma {}x{} and z {}",
            sigma.nrows(),
            sigma.ncols(),
            z.len()
        )));
    }
    let bz = &params.b * z;
    let next = params.cct() + &params.a * sigma * params.a.transpose() + &bz * bz.transpose();
    Ok(linalg::symmetrize(&next))
}

/// Draw z ~ N(0, Σ) and return (μ + z, z).
pub fn sample_return<R: Rng + ?Sized>(sigma: &Matrix, mu: &Vector, rng: &mut R) -> Result<(Vector, Vector)> {
    let n = mu.len();
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::arg("covariance and mean disagree in size"));
    }
    let l = linalg::psd_factor(sigma)?;
    let u = Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let z = l * u;
    Ok((mu + &z, z))
}

/// A simulated trajectory: `states[t]` for t = 0..=T and `shocks[t]` driving
/// the move from state t to state t+1.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketPath {
    pub states: Vec<MarketState>,
    pub shocks: Vec<Vector>,
    pub seed: u64,
    /// Number of steps where a multiplicative update produced a non-positive price.
    pub price_warnings: usize,
}

impl MarketPath {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn returns(&self, mu: &Vector) -> Vec<Vector> {
        self.shocks.iter().map(|z| mu + z).collect()
    }
}

pub fn simulate_path(dynamics: &Dynamics, horizon: usize, seed: u64) -> Result<MarketPath> {
    if horizon == 0 {
        return Err(Error::arg("horizon must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut shocks = Vec::with_capacity(horizon);
    states.push(dynamics.initial_state()?);
    let mut warnings = 0;
    for _ in 0..horizon {
        let cur = states.last().unwrap();
        let (_, z) = sample_return(&cur.sigma, &dynamics.params.mu, &mut rng)?;
        let (next, warn) = dynamics.advance(cur, &z)?;
        warnings += usize::from(warn);
        shocks.push(z);
        states.push(next);
    }
    Ok(MarketPath {
        states,
        shocks,
        seed,
        price_warnings: warnings,
    })
}

/// Rebuild a path from stored shocks.
pub fn replay_path(dynamics: &Dynamics, shocks: &[Vector], seed: u64) -> Result<MarketPath> {
    let mut states = vec![dynamics.initial_state()?];
    let mut warnings = 0;
    for z in shocks {
        let (next, warn) = dynamics.advance(states.last().unwrap(), z)?;
        warnings += usize::from(warn);
        states.push(next);
    }
    Ok(MarketPath {
        states,
        shocks: shocks.to_vec(),
        seed,
        price_warnings: warnings,
    })
}

/// Fixed point of Σ = C Cᵀ + A Σ Aᵀ + B Σ Bᵀ, iterated from C Cᵀ.
pub fn equilibrium_covariance(params: &ModelParams) -> Result<Matrix> {
    const MAX_ITER: usize = 1_000_000;
    let cct = params.cct();
    let (a, b) = (&params.a, &params.b);
    let (at, bt) = (a.transpose(), b.transpose());
    let map = |s: &Matrix| linalg::symmetrize(&(&cct + a * s * &at + b * s * &bt));
    let mut sigma = cct.clone();
    let mut prev_change = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..MAX_ITER {
        let next = map(&sigma);
        let change = (&next - &sigma).norm();
        let scale = next.norm();
        sigma = next;
        if !scale.is_finite() || scale > 1e100 {
            return Err(Error::Instability(
                "covariance recursion is not contractive (iterates blow up)".into(),
            ));
        }
        if change <= 4.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        // Rounding can stop the change from shrinking further.
        if change >= prev_change {
            stalled += 1;
            if stalled > 50 {
                break;
            }
        } else {
            stalled = 0;
        }
        prev_change = change;
    }
    let residual = (&sigma - map(&sigma)).norm();
    if residual >= 1e-10 {
        return Err(Error::Instability(format!(
            "equilibrium iteration did not settle (residual {residual:e})"
        )));
    }
    if linalg::sym_eigenvalues(&sigma)[0] < -PSD_TOLERANCE {
        return Err(Error::Instability("equilibrium covariance is not PSD".into()));
    }
    Ok(sigma)
}

/// Frobenius residual of the equilibrium equation.
pub fn equilibrium_residual(params: &ModelParams, sigma: &Matrix) -> f64 {
    let rhs = params.cct() + &params.a * sigma * params.a.transpose() + &params.b * sigma * params.b.transpose();
    (sigma - rhs).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_params(a: f64, b: f64, c: f64, sigma0: f64) -> ModelParams {
        let m = |v: f64| Matrix::from_element(1, 1, v);
        ModelParams::new(
            Vector::from_element(1, 0.0),
            m(a),
            m(b),
            m(c),
            m(sigma0),
            Vector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn scalar_covariance_step() {
        let p = scalar_params(0.5, 0.5, 1.0, 2.0);
        let next = step_covariance(&Matrix::from_element(1, 1, 2.0), &Vector::from_element(1, 2.0), &p).unwrap();
        assert_relative_eq!(next[(0, 0)], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn identity_innovation_only() {
        let n = 3;
        let p = ModelParams::new(
            Vector::zeros(n),
            Matrix::zeros(n, n),
            Matrix::zeros(n, n),
            Matrix::identity(n, n),
            Matrix::identity(n, n),
            Vector::from_element(n, 1.0),
        )
        .unwrap();
        let sigma = Matrix::from_fn(n, n, |i, j| if i == j { 4.0 } else { 0.3 });
        let z = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(step_covariance(&sigma, &z, &p).unwrap(), Matrix::identity(n, n));
    }

    #[test]
    fn dimension_mismatch_is_argument_error() {
        let p = scalar_params(0.5, 0.5, 1.0, 1.0);
        let r = step_covariance(&Matrix::identity(2, 2), &Vector::zeros(2), &p);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn rank_deficient_c_is_rejected() {
        let r = ModelParams::new(
            Vector::zeros(2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            Matrix::identity(2, 2),
            Vector::from_element(2, 1.0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn price_compounding() {
        let h = PriceFunction::multiplicative();
        let (s, warn) = compound_prices(&Vector::from_element(1, 100.0), &Vector::from_element(1, 0.01), &h);
        assert_relative_eq!(s[0], 101.0, epsilon = 1e-12);
        assert!(!warn);
        let (same, _) = compound_prices(&Vector::from_element(1, 7.0), &Vector::zeros(1), &h);
        assert_eq!(same[0], 7.0);
        let clamp = PriceFunction::clamped(0.01, 10.0).unwrap();
        let (floored, _) = compound_prices(&Vector::from_element(1, 1.0), &Vector::from_element(1, -2.0), &clamp);
        assert_eq!(floored[0], 0.01);
        let (neg, warn) = compound_prices(&Vector::from_element(1, 1.0), &Vector::from_element(1, -2.0), &h);
        assert!(neg[0] < 0.0 && warn);
    }

    #[test]
    fn dollar_covariance_cases() {
        let sigma = Matrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]);
        assert_eq!(dollar_covariance(&Vector::from_element(2, 1.0), &sigma), sigma);
        let p = dollar_covariance(&Vector::from_element(1, 10.0), &Matrix::from_element(1, 1, 0.04));
        assert_relative_eq!(p[(0, 0)], 4.0, epsilon = 1e-14);
    }

    #[test]
    fn cost_factor_cases() {
        let s = Vector::from_vec(vec![2.0, 3.0]);
        let eye = dollar_covariance(&s, &Matrix::identity(2, 2));
        assert_relative_eq!(cost_factor(&s, &eye, DEFAULT_CHI).unwrap().q, 1.0, epsilon = 1e-12);
        let corr = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let p = dollar_covariance(&s, &corr);
        assert_relative_eq!(cost_factor(&s, &p, DEFAULT_CHI).unwrap().q, 3.0, epsilon = 1e-12);
        let one = cost_factor(
            &Vector::from_element(1, 5.0),
            &Matrix::from_element(1, 1, 0.7),
            DEFAULT_CHI,
        )
        .unwrap();
        assert_eq!(one.q, 1.0);
        let singular = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let deg = cost_factor(&Vector::from_element(2, 1.0), &singular, 50.0).unwrap();
        assert!(deg.degenerate);
        assert_eq!(deg.q, 50.0);
    }

    #[test]
    fn zero_covariance_gives_mean_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = Vector::from_vec(vec![0.1, -0.2]);
        let (r, z) = sample_return(&Matrix::zeros(2, 2), &mu, &mut rng).unwrap();
        assert_eq!(z, Vector::zeros(2));
        assert_eq!(r, mu);
    }

    #[test]
    fn unit_variance_draw_is_raw_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, z) = sample_return(&Matrix::identity(1, 1), &Vector::zeros(1), &mut rng).unwrap();
        let mut fresh = ChaCha8Rng::seed_from_u64(11);
        let raw: f64 = fresh.sample(StandardNormal);
        assert_eq!(z[0], raw);
    }

    #[test]
    fn scalar_equilibrium() {
        let p = scalar_params(0.5, 0.5, 1.0, 1.0);
        let s = equilibrium_covariance(&p).unwrap();
        assert!((s[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn explosive_recursion_is_instability() {
        let p = scalar_params(0.9, 0.9, 1.0, 1.0);
        assert!(matches!(equilibrium_covariance(&p), Err(Error::Instability(_))));
    }
}
