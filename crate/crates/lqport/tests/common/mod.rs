#![allow(dead_code)]

use lqport::fixedpoint::LQConfig;
use lqport::mgarch::{Dynamics, ModelParams, PriceFunction};
use lqport::{Matrix, Vector};

pub fn scalar_params(mu: f64, a: f64, b: f64, c: f64, sigma0: f64, s0: f64) -> ModelParams {
    let m = |v: f64| Matrix::from_element(1, 1, v);
    ModelParams::new(
        Vector::from_element(1, mu),
        m(a),
        m(b),
        m(c),
        m(sigma0),
        Vector::from_element(1, s0),
    )
    .unwrap()
}

/// Two correlated assets with variance `var`, unit-ish prices.
pub fn two_asset(var: f64) -> ModelParams {
    let sigma0 = Matrix::from_row_slice(2, 2, &[var, 0.3 * var, 0.3 * var, var]);
    let r = var.sqrt();
    let c = Matrix::from_row_slice(2, 2, &[0.5 * r, 0.0, 0.1 * r, 0.5 * r]);
    ModelParams::new(
        Vector::from_vec(vec![0.001, 0.0005]),
        Matrix::identity(2, 2) * 0.8,
        Matrix::identity(2, 2) * 0.3,
        c,
        sigma0,
        Vector::from_element(2, 1.0),
    )
    .unwrap()
}

/// Daily-scale n-asset model with equal pairwise correlation 0.3.
pub fn desk_params(n: usize) -> ModelParams {
    let sd: Vec<f64> = (0..n).map(|i| 0.01 + 0.001 * (i % 3) as f64).collect();
    let sigma0 = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.3 } * sd[i] * sd[j]);
    let c = (&sigma0 * 0.1).cholesky().unwrap().l();
    let mu = Vector::from_fn(n, |i, _| 4e-4 + 1e-4 * (i % 3) as f64);
    let s0 = Vector::from_fn(n, |i, _| 50.0 + 15.0 * i as f64);
    ModelParams::new(
        mu,
        Matrix::identity(n, n) * 0.9,
        Matrix::identity(n, n) * 0.3,
        c,
        sigma0,
        s0,
    )
    .unwrap()
}

pub fn clamped(params: ModelParams, chi: f64) -> Dynamics {
    Dynamics::new(params, PriceFunction::clamped(0.5, 2.0).unwrap(), chi).unwrap()
}

pub fn multiplicative(params: ModelParams) -> Dynamics {
    Dynamics::new(params, PriceFunction::multiplicative(), 1e6).unwrap()
}

pub fn cfg(delta: f64, epsilon: f64, gamma: f64, horizon: usize, n: usize) -> LQConfig {
    LQConfig::new(delta, epsilon, gamma, horizon, Vector::zeros(n)).unwrap()
}

pub fn max_abs_diff(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax()
}
