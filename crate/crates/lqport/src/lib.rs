//! Multi-period mean-variance trading with MGARCH(1,1) covariance dynamics and
//! small quadratic transaction costs.
//!
//! The crate covers the whole pipeline: model simulation and estimation, the
//! forward-backward costate solver on scenario trees, the small-cost expansion
//! policy with a learned correction term, the myopic baseline, and backtest
//! accounting.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backtest;
pub mod error;
pub mod estimation;
pub mod expansion;
pub mod fixedpoint;
pub mod linalg;
pub mod mgarch;
pub mod neural;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
