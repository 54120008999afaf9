//! Entropy-regularized Markowitz portfolio optimization.
//!
//! Per-asset Shannon entropies of return histories enter the covariance
//! quadratic form as a temperature-weighted diagonal penalty,
//! `C̃ = C + α·diag(S)`. Weights follow in closed form under budget and
//! target-return constraints, the temperature can be calibrated so the market
//! portfolio has unit quality ratio, and a rolling-window backtest compares
//! strategies on historical or synthetic returns.

pub mod backtest;
pub mod config;
pub mod error;
pub mod estimators;
pub mod market_data;
pub mod objective_value;
pub mod optimizer;

pub use error::{Error, ErrorClass, Result};
