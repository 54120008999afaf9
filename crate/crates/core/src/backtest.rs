//! Rolling-window evaluation and parameter sweeps.
//!
//! At every rebalance period `t` statistics are estimated on returns
//! `[t − window, t)`, each strategy picks weights, and the weights are held
//! until the next rebalance. Portfolio value compounds as
//! `V_{k+1} = V_k·(1 + pᵀr)` starting from `V_0 = 1`.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{OptimizerSettings, WeightsFrom};
use crate::error::{Error, ErrorClass, Result};
use crate::estimators::{estimate_stats, AssetStats, EstimatorConfig};
use crate::market_data::ReturnSeries;
use crate::objective_value::{build_view, ObjectiveView, ObvConfig};
use crate::optimizer::{quality_ratio, solve_portfolio, AlphaMode, OptimizerProblem, Portfolio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// 1/M in every asset.
    Equal,
    /// Uniform ridge: entropies replaced by ones.
    MarkowitzRidge,
    /// Per-asset estimated entropies.
    EntropyFull,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Equal => "equal",
            Strategy::MarkowitzRidge => "markowitz_ridge",
            Strategy::EntropyFull => "entropy_full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    Abort,
    /// Keep the previous weights (equal weights before the first success).
    SkipAndHold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub window: usize,
    pub rebalance_every: usize,
    pub strategies: Vec<Strategy>,
    pub failure_policy: FailurePolicy,
    pub optimizer: OptimizerSettings,
    pub estimator: EstimatorConfig,
    pub obv: ObvConfig,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        crate::config::RunConfig::default().backtest_config()
    }
}

impl BacktestConfig {
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    fn validate(&self, series: &ReturnSeries) -> Result<()> {
        let m = series.n_assets();
        if self.window < m + 2 {
            return Err(Error::InvalidSpec(format!(
                "window {} must be at least assets + 2 = {}",
                self.window,
                m + 2
            )));
        }
        if self.rebalance_every == 0 {
            return Err(Error::InvalidSpec("rebalance_every must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidSpec("no strategies selected".into()));
        }
        if series.n_periods() <= self.window + 1 {
            return Err(Error::InsufficientData { needed: self.window + 2, got: series.n_periods() });
        }
        Ok(())
    }
}

/// Statistics shared by all strategies at one rebalance.
#[derive(Debug, Clone)]
pub struct WindowEstimate {
    pub stats: AssetStats,
    pub view: ObjectiveView,
}

pub fn estimate_window(series: &ReturnSeries, config: &BacktestConfig, end: usize) -> Result<WindowEstimate> {
    let window = series.slice(end - config.window, end)?;
    let stats = estimate_stats(&window, &config.estimator)?;
    let view = build_view(&window, &stats, &config.obv, config.estimator.bin_rule)?;
    Ok(WindowEstimate { stats, view })
}

/// Optimizer inputs for an optimizing strategy.
pub fn strategy_problem(
    strategy: Strategy,
    estimate: &WindowEstimate,
    settings: &OptimizerSettings,
    periods_per_year: u32,
) -> Result<OptimizerProblem> {
    let stats = &estimate.stats;
    let entropies = match strategy {
        Strategy::MarkowitzRidge => DVector::from_element(stats.mean.len(), 1.0),
        _ => stats.entropy.clone(),
    };
    let (cov, means) = match settings.weights_from {
        WeightsFrom::Raw => (stats.covariance.clone(), stats.mean.clone()),
        WeightsFrom::Obv => (estimate.view.cov.clone(), estimate.view.means.clone()),
    };
    let market = settings.market_weights.resolve(&stats.asset_ids)?;
    Ok(OptimizerProblem::new(
        cov,
        means,
        entropies,
        settings.m_c_per_period(periods_per_year),
        market,
        estimate.view.clone(),
    )?
    .with_cond_bound(settings.cond_bound))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RebalanceRecord {
    pub period: usize,
    pub date: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub qr: Option<f64>,
    pub qr_market: Option<f64>,
    /// `None` for fixed temperature or non-optimizing strategies.
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    /// Index into the return series of each evaluated period.
    pub periods: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub returns: Vec<f64>,
    /// `values[0] = 1`, one more entry than `returns`.
    pub values: Vec<f64>,
    pub mean_return: f64,
    pub return_variance: f64,
    pub annualized_profit: Option<f64>,
    pub rebalances: Vec<RebalanceRecord>,
    pub failed_windows: usize,
    pub nonconverged_windows: usize,
}

impl StrategyReport {
    /// Quality ratios of successfully solved (and, in self-consistent mode, converged) windows.
    pub fn qr_series(&self) -> Vec<f64> {
        self.rebalances
            .iter()
            .filter(|r| r.failure.is_none() && r.converged != Some(false))
            .filter_map(|r| r.qr)
            .collect()
    }

    pub fn alpha_series(&self) -> Vec<Option<f64>> {
        self.rebalances.iter().map(|r| r.alpha).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    pub data_fingerprint: String,
    pub seed: Option<u64>,
    pub n_periods: usize,
    pub n_assets: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub strategies: Vec<StrategyReport>,
    pub metadata: ReportMetadata,
}

impl BacktestReport {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategyReport> {
        self.strategies.iter().find(|r| r.strategy == s)
    }
}

/// `(1 + r)^periods − 1`.
pub fn annualize(per_period_profit: f64, periods_per_year: u32) -> Result<f64> {
    if periods_per_year == 0 {
        return Err(Error::DomainError("periods_per_year must be positive".into()));
    }
    if !(per_period_profit > -1.0) {
        return Err(Error::DomainError(format!("per-period profit {per_period_profit} must exceed -1")));
    }
    Ok((periods_per_year as f64 * per_period_profit.ln_1p()).exp_m1())
}

struct Track {
    strategy: Strategy,
    current: Option<DVector<f64>>,
    report: StrategyReport,
}

fn window_error(series: &ReturnSeries, period: usize, err: Error) -> Error {
    Error::Window { period, date: series.date_label(period), source: Box::new(err) }
}

fn solved_record(period: usize, date: Option<String>, pf: &Portfolio, qr_market: Option<f64>, report: Option<(bool, usize)>) -> RebalanceRecord {
    RebalanceRecord {
        period,
        date,
        alpha: Some(pf.alpha),
        beta: Some(pf.beta),
        qr: pf.qr,
        qr_market,
        converged: report.map(|r| r.0),
        iterations: report.map(|r| r.1),
        failure: None,
    }
}

impl RebalanceRecord {
    fn empty(period: usize) -> Self {
        Self {
            period,
            date: None,
            alpha: None,
            beta: None,
            qr: None,
            qr_market: None,
            converged: None,
            iterations: None,
            failure: None,
        }
    }
}

fn failed_record(period: usize, date: Option<String>, err: &Error) -> RebalanceRecord {
    let (alpha, converged, iterations) = match err {
        Error::NoConvergence { report } => (Some(report.alpha), Some(false), Some(report.iterations)),
        _ => (None, None, None),
    };
    RebalanceRecord {
        period,
        date,
        alpha,
        beta: None,
        qr: None,
        qr_market: None,
        converged,
        iterations,
        failure: Some(err.to_string()),
    }
}

pub fn run_backtest(series: &ReturnSeries, config: &BacktestConfig) -> Result<BacktestReport> {
    config.validate(series)?;
    let m = series.n_assets();
    let ppy = series.periods_per_year();
    let equal = DVector::from_element(m, 1.0 / m as f64);
    let needs_estimate = m > 1 && config.strategies.iter().any(|s| *s != Strategy::Equal);

    let mut tracks: Vec<Track> = config
        .strategies
        .iter()
        .map(|&strategy| Track {
            strategy,
            current: None,
            report: StrategyReport {
                strategy,
                periods: Vec::new(),
                weights: Vec::new(),
                returns: Vec::new(),
                values: vec![1.0],
                mean_return: 0.0,
                return_variance: 0.0,
                annualized_profit: None,
                rebalances: Vec::new(),
                failed_windows: 0,
                nonconverged_windows: 0,
            },
        })
        .collect();

    for t in config.window..series.n_periods() {
        if (t - config.window) % config.rebalance_every == 0 {
            let date = series.date_label(t);
            let estimate = if needs_estimate {
                match estimate_window(series, config, t) {
                    Ok(e) => Some(Ok(e)),
                    Err(err) if config.failure_policy == FailurePolicy::Abort => {
                        return Err(window_error(series, t, err));
                    }
                    Err(err) => Some(Err(err.to_string())),
                }
            } else {
                None
            };
            for track in tracks.iter_mut() {
                let outcome = match (&estimate, track.strategy) {
                    (Some(Err(msg)), s) if s != Strategy::Equal => Err(Error::DomainError(msg.clone())),
                    (Some(Ok(e)), s) => pick_weights(s, m, &equal, Some(e), config, ppy),
                    (_, s) => pick_weights(s, m, &equal, None, config, ppy),
                };
                match outcome {
                    Ok((weights, record)) => {
                        let mut record = record.unwrap_or_else(|| RebalanceRecord::empty(t));
                        record.period = t;
                        record.date = date.clone();
                        track.current = Some(weights);
                        track.report.rebalances.push(record);
                    }
                    Err(err) => {
                        if config.failure_policy == FailurePolicy::Abort {
                            return Err(window_error(series, t, err));
                        }
                        let record = failed_record(t, date.clone(), &err);
                        if record.converged == Some(false) {
                            track.report.nonconverged_windows += 1;
                        }
                        track.report.failed_windows += 1;
                        track.report.rebalances.push(record);
                        if track.current.is_none() {
                            track.current = Some(equal.clone());
                        }
                    }
                }
            }
        }

        let r = series.row(t);
        for track in tracks.iter_mut() {
            let w = track.current.as_ref().expect("weights set at first rebalance");
            let ret: f64 = w.iter().zip(r.iter()).map(|(a, b)| a * b).sum();
            let rep = &mut track.report;
            let prev = *rep.values.last().expect("values start at 1");
            rep.values.push(prev * (1.0 + ret));
            rep.returns.push(ret);
            rep.weights.push(w.iter().copied().collect());
            rep.periods.push(t);
        }
    }

    let strategies = tracks
        .into_iter()
        .map(|track| {
            let mut rep = track.report;
            let n = rep.returns.len() as f64;
            rep.mean_return = rep.returns.iter().sum::<f64>() / n;
            rep.return_variance = if n > 1.0 {
                rep.returns.iter().map(|x| (x - rep.mean_return).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let terminal = *rep.values.last().expect("nonempty");
            rep.annualized_profit = if terminal > 0.0 {
                annualize(terminal.powf(1.0 / n) - 1.0, ppy).ok()
            } else {
                None
            };
            rep
        })
        .collect();

    Ok(BacktestReport {
        strategies,
        metadata: ReportMetadata {
            config_hash: config.hash(),
            data_fingerprint: series.fingerprint(),
            seed: None,
            n_periods: series.n_periods(),
            n_assets: m,
            window: config.window,
        },
    })
}

type Picked = (DVector<f64>, Option<RebalanceRecord>);

fn pick_weights(
    strategy: Strategy,
    m: usize,
    equal: &DVector<f64>,
    estimate: Option<&WindowEstimate>,
    config: &BacktestConfig,
    ppy: u32,
) -> Result<Picked> {
    if strategy == Strategy::Equal || m == 1 {
        return Ok((equal.clone(), None));
    }
    let estimate = estimate.expect("estimate computed for optimizing strategies");
    let problem = strategy_problem(strategy, estimate, &config.optimizer, ppy)?;
    let (pf, report) = solve_portfolio(&problem, &config.optimizer.alpha)?;
    let qr_market = quality_ratio(&problem.market_weights, pf.beta, &problem.view, pf.alpha, &problem.entropies).ok();
    let conv = report.map(|r| (r.converged, r.iterations));
    let record = solved_record(0, None, &pf, qr_market, conv);
    Ok((pf.weights, Some(record)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSweepRow {
    pub alpha: f64,
    pub mean_profit: Option<f64>,
    pub profit_variance: Option<f64>,
    pub annualized_profit: Option<f64>,
    pub mean_qr: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub error_class: Option<ErrorClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSweepRow {
    pub m_c: f64,
    pub mean_profit: Option<f64>,
    pub annualized_profit: Option<f64>,
    pub profit_variance: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub error_class: Option<ErrorClass>,
}

fn entropy_only(config: &BacktestConfig) -> BacktestConfig {
    BacktestConfig { strategies: vec![Strategy::EntropyFull], ..config.clone() }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// One fixed-temperature backtest of the entropy strategy per grid point.
pub fn sweep_alpha(series: &ReturnSeries, config: &BacktestConfig, alphas: &[f64]) -> Result<Vec<AlphaSweepRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidSpec("alpha grid is empty".into()));
    }
    Ok(alphas
        .par_iter()
        .map(|&alpha| {
            let mut cfg = entropy_only(config);
            cfg.optimizer.alpha.mode = AlphaMode::Fixed;
            cfg.optimizer.alpha.value = alpha;
            match run_backtest(series, &cfg) {
                Ok(rep) => {
                    let s = &rep.strategies[0];
                    AlphaSweepRow {
                        alpha,
                        mean_profit: Some(s.mean_return),
                        profit_variance: Some(s.return_variance),
                        annualized_profit: s.annualized_profit,
                        mean_qr: mean(&s.qr_series()),
                        error: None,
                        error_class: None,
                    }
                }
                Err(e) => AlphaSweepRow {
                    alpha,
                    mean_profit: None,
                    profit_variance: None,
                    annualized_profit: None,
                    mean_qr: None,
                    error: Some(e.to_string()),
                    error_class: Some(e.class()),
                },
            }
        })
        .collect())
}

/// One backtest of the entropy strategy per annual target return.
pub fn sweep_mc(series: &ReturnSeries, config: &BacktestConfig, mc_grid: &[f64]) -> Result<Vec<McSweepRow>> {
    if mc_grid.is_empty() {
        return Err(Error::InvalidSpec("m_c grid is empty".into()));
    }
    Ok(mc_grid
        .par_iter()
        .map(|&m_c| {
            let mut cfg = entropy_only(config);
            cfg.optimizer.m_c_annual = m_c;
            match run_backtest(series, &cfg) {
                Ok(rep) => {
                    let s = &rep.strategies[0];
                    McSweepRow {
                        m_c,
                        mean_profit: Some(s.mean_return),
                        annualized_profit: s.annualized_profit,
                        profit_variance: Some(s.return_variance),
                        error: None,
                        error_class: None,
                    }
                }
                Err(e) => McSweepRow {
                    m_c,
                    mean_profit: None,
                    annualized_profit: None,
                    profit_variance: None,
                    error: Some(e.to_string()),
                    error_class: Some(e.class()),
                },
            }
        })
        .collect())
}
