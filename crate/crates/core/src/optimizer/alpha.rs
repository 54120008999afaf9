//! Temperature calibration against the market portfolio.
//!
//! With `N = p_mᵀm^ObV`, `D = p_mᵀC^ObV p_m` and `Σ = p_mᵀ diag(S) p_m`, pinning
//! the market quality ratio to one gives `α = (β(α)·N − D) / Σ`. Because β
//! depends on α through C̃ the equation is solved as a fixed point.

use serde::{Deserialize, Serialize};

use super::{quality_ratio, solve_weights, OptimizerProblem, Portfolio};
use crate::error::{Error, Result};

/// Consecutive growing damped steps treated as divergence.
const DIVERGENCE_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed,
    #[default]
    SelfConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMethod {
    /// `α ← (1−η)·α + η·α_raw`.
    #[default]
    Damped,
    /// Bisection of the cleared residual `β(α)·N − D − α·Σ` over `bracket`.
    Bisection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaConfig {
    pub mode: AlphaMode,
    /// Temperature used in fixed mode.
    pub value: f64,
    pub eta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub init: f64,
    /// Required `|QR_m − 1|` at convergence.
    pub residual_tol: f64,
    pub method: AlphaMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bracket: Option<[f64; 2]>,
    /// When damped iteration fails, search for a sign change of the cleared
    /// residual and bisect it.
    pub fallback: bool,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            mode: AlphaMode::SelfConsistent,
            value: 0.0,
            eta: 0.5,
            tol: 1e-8,
            max_iter: 500,
            init: 0.0,
            residual_tol: 1e-6,
            method: AlphaMethod::Damped,
            bracket: None,
            fallback: true,
        }
    }
}

impl AlphaConfig {
    pub fn fixed(value: f64) -> Self {
        Self { mode: AlphaMode::Fixed, value, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlphaStep {
    pub alpha: f64,
    pub beta: f64,
    pub qr_market: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSolveReport {
    pub alpha: f64,
    pub iterations: usize,
    /// `|QR_m − 1|`; when the market risk vanishes at the fixed point the
    /// cleared residual `|β·N − D − α·Σ| / (|D| + |α·Σ|)` is reported instead.
    pub residual: f64,
    pub converged: bool,
    pub qr_market: Option<f64>,
    /// Method that produced `alpha`.
    pub method: AlphaMethod,
    pub trace: Vec<AlphaStep>,
}

struct MarketTerms {
    profit: f64,
    quad: f64,
    entropic: f64,
}

impl MarketTerms {
    fn of(problem: &OptimizerProblem) -> Result<Self> {
        let pm = &problem.market_weights;
        let profit = pm.dot(&problem.view.means);
        let quad = (pm.transpose() * &problem.view.cov * pm)[(0, 0)];
        let entropic: f64 = pm.iter().zip(problem.entropies.iter()).map(|(p, s)| s * p * p).sum();
        if entropic == 0.0 {
            return Err(Error::ZeroEntropyQuadratic);
        }
        Ok(Self { profit, quad, entropic })
    }

    fn alpha_raw(&self, beta: f64) -> f64 {
        (beta * self.profit - self.quad) / self.entropic
    }

    fn cleared(&self, alpha: f64, beta: f64) -> f64 {
        beta * self.profit - self.quad - alpha * self.entropic
    }

    fn residual(&self, alpha: f64, beta: f64) -> f64 {
        let risk = self.quad + alpha * self.entropic;
        let scale = self.quad.abs() + (alpha * self.entropic).abs();
        let g = self.cleared(alpha, beta).abs();
        if risk.abs() >= 1e-8 * scale && risk.abs() >= super::ZERO_RISK {
            g / risk.abs()
        } else if scale > 0.0 {
            g / scale
        } else {
            g
        }
    }
}

fn market_qr(problem: &OptimizerProblem, alpha: f64, beta: f64) -> Option<f64> {
    quality_ratio(&problem.market_weights, beta, &problem.view, alpha, &problem.entropies).ok()
}

/// Self-consistent temperature: iterate until the market quality ratio is one.
pub fn solve_alpha(problem: &OptimizerProblem, config: &AlphaConfig) -> Result<(Portfolio, AlphaSolveReport)> {
    let terms = MarketTerms::of(problem)?;
    match config.method {
        AlphaMethod::Bisection => {
            let [lo, hi] = config
                .bracket
                .ok_or_else(|| Error::InvalidSpec("bisection needs an alpha bracket".into()))?;
            let mut trace = Vec::new();
            bisection(problem, config, &terms, lo, hi, &mut trace)
        }
        AlphaMethod::Damped => {
            let mut trace = Vec::new();
            let failure = match damped(problem, config, &terms, &mut trace) {
                Ok(done) => return Ok(done),
                Err(e) if trace.is_empty() => return Err(e),
                Err(e) => e,
            };
            if !config.fallback {
                return Err(failure);
            }
            if let Some(done) = bracket_search(problem, config, &terms, &mut trace) {
                return Ok(done);
            }
            Err(not_converged(problem, &terms, trace, AlphaMethod::Damped))
        }
    }
}

fn not_converged(problem: &OptimizerProblem, terms: &MarketTerms, trace: Vec<AlphaStep>, method: AlphaMethod) -> Error {
    let best = trace
        .iter()
        .map(|s| (s, terms.residual(s.alpha, s.beta)))
        .filter(|(_, r)| r.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let (alpha, residual, qr_market) = match best {
        Some((s, r)) => (s.alpha, r, market_qr(problem, s.alpha, s.beta)),
        None => (f64::NAN, f64::INFINITY, None),
    };
    Error::NoConvergence {
        report: Box::new(AlphaSolveReport {
            alpha,
            iterations: trace.len(),
            residual,
            converged: false,
            qr_market,
            method,
            trace,
        }),
    }
}

/// Walk outward from the starting temperature on a signed log grid and bisect
/// the first sign changes of the cleared residual that turn out to be roots.
fn bracket_search(
    problem: &OptimizerProblem,
    config: &AlphaConfig,
    terms: &MarketTerms,
    trace: &mut Vec<AlphaStep>,
) -> Option<(Portfolio, AlphaSolveReport)> {
    if let Some([lo, hi]) = config.bracket {
        return bisection(problem, config, terms, lo, hi, trace).ok();
    }
    let m = problem.n_assets() as f64;
    let diag = problem.cov.diagonal().iter().map(|v| v.abs()).sum::<f64>() / m;
    let ent = problem.entropies.iter().map(|v| v.abs()).sum::<f64>() / m;
    let scale = if diag > 0.0 && ent > 0.0 { diag / ent } else { 1.0 };
    let center = config.init;
    let eval = |a: f64, trace: &mut Vec<AlphaStep>| {
        let p = solve_weights(problem, a).ok()?;
        trace.push(AlphaStep { alpha: a, beta: p.beta, qr_market: market_qr(problem, a, p.beta) });
        Some(terms.cleared(a, p.beta)).filter(|g| g.is_finite())
    };
    let start = eval(center, trace).map(|g| (center, g));
    let mut last = [start, start];
    for j in -15..=30 {
        let step = scale * 10f64.powf(j as f64 / 5.0);
        for (side, a) in [(0, center + step), (1, center - step)] {
            let Some(g) = eval(a, trace) else {
                last[side] = None;
                continue;
            };
            if let Some((prev, g_prev)) = last[side] {
                if g_prev.signum() != g.signum() {
                    let (lo, hi) = if prev < a { (prev, a) } else { (a, prev) };
                    if let Ok(done) = bisection(problem, config, terms, lo, hi, trace) {
                        return Some(done);
                    }
                }
            }
            last[side] = Some((a, g));
        }
    }
    None
}

fn damped(
    problem: &OptimizerProblem,
    config: &AlphaConfig,
    terms: &MarketTerms,
    trace: &mut Vec<AlphaStep>,
) -> Result<(Portfolio, AlphaSolveReport)> {
    if !(config.eta > 0.0 && config.eta <= 1.0) {
        return Err(Error::DomainError(format!("damping eta = {} must lie in (0, 1]", config.eta)));
    }
    let mut alpha = config.init;
    let mut prev_step = f64::INFINITY;
    let mut growing = 0;
    for _ in 0..config.max_iter {
        let portfolio = solve_weights(problem, alpha)?;
        let beta = portfolio.beta;
        trace.push(AlphaStep { alpha, beta, qr_market: market_qr(problem, alpha, beta) });
        let residual = terms.residual(alpha, beta);
        let next = (1.0 - config.eta) * alpha + config.eta * terms.alpha_raw(beta);
        if !next.is_finite() {
            break;
        }
        if (next - alpha).abs() <= config.tol * (1.0 + alpha.abs()) && residual < config.residual_tol {
            let report = AlphaSolveReport {
                alpha,
                iterations: trace.len(),
                residual,
                converged: true,
                qr_market: market_qr(problem, alpha, beta),
                method: AlphaMethod::Damped,
                trace: std::mem::take(trace),
            };
            return Ok((portfolio, report));
        }
        let step = (next - alpha).abs();
        growing = if step > prev_step { growing + 1 } else { 0 };
        if growing >= DIVERGENCE_STEPS {
            break;
        }
        prev_step = step;
        alpha = next;
    }
    Err(not_converged(problem, terms, trace.clone(), AlphaMethod::Damped))
}

fn bisection(
    problem: &OptimizerProblem,
    config: &AlphaConfig,
    terms: &MarketTerms,
    mut lo: f64,
    mut hi: f64,
    trace: &mut Vec<AlphaStep>,
) -> Result<(Portfolio, AlphaSolveReport)> {
    if !(lo < hi) {
        return Err(Error::InvalidSpec(format!("alpha bracket [{lo}, {hi}] is empty")));
    }
    let eval = |alpha: f64, trace: &mut Vec<AlphaStep>| -> Result<(Portfolio, f64)> {
        let p = solve_weights(problem, alpha)?;
        trace.push(AlphaStep { alpha, beta: p.beta, qr_market: market_qr(problem, alpha, p.beta) });
        let g = terms.cleared(alpha, p.beta);
        Ok((p, g))
    };
    let (_, g_lo) = eval(lo, trace)?;
    let (_, g_hi) = eval(hi, trace)?;
    if g_lo.signum() == g_hi.signum() {
        return Err(Error::InvalidSpec(format!("alpha bracket [{lo}, {hi}] does not straddle a root")));
    }
    let mut best = None;
    for _ in 0..config.max_iter {
        let mid = 0.5 * (lo + hi);
        let (p, g) = eval(mid, trace)?;
        let residual = terms.residual(mid, p.beta);
        let narrow = (hi - lo) <= config.tol * (1.0 + mid.abs()) && residual < 0.1 * config.residual_tol;
        let done = narrow || g == 0.0 || mid == lo || mid == hi;
        best = Some((p, residual));
        if done {
            break;
        }
        if g.signum() == g_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (portfolio, residual) = best.expect("at least one bisection step");
    if residual < config.residual_tol {
        let report = AlphaSolveReport {
            alpha: portfolio.alpha,
            iterations: trace.len(),
            residual,
            converged: true,
            qr_market: market_qr(problem, portfolio.alpha, portfolio.beta),
            method: AlphaMethod::Bisection,
            trace: std::mem::take(trace),
        };
        Ok((portfolio, report))
    } else {
        Err(not_converged(problem, terms, trace.clone(), AlphaMethod::Bisection))
    }
}

/// Solve according to `config.mode`; the report is present in self-consistent mode.
pub fn solve_portfolio(problem: &OptimizerProblem, config: &AlphaConfig) -> Result<(Portfolio, Option<AlphaSolveReport>)> {
    match config.mode {
        AlphaMode::Fixed => Ok((solve_weights(problem, config.value)?, None)),
        AlphaMode::SelfConsistent => {
            let (p, r) = solve_alpha(problem, config)?;
            Ok((p, Some(r)))
        }
    }
}
