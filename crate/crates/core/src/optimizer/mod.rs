//! Closed-form entropy-regularized Markowitz weights.
//!
//! Minimizes `pᵀ(C + α·diag(S))p` subject to `Σp = 1` and `pᵀm = m_c`. The
//! stationary point is `p = C̃⁻¹(γ𝟏 − βm)`; the multipliers come from the 2×2
//! Schur system in `(γ, β)` built from `C̃⁻¹𝟏` and `C̃⁻¹m`.

mod alpha;

pub use alpha::{solve_alpha, solve_portfolio, AlphaConfig, AlphaMethod, AlphaMode, AlphaSolveReport, AlphaStep};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::objective_value::ObjectiveView;

pub const DEFAULT_COND_BOUND: f64 = 1e12;

/// Denominators below this are treated as zero risk.
pub const ZERO_RISK: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerProblem {
    pub cov: DMatrix<f64>,
    pub means: DVector<f64>,
    pub entropies: DVector<f64>,
    /// Per-period target return.
    pub m_c: f64,
    pub market_weights: DVector<f64>,
    /// Statistics used for risk and quality ratio.
    pub view: ObjectiveView,
    pub cond_bound: f64,
}

impl OptimizerProblem {
    pub fn new(
        cov: DMatrix<f64>,
        means: DVector<f64>,
        entropies: DVector<f64>,
        m_c: f64,
        market_weights: DVector<f64>,
        view: ObjectiveView,
    ) -> Result<Self> {
        let m = means.len();
        if m == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if cov.nrows() != m
            || cov.ncols() != m
            || entropies.len() != m
            || market_weights.len() != m
            || view.cov.nrows() != m
            || view.cov.ncols() != m
            || view.means.len() != m
        {
            return Err(Error::DimensionMismatch(format!("optimizer inputs must all describe {m} assets")));
        }
        check_symmetric(&cov, "covariance")?;
        if !m_c.is_finite() {
            return Err(Error::DomainError("target return must be finite".into()));
        }
        if market_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::DomainError("market weights must be nonnegative".into()));
        }
        if (market_weights.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::DomainError(format!(
                "market weights sum to {}, not 1",
                market_weights.sum()
            )));
        }
        Ok(Self { cov, means, entropies, m_c, market_weights, view, cond_bound: DEFAULT_COND_BOUND })
    }

    pub fn with_cond_bound(mut self, bound: f64) -> Self {
        self.cond_bound = bound;
        self
    }

    pub fn n_assets(&self) -> usize {
        self.means.len()
    }
}

fn check_symmetric(a: &DMatrix<f64>, what: &str) -> Result<()> {
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if !a[(i, j)].is_finite() || (a[(i, j)] - a[(j, i)]).abs() > 1e-12 {
                return Err(Error::DomainError(format!("{what} is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Warning {
    /// C̃ has eigenvalues of both signs or is negative definite; the weights are
    /// a stationary point, not a minimum.
    IndefiniteCTilde,
    NegativeRisk,
    /// Means were all equal and matched the target, so only the budget was imposed.
    ReturnConstraintReleased,
    /// Quality ratio undefined.
    ZeroRisk,
    /// `m^ObV` is constant, so the quality-ratio numerator is just β times the target.
    ConstantObjectiveMeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub weights: DVector<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub risk: f64,
    pub qr: Option<f64>,
    pub y2: f64,
    pub return_constraint_active: bool,
    pub warnings: Vec<Warning>,
}

impl Portfolio {
    pub fn condition_warning(&self) -> bool {
        self.warnings.contains(&Warning::IndefiniteCTilde)
    }
}

/// `C + α·diag(S)`.
pub fn c_tilde(cov: &DMatrix<f64>, alpha: f64, entropies: &DVector<f64>) -> DMatrix<f64> {
    let mut out = cov.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += alpha * entropies[i];
    }
    out
}

struct Factored {
    indefinite: bool,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

fn factor(a: &DMatrix<f64>, cond_bound: f64) -> Result<Factored> {
    let eigenvalues = a.symmetric_eigenvalues();
    let abs_max = eigenvalues.iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
    let abs_min = eigenvalues.iter().fold(f64::INFINITY, |acc, l| acc.min(l.abs()));
    if !(abs_max > 0.0) || abs_min <= abs_max * f64::EPSILON * a.nrows() as f64 {
        return Err(Error::SingularMatrix);
    }
    let condition = abs_max / abs_min;
    if condition > cond_bound {
        return Err(Error::IllConditioned { condition, bound: cond_bound });
    }
    let indefinite = eigenvalues.iter().any(|&l| l < 0.0);
    Ok(Factored { indefinite, lu: a.clone().lu() })
}

impl Factored {
    fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu.solve(b).ok_or(Error::SingularMatrix)
    }
}

/// Σ pᵢ mᵢ.
pub fn portfolio_return(weights: &DVector<f64>, means: &DVector<f64>) -> f64 {
    weights.dot(means)
}

/// `pᵀC^ObV p + α·Σ Sᵢpᵢ²`.
pub fn portfolio_risk(weights: &DVector<f64>, view: &ObjectiveView, alpha: f64, entropies: &DVector<f64>) -> f64 {
    let quad = (weights.transpose() * &view.cov * weights)[(0, 0)];
    let entropic: f64 = weights.iter().zip(entropies.iter()).map(|(p, s)| s * p * p).sum();
    quad + alpha * entropic
}

/// `β·(pᵀm^ObV) / risk`.
pub fn quality_ratio(
    weights: &DVector<f64>,
    beta: f64,
    view: &ObjectiveView,
    alpha: f64,
    entropies: &DVector<f64>,
) -> Result<f64> {
    let risk = portfolio_risk(weights, view, alpha, entropies);
    if risk.abs() < ZERO_RISK {
        return Err(Error::ZeroRisk);
    }
    Ok(beta * weights.dot(&view.means) / risk)
}

/// Weight concentration `Σ|pᵢ|^q`; `1/M` for equal weights at `q = 2`.
pub fn diversification_y(weights: &DVector<f64>, q: f64) -> Result<f64> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::DomainError(format!("exponent q = {q} must be positive")));
    }
    let integer = q.fract() == 0.0;
    if !integer && weights.iter().any(|&w| w < 0.0) {
        return Err(Error::DomainError("non-integer q needs nonnegative weights".into()));
    }
    Ok(if integer && q <= i32::MAX as f64 {
        weights.iter().map(|w| w.abs().powi(q as i32)).sum()
    } else {
        weights.iter().map(|w| w.abs().powf(q)).sum()
    })
}

/// `pᵢ = (1/Dᵢ) / Σⱼ 1/Dⱼ`.
pub fn inverse_variance_weights(variances: &DVector<f64>) -> Result<DVector<f64>> {
    if variances.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if let Some(v) = variances.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::DomainError(format!("variance {v} must be positive")));
    }
    let inv = variances.map(|v| 1.0 / v);
    let z = inv.sum();
    Ok(inv / z)
}

/// `C⁻¹𝟏 / (𝟏ᵀC⁻¹𝟏)`.
pub fn min_variance_weights(cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
        return Err(Error::DimensionMismatch("covariance must be square and nonempty".into()));
    }
    let f = factor(cov, f64::INFINITY)?;
    let u = f.solve(&DVector::from_element(cov.nrows(), 1.0))?;
    let z = u.sum();
    if z == 0.0 {
        return Err(Error::SingularMatrix);
    }
    Ok(u / z)
}

/// Solutions of `C̃x = 𝟏` and `C̃x = m` plus the scalars of the Schur system.
struct Projections {
    ones_sol: DVector<f64>,
    mean_sol: DVector<f64>,
    /// 𝟏ᵀC̃⁻¹𝟏
    a: f64,
    /// 𝟏ᵀC̃⁻¹m
    b: f64,
    /// mᵀC̃⁻¹m
    c: f64,
    indefinite: bool,
}

fn projections(problem: &OptimizerProblem, alpha: f64) -> Result<Projections> {
    if !alpha.is_finite() {
        return Err(Error::DomainError(format!("alpha = {alpha} is not finite")));
    }
    let ct = c_tilde(&problem.cov, alpha, &problem.entropies);
    let f = factor(&ct, problem.cond_bound)?;
    let ones = DVector::from_element(problem.n_assets(), 1.0);
    let ones_sol = f.solve(&ones)?;
    let mean_sol = f.solve(&problem.means)?;
    let a = ones_sol.sum();
    let b = 0.5 * (mean_sol.sum() + problem.means.dot(&ones_sol));
    let c = problem.means.dot(&mean_sol);
    Ok(Projections { ones_sol, mean_sol, a, b, c, indefinite: f.indefinite })
}

fn finish(problem: &OptimizerProblem, alpha: f64, weights: DVector<f64>, beta: f64, gamma: f64, mut warnings: Vec<Warning>) -> Portfolio {
    let risk = portfolio_risk(&weights, &problem.view, alpha, &problem.entropies);
    let qr = quality_ratio(&weights, beta, &problem.view, alpha, &problem.entropies).ok();
    if risk < 0.0 {
        warnings.push(Warning::NegativeRisk);
    }
    if qr.is_none() {
        warnings.push(Warning::ZeroRisk);
    }
    let first = problem.view.means[0];
    if problem.view.means.iter().all(|&m| m == first) {
        warnings.push(Warning::ConstantObjectiveMeans);
    }
    let y2 = diversification_y(&weights, 2.0).expect("q = 2 is valid");
    let return_constraint_active = !warnings.contains(&Warning::ReturnConstraintReleased);
    Portfolio { weights, alpha, beta, gamma, risk, qr, y2, return_constraint_active, warnings }
}

fn budget_only(problem: &OptimizerProblem, alpha: f64, proj: Projections, mut warnings: Vec<Warning>) -> Result<Portfolio> {
    if proj.a == 0.0 {
        return Err(Error::SingularMatrix);
    }
    warnings.push(Warning::ReturnConstraintReleased);
    let gamma = 1.0 / proj.a;
    let weights = &proj.ones_sol * gamma;
    Ok(finish(problem, alpha, weights, 0.0, gamma, warnings))
}

/// Weights at temperature `alpha` under both the budget and return constraints.
///
/// When every mean is equal the return constraint is either redundant (target
/// equals that mean; the budget-only solution is returned and flagged) or
/// infeasible.
pub fn solve_weights(problem: &OptimizerProblem, alpha: f64) -> Result<Portfolio> {
    let proj = projections(problem, alpha)?;
    let mut warnings = Vec::new();
    if proj.indefinite {
        warnings.push(Warning::IndefiniteCTilde);
    }

    let det = proj.b * proj.b - proj.a * proj.c;
    let scale = proj.b * proj.b + (proj.a * proj.c).abs();
    if det.abs() <= 1e-12 * scale || scale == 0.0 {
        let level = proj.b / proj.a;
        let m_c = problem.m_c;
        if (m_c - level).abs() <= 1e-9 * (m_c.abs() + level.abs()) + 1e-15 {
            return budget_only(problem, alpha, proj, warnings);
        }
        return Err(Error::InfeasibleConstraints);
    }

    // [a  -b] [γ]   [1  ]
    // [b  -c] [β] = [m_c]
    let solve2 = |r1: f64, r2: f64| ((proj.b * r2 - proj.c * r1) / det, (proj.a * r2 - proj.b * r1) / det);
    let (mut gamma, mut beta) = solve2(1.0, problem.m_c);
    let mut weights = &proj.ones_sol * gamma - &proj.mean_sol * beta;

    // one step of refinement on the constraint residuals
    let r1 = 1.0 - weights.sum();
    let r2 = problem.m_c - weights.dot(&problem.means);
    let (dg, db) = solve2(r1, r2);
    gamma += dg;
    beta += db;
    weights += &proj.ones_sol * dg - &proj.mean_sol * db;

    Ok(finish(problem, alpha, weights, beta, gamma, warnings))
}

/// Weights under the budget constraint only (`β = 0`).
pub fn solve_min_risk(problem: &OptimizerProblem, alpha: f64) -> Result<Portfolio> {
    let proj = projections(problem, alpha)?;
    let warnings = if proj.indefinite { vec![Warning::IndefiniteCTilde] } else { Vec::new() };
    budget_only(problem, alpha, proj, warnings)
}
