//! Moment estimates, histogram densities and Shannon differential entropies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::market_data::ReturnSeries;

/// Entropy of the standard Gaussian, ½·ln(2πe).
pub const GAUSSIAN_UNIT_ENTROPY: f64 = 1.418_938_533_204_672_7;

/// How many uniform bins a histogram gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BinRule {
    /// ⌈√T⌉ bins.
    #[default]
    Sqrt,
    /// Freedman–Diaconis width 2·IQR·T^(-1/3); falls back to `Sqrt` when the IQR is zero.
    Fd,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub bin_rule: BinRule,
    /// Rescale each column to unit variance before estimating its entropy.
    pub standardize: bool,
    pub min_obs: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { bin_rule: BinRule::Sqrt, standardize: false, min_obs: 2 }
    }
}

/// Per-asset summary statistics of a return window.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetStats {
    pub asset_ids: Vec<String>,
    /// Per-period mean return m.
    pub mean: DVector<f64>,
    /// Diagonal of `covariance`.
    pub variance: DVector<f64>,
    /// Differential entropy S in nats; negative for small-scale returns.
    pub entropy: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n_obs: usize,
}

/// Uniform-bin histogram normalized to probability mass.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramPdf {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub bin_width: f64,
}

impl HistogramPdf {
    pub fn n_bins(&self) -> usize {
        self.mass.len()
    }

    /// Index of the bin holding `x`; the last bin is closed on the right.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        let lo = self.edges[0];
        let hi = *self.edges.last().expect("histogram has edges");
        if !(x >= lo && x <= hi) {
            return None;
        }
        Some((((x - lo) / self.bin_width).floor() as usize).min(self.n_bins() - 1))
    }

    pub fn density(&self, bin: usize) -> f64 {
        self.mass[bin] / self.bin_width
    }

    pub fn max_density(&self) -> f64 {
        self.mass.iter().copied().fold(0.0, f64::max) / self.bin_width
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn bin_count(samples: &[f64], min: f64, max: f64, rule: BinRule) -> Result<usize> {
    let n = samples.len();
    let sqrt_rule = (n as f64).sqrt().ceil() as usize;
    match rule {
        BinRule::Sqrt => Ok(sqrt_rule),
        BinRule::Fixed(0) => Err(Error::DomainError("fixed bin count must be positive".into())),
        BinRule::Fixed(k) => Ok(k),
        BinRule::Fd => {
            let mut sorted = samples.to_vec();
            sorted.sort_by(f64::total_cmp);
            let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
            if iqr <= 0.0 {
                return Ok(sqrt_rule);
            }
            let width = 2.0 * iqr / (n as f64).cbrt();
            Ok((((max - min) / width).ceil() as usize).max(1))
        }
    }
}

/// Bin `samples` uniformly over `[min, max]`.
pub fn histogram(samples: &[f64], rule: BinRule) -> Result<HistogramPdf> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: samples.len() });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::DomainError("histogram samples must be finite".into()));
    }
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Err(Error::DegenerateSample);
    }
    let k = bin_count(samples, min, max, rule)?;
    let width = (max - min) / k as f64;
    let mut counts = vec![0usize; k];
    for &x in samples {
        let bin = (((x - min) / width).floor() as usize).min(k - 1);
        counts[bin] += 1;
    }
    let n = samples.len() as f64;
    let mut edges: Vec<f64> = (0..k).map(|i| min + i as f64 * width).collect();
    edges.push(max);
    Ok(HistogramPdf {
        edges,
        mass: counts.into_iter().map(|c| c as f64 / n).collect(),
        bin_width: width,
    })
}

/// Plug-in differential entropy `-Σ mass·ln(mass / width)`, skipping empty bins.
pub fn entropy_of(pdf: &HistogramPdf) -> f64 {
    pdf.mass
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| -m * (m / pdf.bin_width).ln())
        .sum()
}

/// ½·ln(2πe·variance).
pub fn gaussian_entropy(variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::DomainError(format!("variance {variance} must be positive and finite")));
    }
    Ok(GAUSSIAN_UNIT_ENTROPY + 0.5 * variance.ln())
}

/// Entropy of the unit-scale Student-t with `dof` degrees of freedom:
/// ((ν+1)/2)·[ψ((ν+1)/2) − ψ(ν/2)] + ln(√ν·B(ν/2, ½)).
pub fn student_t_entropy(dof: f64) -> Result<f64> {
    if dof.is_nan() || dof <= 0.0 {
        return Err(Error::DomainError(format!("degrees of freedom {dof} must be positive")));
    }
    if dof.is_infinite() {
        return Ok(GAUSSIAN_UNIT_ENTROPY);
    }
    let half = 0.5 * dof;
    let half_up = 0.5 * (dof + 1.0);
    Ok(half_up * (digamma(half_up) - digamma(half)) + 0.5 * dof.ln() + ln_beta(half, 0.5))
}

/// Sample covariance of the columns of a T×M matrix, divisor T−1.
pub fn sample_covariance(data: &DMatrix<f64>) -> DMatrix<f64> {
    let t = data.nrows();
    let m = data.ncols();
    let means: Vec<f64> = (0..m).map(|j| data.column(j).mean()).collect();
    let mut cov = DMatrix::zeros(m, m);
    let denom = (t - 1) as f64;
    for i in 0..m {
        for j in i..m {
            let s: f64 = (0..t)
                .map(|r| (data[(r, i)] - means[i]) * (data[(r, j)] - means[j]))
                .sum();
            cov[(i, j)] = s / denom;
            cov[(j, i)] = s / denom;
        }
    }
    cov
}

pub fn estimate_stats(series: &ReturnSeries, config: &EstimatorConfig) -> Result<AssetStats> {
    let t = series.n_periods();
    let needed = config.min_obs.max(2);
    if t < needed {
        return Err(Error::InsufficientData { needed, got: t });
    }
    let data = series.returns();
    let m = series.n_assets();
    let mean = DVector::from_fn(m, |j, _| data.column(j).mean());
    let covariance = sample_covariance(data);
    let variance = covariance.diagonal();

    let mut entropy = DVector::zeros(m);
    for j in 0..m {
        let mut col = series.column(j);
        if config.standardize {
            let sd = variance[j].sqrt();
            if sd == 0.0 {
                return Err(Error::DegenerateSample);
            }
            col.iter_mut().for_each(|x| *x /= sd);
        }
        entropy[j] = entropy_of(&histogram(&col, config.bin_rule)?);
    }

    Ok(AssetStats {
        asset_ids: series.asset_ids().to_vec(),
        mean,
        variance,
        entropy,
        covariance,
        n_obs: t,
    })
}
