//! Objective-value statistics.
//!
//! A return density `P(x) = Z⁻¹·exp(−w(x)/d)` defines the objective value
//! `w(x) = −d·ln(Z·P(x))`. The histogram density stands in for `P`, and `Z` is
//! fixed so the modal bin maps to `w = 0`. Each asset's objective values are
//! then rescaled multiplicatively to a common mean, and their covariance and
//! means replace `C` and `m` wherever risk and quality ratios are reported.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{histogram, sample_covariance, AssetStats, BinRule, HistogramPdf};
use crate::market_data::ReturnSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObvMode {
    /// Pass raw `C` and `m` through unchanged.
    Identity,
    #[default]
    Obv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObvConfig {
    pub mode: ObvMode,
    pub d: f64,
    pub target: f64,
}

impl Default for ObvConfig {
    fn default() -> Self {
        Self { mode: ObvMode::Obv, d: 1.0, target: 1.0 }
    }
}

impl ObvConfig {
    pub fn identity() -> Self {
        Self { mode: ObvMode::Identity, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveView {
    pub mode: ObvMode,
    pub cov: DMatrix<f64>,
    pub means: DVector<f64>,
    pub scale_d: f64,
    pub normalization_target: f64,
}

impl ObjectiveView {
    pub fn identity(stats: &AssetStats) -> Self {
        Self {
            mode: ObvMode::Identity,
            cov: stats.covariance.clone(),
            means: stats.mean.clone(),
            scale_d: 1.0,
            normalization_target: 1.0,
        }
    }

    pub fn n_assets(&self) -> usize {
        self.means.len()
    }
}

/// T×M matrix of `w_i(x_t) = d·ln(max density_i) − d·ln(density_i(x_t))`.
pub fn objective_values(series: &ReturnSeries, pdfs: &[HistogramPdf], d: f64) -> Result<DMatrix<f64>> {
    if pdfs.len() != series.n_assets() {
        return Err(Error::DimensionMismatch(format!(
            "{} histograms for {} assets",
            pdfs.len(),
            series.n_assets()
        )));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::DomainError(format!("objective scale d = {d} must be positive")));
    }
    let data = series.returns();
    let mut out = DMatrix::zeros(series.n_periods(), series.n_assets());
    for (j, pdf) in pdfs.iter().enumerate() {
        let ln_mode = pdf.max_density().ln();
        for t in 0..series.n_periods() {
            let x = data[(t, j)];
            let bin = pdf.bin_of(x).ok_or(Error::OutOfSupport { value: x })?;
            let density = pdf.density(bin);
            if density == 0.0 {
                return Err(Error::OutOfSupport { value: x });
            }
            out[(t, j)] = d * (ln_mode - density.ln());
        }
    }
    Ok(out)
}

pub fn build_view(
    series: &ReturnSeries,
    stats: &AssetStats,
    config: &ObvConfig,
    bin_rule: BinRule,
) -> Result<ObjectiveView> {
    if stats.mean.len() != series.n_assets() {
        return Err(Error::DimensionMismatch("stats and series disagree on asset count".into()));
    }
    match config.mode {
        ObvMode::Identity => Ok(ObjectiveView {
            scale_d: config.d,
            normalization_target: config.target,
            ..ObjectiveView::identity(stats)
        }),
        ObvMode::Obv => {
            if !(config.target > 0.0 && config.target.is_finite()) {
                return Err(Error::DomainError(format!(
                    "normalization target {} must be positive",
                    config.target
                )));
            }
            let pdfs = (0..series.n_assets())
                .map(|j| histogram(&series.column(j), bin_rule))
                .collect::<Result<Vec<_>>>()?;
            let mut values = objective_values(series, &pdfs, config.d)?;
            for j in 0..values.ncols() {
                let mean = values.column(j).mean();
                if mean == 0.0 {
                    return Err(Error::DegenerateObjective { asset: j });
                }
                let factor = config.target / mean;
                values.column_mut(j).iter_mut().for_each(|w| *w *= factor);
            }
            Ok(ObjectiveView {
                mode: ObvMode::Obv,
                cov: sample_covariance(&values),
                means: DVector::from_element(values.ncols(), config.target),
                scale_d: config.d,
                normalization_target: config.target,
            })
        }
    }
}
