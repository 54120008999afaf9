//! The run configuration shared by every command.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backtest::{BacktestConfig, FailurePolicy, Strategy};
use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::market_data::{ReturnKind, DEFAULT_PERIODS_PER_YEAR};
use crate::objective_value::ObvConfig;
use crate::optimizer::{AlphaConfig, DEFAULT_COND_BOUND};

/// Reference portfolio used to calibrate the temperature.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketWeights {
    #[default]
    Equal,
    /// CSV with header `asset,weight`; weights (e.g. capitalizations) are normalized.
    File(PathBuf),
    /// Weights in asset order, normalized to sum to one.
    Weights(Vec<f64>),
}

impl MarketWeights {
    pub fn resolve(&self, asset_ids: &[String]) -> Result<DVector<f64>> {
        let m = asset_ids.len();
        let raw = match self {
            MarketWeights::Equal => return Ok(DVector::from_element(m, 1.0 / m as f64)),
            MarketWeights::Weights(w) => w.clone(),
            MarketWeights::File(path) => read_weight_file(path, asset_ids)?,
        };
        if raw.len() != m {
            return Err(Error::DimensionMismatch(format!("{} market weights for {m} assets", raw.len())));
        }
        if raw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::DomainError("market weights must be nonnegative".into()));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::DomainError("market weights sum to zero".into()));
        }
        Ok(DVector::from_iterator(m, raw.into_iter().map(|w| w / total)))
    }

    /// Inline file-based weights so the configuration no longer depends on the file.
    pub fn materialize(&self, asset_ids: &[String]) -> Result<MarketWeights> {
        Ok(match self {
            MarketWeights::File(_) => MarketWeights::Weights(self.resolve(asset_ids)?.iter().copied().collect()),
            other => other.clone(),
        })
    }
}

fn read_weight_file(path: &Path, asset_ids: &[String]) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::malformed(1, None, format!("{other:?}")),
    })?;
    let mut weights = vec![None; asset_ids.len()];
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::malformed(line, None, e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::malformed(line, None, "expected `asset,weight`"));
        }
        let idx = asset_ids
            .iter()
            .position(|id| id == &rec[0])
            .ok_or_else(|| Error::malformed(line, Some("asset"), format!("unknown asset `{}`", &rec[0])))?;
        let w: f64 = rec[1]
            .parse()
            .map_err(|_| Error::malformed(line, Some("weight"), format!("`{}` is not a number", &rec[1])))?;
        weights[idx] = Some(w);
    }
    weights
        .into_iter()
        .zip(asset_ids)
        .map(|(w, id)| w.ok_or_else(|| Error::InvalidSpec(format!("market weight file has no entry for `{id}`"))))
        .collect()
}

/// Which statistics feed the weight solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsFrom {
    /// Raw `C` and `m`.
    #[default]
    Raw,
    /// `C^ObV` and `m^ObV` from the objective view.
    Obv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub m_c_annual: f64,
    pub alpha: AlphaConfig,
    pub market_weights: MarketWeights,
    pub cond_bound: f64,
    pub weights_from: WeightsFrom,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            m_c_annual: 0.20,
            alpha: AlphaConfig::default(),
            market_weights: MarketWeights::Equal,
            cond_bound: DEFAULT_COND_BOUND,
            weights_from: WeightsFrom::Raw,
        }
    }
}

impl OptimizerSettings {
    pub fn m_c_per_period(&self, periods_per_year: u32) -> f64 {
        self.m_c_annual / periods_per_year as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSettings {
    pub window: usize,
    pub rebalance_every: usize,
    pub strategies: Vec<Strategy>,
    pub failure_policy: FailurePolicy,
}

impl Default for BacktestSettings {
    fn default() -> Self {
        Self {
            window: 75,
            rebalance_every: 1,
            strategies: vec![Strategy::Equal, Strategy::MarkowitzRidge, Strategy::EntropyFull],
            failure_policy: FailurePolicy::Abort,
        }
    }
}

/// Everything a command needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub periods_per_year: u32,
    pub returns: ReturnKind,
    pub m_c_annual: f64,
    pub alpha: AlphaConfig,
    pub market_weights: MarketWeights,
    pub cond_bound: f64,
    pub weights_from: WeightsFrom,
    pub estimator: EstimatorConfig,
    pub obv: ObvConfig,
    pub backtest: BacktestSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerSettings::default();
        Self {
            periods_per_year: DEFAULT_PERIODS_PER_YEAR,
            returns: ReturnKind::Simple,
            m_c_annual: opt.m_c_annual,
            alpha: opt.alpha,
            market_weights: opt.market_weights,
            cond_bound: opt.cond_bound,
            weights_from: opt.weights_from,
            estimator: EstimatorConfig::default(),
            obv: ObvConfig::default(),
            backtest: BacktestSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Apply `key.sub=value` overrides.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        apply_overrides(&mut doc, overrides)?;
        Ok(serde_json::from_value(doc)?)
    }

    pub fn optimizer(&self) -> OptimizerSettings {
        OptimizerSettings {
            m_c_annual: self.m_c_annual,
            alpha: self.alpha.clone(),
            market_weights: self.market_weights.clone(),
            cond_bound: self.cond_bound,
            weights_from: self.weights_from,
        }
    }

    pub fn backtest_config(&self) -> BacktestConfig {
        BacktestConfig {
            window: self.backtest.window,
            rebalance_every: self.backtest.rebalance_every,
            strategies: self.backtest.strategies.clone(),
            failure_policy: self.backtest.failure_policy,
            optimizer: self.optimizer(),
            estimator: self.estimator.clone(),
            obv: self.obv.clone(),
        }
    }
}

/// Apply `key.sub=value` overrides to a JSON document in place. Values are
/// parsed as JSON, falling back to a plain string.
pub fn apply_overrides<S: AsRef<str>>(doc: &mut Value, overrides: &[S]) -> Result<()> {
    for raw in overrides {
        let raw = raw.as_ref();
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| Error::InvalidSpec(format!("override `{raw}` is not key=value")))?;
        let value: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
        set_path(doc, key, value)?;
    }
    Ok(())
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::InvalidSpec(format!("`{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_owned()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::InvalidSpec("empty override key".into()))
}
