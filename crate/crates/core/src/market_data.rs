//! Price ingestion, return derivation and seeded synthetic markets.

use std::io::{Read, Write};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const DEFAULT_PERIODS_PER_YEAR: u32 = 252;

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Prices as read from disk: one row per date, one column per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceTable {
    asset_ids: Vec<String>,
    dates: Vec<NaiveDate>,
    prices: DMatrix<f64>,
}

impl PriceTable {
    pub fn new(asset_ids: Vec<String>, dates: Vec<NaiveDate>, prices: DMatrix<f64>) -> Result<Self> {
        if asset_ids.is_empty() {
            return Err(Error::InvalidSpec("price table needs at least one asset".into()));
        }
        if prices.ncols() != asset_ids.len() || prices.nrows() != dates.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids, {} dates, {}x{} prices",
                asset_ids.len(),
                dates.len(),
                prices.nrows(),
                prices.ncols()
            )));
        }
        for (t, w) in dates.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::malformed(t + 3, Some("date"), format!("date {} does not follow {}", w[1], w[0])));
            }
        }
        for t in 0..prices.nrows() {
            for (j, id) in asset_ids.iter().enumerate() {
                let p = prices[(t, j)];
                if !(p.is_finite() && p > 0.0) {
                    return Err(Error::malformed(t + 2, Some(id), format!("price {p} is not strictly positive")));
                }
            }
        }
        Ok(Self { asset_ids, dates, prices })
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    /// T×M price matrix.
    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    pub fn n_rows(&self) -> usize {
        self.prices.nrows()
    }
}

/// Parse the `date,<id1>,<id2>,...` price format.
///
/// Line numbers in errors are 1-based and count the header line.
pub fn parse_prices<R: Read>(raw: R) -> Result<PriceTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(raw);
    let mut records = reader.records();

    let header = match records.next() {
        None => return Err(Error::malformed(1, None, "empty input; expected header `date,<id>,...`")),
        Some(r) => r.map_err(|e| csv_error(e, 1))?,
    };
    if header.get(0) != Some("date") {
        return Err(Error::malformed(1, None, "header must start with `date`"));
    }
    let asset_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    if asset_ids.is_empty() {
        return Err(Error::malformed(1, None, "header names no assets"));
    }
    for (j, id) in asset_ids.iter().enumerate() {
        if id.is_empty() {
            return Err(Error::malformed(1, None, format!("asset id in column {} is empty", j + 2)));
        }
        if asset_ids[..j].contains(id) {
            return Err(Error::malformed(1, Some(id), "duplicated asset id"));
        }
    }

    let m = asset_ids.len();
    let mut dates: Vec<NaiveDate> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (k, record) in records.enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| csv_error(e, line))?;
        if record.len() != m + 1 {
            return Err(Error::malformed(line, None, format!("expected {} fields, found {}", m + 1, record.len())));
        }
        let raw_date = &record[0];
        let date = NaiveDate::parse_from_str(raw_date, DATE_FORMAT)
            .map_err(|_| Error::malformed(line, Some("date"), format!("`{raw_date}` is not a YYYY-MM-DD date")))?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                let reason = if date == *prev { "duplicated date" } else { "dates out of order" };
                return Err(Error::malformed(line, Some("date"), format!("{reason}: {date} after {prev}")));
            }
        }
        dates.push(date);
        for (j, id) in asset_ids.iter().enumerate() {
            let cell = &record[j + 1];
            let price: f64 = cell
                .parse()
                .map_err(|_| Error::malformed(line, Some(id), format!("`{cell}` is not a decimal number")))?;
            if !(price.is_finite() && price > 0.0) {
                return Err(Error::malformed(line, Some(id), format!("price `{cell}` is not strictly positive")));
            }
            values.push(price);
        }
    }
    if dates.is_empty() {
        return Err(Error::malformed(2, None, "no data rows"));
    }
    let prices = DMatrix::from_row_slice(dates.len(), m, &values);
    Ok(PriceTable { asset_ids, dates, prices })
}

fn csv_error(err: csv::Error, line: usize) -> Error {
    let line = err.position().map(|p| p.line() as usize).unwrap_or(line);
    Error::malformed(line, None, err.to_string())
}

/// Write a price table in the same format `parse_prices` reads. Values use the
/// shortest decimal that round-trips.
pub fn write_prices<W: Write>(table: &PriceTable, mut out: W) -> Result<()> {
    write!(out, "date")?;
    for id in &table.asset_ids {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    for (t, date) in table.dates.iter().enumerate() {
        write!(out, "{}", date.format(DATE_FORMAT))?;
        for j in 0..table.prices.ncols() {
            write!(out, ",{}", table.prices[(t, j)])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnKind {
    #[default]
    Simple,
    Log,
}

/// Per-period returns, T×M.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    asset_ids: Vec<String>,
    returns: DMatrix<f64>,
    periods_per_year: u32,
    dates: Option<Vec<NaiveDate>>,
}

impl ReturnSeries {
    pub fn new(asset_ids: Vec<String>, returns: DMatrix<f64>, periods_per_year: u32) -> Result<Self> {
        Self::build(asset_ids, returns, periods_per_year, None)
    }

    /// Attach a calendar index; `dates[t]` is the date on which return `t` is realized.
    pub fn with_dates(mut self, dates: Vec<NaiveDate>) -> Result<Self> {
        if dates.len() != self.returns.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} dates for {} return rows",
                dates.len(),
                self.returns.nrows()
            )));
        }
        self.dates = Some(dates);
        Ok(self)
    }

    fn build(
        asset_ids: Vec<String>,
        returns: DMatrix<f64>,
        periods_per_year: u32,
        dates: Option<Vec<NaiveDate>>,
    ) -> Result<Self> {
        if periods_per_year == 0 {
            return Err(Error::DomainError("periods_per_year must be positive".into()));
        }
        if asset_ids.is_empty() || returns.ncols() == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if returns.ncols() != asset_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} return columns",
                asset_ids.len(),
                returns.ncols()
            )));
        }
        if returns.nrows() < 2 {
            return Err(Error::InsufficientData { needed: 2, got: returns.nrows() });
        }
        if let Some((idx, r)) = returns.iter().enumerate().find(|(_, r)| !(r.is_finite() && **r > -1.0)) {
            let t = idx % returns.nrows();
            let j = idx / returns.nrows();
            return Err(Error::DomainError(format!(
                "return {r} of asset {} at period {t} is not above -1",
                asset_ids[j]
            )));
        }
        Ok(Self { asset_ids, returns, periods_per_year, dates })
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    /// T×M matrix of returns.
    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn periods_per_year(&self) -> u32 {
        self.periods_per_year
    }

    pub fn dates(&self) -> Option<&[NaiveDate]> {
        self.dates.as_deref()
    }

    pub fn n_periods(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    pub fn column(&self, asset: usize) -> Vec<f64> {
        self.returns.column(asset).iter().copied().collect()
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.returns.row(t).transpose()
    }

    /// Rows `[start, end)` as a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<ReturnSeries> {
        if start > end || end > self.n_periods() {
            return Err(Error::DimensionMismatch(format!(
                "slice [{start}, {end}) of {} periods",
                self.n_periods()
            )));
        }
        let rows = self.returns.rows(start, end - start).into_owned();
        let dates = self.dates.as_ref().map(|d| d[start..end].to_vec());
        Self::build(self.asset_ids.clone(), rows, self.periods_per_year, dates)
    }

    pub fn date_label(&self, t: usize) -> Option<String> {
        self.dates
            .as_ref()
            .and_then(|d| d.get(t))
            .map(|d| d.format(DATE_FORMAT).to_string())
    }

    /// SHA-256 over asset ids and the little-endian bit patterns of the returns.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for id in &self.asset_ids {
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update((self.n_periods() as u64).to_le_bytes());
        for t in 0..self.n_periods() {
            for j in 0..self.n_assets() {
                hasher.update(self.returns[(t, j)].to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Simple returns `p[t+1]/p[t] - 1`.
pub fn to_returns(prices: &PriceTable, periods_per_year: u32) -> Result<ReturnSeries> {
    to_returns_with(prices, periods_per_year, ReturnKind::Simple)
}

pub fn to_returns_with(prices: &PriceTable, periods_per_year: u32, kind: ReturnKind) -> Result<ReturnSeries> {
    let t = prices.n_rows();
    if t < 3 {
        return Err(Error::InsufficientData { needed: 3, got: t });
    }
    let m = prices.asset_ids.len();
    let p = &prices.prices;
    let returns = DMatrix::from_fn(t - 1, m, |row, col| {
        let ratio = p[(row + 1, col)] / p[(row, col)];
        match kind {
            ReturnKind::Simple => ratio - 1.0,
            ReturnKind::Log => ratio.ln(),
        }
    });
    ReturnSeries::build(
        prices.asset_ids.clone(),
        returns,
        periods_per_year,
        Some(prices.dates[1..].to_vec()),
    )
}

/// Compound simple returns into a price table starting at `start_price`, with
/// weekday dates beginning at `start`.
pub fn compound_prices(series: &ReturnSeries, start: NaiveDate, start_price: f64) -> Result<PriceTable> {
    let t = series.n_periods();
    let m = series.n_assets();
    let mut prices = DMatrix::zeros(t + 1, m);
    for j in 0..m {
        let mut p = start_price;
        prices[(0, j)] = p;
        for row in 0..t {
            p *= 1.0 + series.returns[(row, j)];
            prices[(row + 1, j)] = p;
        }
    }
    let mut dates = Vec::with_capacity(t + 1);
    let mut d = start;
    while dates.len() < t + 1 {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            dates.push(d);
        }
        d += Duration::days(1);
    }
    PriceTable::new(series.asset_ids.clone(), dates, prices)
}

/// Write returns with a leading `date` column when a calendar is attached,
/// `period` otherwise.
pub fn write_returns<W: Write>(series: &ReturnSeries, mut out: W) -> Result<()> {
    write!(out, "{}", if series.dates.is_some() { "date" } else { "period" })?;
    for id in &series.asset_ids {
        write!(out, ",{id}")?;
    }
    writeln!(out)?;
    for t in 0..series.n_periods() {
        match series.date_label(t) {
            Some(d) => write!(out, "{d}")?,
            None => write!(out, "{t}")?,
        }
        for j in 0..series.n_assets() {
            write!(out, ",{}", series.returns[(t, j)])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parameters of a synthetic market: Gaussian copula with Student-t marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_assets: usize,
    pub n_periods: usize,
    /// Per-period covariance of returns, row-major M×M.
    pub target_covariance: Vec<Vec<f64>>,
    /// Degrees of freedom per asset; `null` or `"inf"` in JSON means Gaussian.
    #[serde(with = "dof_serde")]
    pub tail_dof: Vec<f64>,
    pub drift: Vec<f64>,
    pub seed: u64,
    /// Labels for the generated columns. Each asset's innovation stream is keyed
    /// by its label, so reordering assets together with their labels reorders
    /// the output columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asset_ids: Option<Vec<String>>,
    #[serde(default = "default_ppy")]
    pub periods_per_year: u32,
}

fn default_ppy() -> u32 {
    DEFAULT_PERIODS_PER_YEAR
}

mod dof_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Dof {
        Num(f64),
        Text(String),
        Null(()),
    }

    pub fn serialize<S: Serializer>(dofs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let vals: Vec<Option<f64>> = dofs.iter().map(|d| d.is_finite().then_some(*d)).collect();
        vals.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<Dof>> = Vec::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                None | Some(Dof::Null(())) => Ok(f64::INFINITY),
                Some(Dof::Num(x)) => Ok(x),
                Some(Dof::Text(s)) if matches!(s.as_str(), "inf" | "Infinity" | "infinity") => Ok(f64::INFINITY),
                Some(Dof::Text(s)) => Err(serde::de::Error::custom(format!("invalid degrees of freedom `{s}`"))),
            })
            .collect()
    }
}

impl SyntheticSpec {
    pub fn asset_labels(&self) -> Vec<String> {
        match &self.asset_ids {
            Some(ids) => ids.clone(),
            None => (1..=self.n_assets).map(|i| format!("S{i:02}")).collect(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.n_assets;
        DMatrix::from_fn(m, m, |i, j| self.target_covariance[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_assets;
        if m == 0 {
            return Err(Error::InvalidSpec("n_assets must be at least 1".into()));
        }
        if self.n_periods < 2 {
            return Err(Error::InvalidSpec("n_periods must be at least 2".into()));
        }
        if self.target_covariance.len() != m || self.target_covariance.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidSpec(format!("target_covariance must be {m}x{m}")));
        }
        if self.tail_dof.len() != m || self.drift.len() != m {
            return Err(Error::InvalidSpec(format!("tail_dof and drift must have {m} entries")));
        }
        if let Some(ids) = &self.asset_ids {
            if ids.len() != m {
                return Err(Error::InvalidSpec(format!("asset_ids must have {m} entries")));
            }
            for (i, id) in ids.iter().enumerate() {
                if id.is_empty() || ids[..i].contains(id) {
                    return Err(Error::InvalidSpec(format!("asset id `{id}` is empty or duplicated")));
                }
            }
        }
        if self.periods_per_year == 0 {
            return Err(Error::InvalidSpec("periods_per_year must be positive".into()));
        }
        for (i, &dof) in self.tail_dof.iter().enumerate() {
            if dof.is_nan() || dof <= 2.0 {
                return Err(Error::InvalidSpec(format!("tail_dof[{i}] = {dof} must exceed 2")));
            }
        }
        for i in 0..m {
            for j in 0..m {
                let (a, b) = (self.target_covariance[i][j], self.target_covariance[j][i]);
                if !a.is_finite() || (a - b).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(format!("target_covariance not symmetric at ({i}, {j})")));
                }
            }
            if !self.drift[i].is_finite() {
                return Err(Error::InvalidSpec(format!("drift[{i}] is not finite")));
            }
        }
        Ok(())
    }
}

fn stream_id(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Map a standard-normal draw to a unit-variance Student-t draw with the same
/// quantile.
fn gaussian_to_student(z: f64, dof: f64) -> f64 {
    if dof.is_infinite() {
        return z;
    }
    // work in the lower tail so extreme quantiles keep full precision
    let tail = 0.5 * erfc(z.abs() / std::f64::consts::SQRT_2);
    let t = StudentsT::new(0.0, 1.0, dof).expect("dof validated > 2");
    let q = -t.inverse_cdf(tail);
    z.signum() * q / (dof / (dof - 2.0)).sqrt()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ReturnSeries> {
    let returns = synthetic_draws(spec)?;
    ReturnSeries::new(spec.asset_labels(), returns, spec.periods_per_year)
}

/// The raw T×M draw behind `generate_synthetic`, without the `> -1` return
/// check (useful for unit-scale statistical checks).
pub fn synthetic_draws(spec: &SyntheticSpec) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let m = spec.n_assets;
    let cov = spec.covariance();
    if cov.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    let sd: Vec<f64> = (0..m).map(|i| cov[(i, i)].sqrt()).collect();
    let corr = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { cov[(i, j)] / (sd[i] * sd[j]) });

    // symmetric square root keeps the mixing permutation-equivariant
    let eig = SymmetricEigen::new(corr);
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let root_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let mixing = &eig.eigenvectors * root_diag * eig.eigenvectors.transpose();

    let labels = spec.asset_labels();
    let t_len = spec.n_periods;
    let mut shocks = DMatrix::zeros(m, t_len);
    for (i, label) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream_id(label));
        for t in 0..t_len {
            shocks[(i, t)] = StandardNormal.sample(&mut rng);
        }
    }
    let latent = mixing * shocks;

    Ok(DMatrix::from_fn(t_len, m, |t, i| {
        spec.drift[i] + sd[i] * gaussian_to_student(latent[(i, t)], spec.tail_dof[i])
    }))
}
