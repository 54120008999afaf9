use std::path::{Path, PathBuf};

use chrono::{NaiveDate, SecondsFormat, Utc};
use entroport::backtest::{run_backtest, strategy_problem, sweep_alpha, sweep_mc, BacktestReport, Strategy, StrategyReport, WindowEstimate};
use entroport::config::{apply_overrides, MarketWeights, RunConfig};
use entroport::estimators::estimate_stats;
use entroport::market_data::{compound_prices, generate_synthetic, parse_prices, to_returns_with, write_prices, write_returns, ReturnSeries, SyntheticSpec};
use entroport::objective_value::build_view;
use entroport::optimizer::{quality_ratio, solve_portfolio, AlphaSolveReport, Warning};
use entroport::Error;
use serde::Serialize;

use crate::args::{Command, Common};
use crate::error::{CliError, CliResult};
use crate::manifest::{Grid, InputFingerprint, RunManifest, MANIFEST_FILE};
use crate::output::{json, num, opt, Sink, Table};

const SYNTH_START: (i32, u32, u32) = (2000, 1, 3);
const SYNTH_START_PRICE: f64 = 100.0;

#[derive(Debug, Clone)]
enum Kind {
    Stats,
    Optimize,
    Backtest,
    Sweep(Grid),
}

impl Kind {
    fn name(&self) -> &'static str {
        match self {
            Kind::Stats => "stats",
            Kind::Optimize => "optimize",
            Kind::Backtest => "backtest",
            Kind::Sweep(_) => "sweep",
        }
    }
}

/// A fully specified run, built from arguments or from a manifest.
#[derive(Debug, Clone)]
enum Job {
    Market { kind: Kind, prices: PathBuf, config: RunConfig },
    Synth { spec_path: PathBuf, spec: SyntheticSpec },
}

pub fn dispatch(command: &Command) -> CliResult<()> {
    let (job, out) = match command {
        Command::Replay { manifest, out } => return replay(manifest, out.as_deref()),
        Command::Stats { prices, common } => (market_job(Kind::Stats, prices, common)?, common.out.clone()),
        Command::Optimize { prices, common } => (market_job(Kind::Optimize, prices, common)?, common.out.clone()),
        Command::Backtest { prices, common } => (market_job(Kind::Backtest, prices, common)?, common.out.clone()),
        Command::Sweep { prices, alpha, mc, common } => {
            let grid = match (alpha, mc) {
                (Some(a), _) => Grid::Alpha(a.clone()),
                (None, Some(m)) => Grid::Mc(m.clone()),
                (None, None) => return Err(CliError::Input("sweep needs --alpha or --mc".into())),
            };
            (market_job(Kind::Sweep(grid), prices, common)?, common.out.clone())
        }
        Command::Synth { spec, common } => (synth_job(spec, common)?, common.out.clone()),
    };
    let mut sink = Sink::new(out)?;
    execute(&job, &mut sink).map(|_| ())
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn market_job(kind: Kind, prices: &Path, common: &Common) -> CliResult<Job> {
    let base = match &common.config {
        Some(path) => {
            let text = String::from_utf8(read_bytes(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let config = base.with_overrides(&common.overrides)?;
    Ok(Job::Market { kind, prices: prices.to_path_buf(), config })
}

fn synth_job(spec_path: &Path, common: &Common) -> CliResult<Job> {
    let bytes = read_bytes(spec_path)?;
    let mut doc: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    apply_overrides(&mut doc, &common.overrides)?;
    let spec: SyntheticSpec =
        serde_json::from_value(doc).map_err(|e| CliError::Input(format!("{}: {e}", spec_path.display())))?;
    Ok(Job::Synth { spec_path: spec_path.to_path_buf(), spec })
}

/// Run a job, write its outputs and manifest, and return the manifest.
fn execute(job: &Job, sink: &mut Sink) -> CliResult<RunManifest> {
    let (command, inputs, config, grid, result) = match job {
        Job::Market { kind, prices, config } => {
            let bytes = read_bytes(prices)?;
            let mut inputs = vec![InputFingerprint::of("prices", prices, &bytes)];
            if let MarketWeights::File(path) = &config.market_weights {
                inputs.push(InputFingerprint::of("market_weights", path, &read_bytes(path)?));
            }
            let table = parse_prices(bytes.as_slice())?;
            let series = to_returns_with(&table, config.periods_per_year, config.returns)?;
            let mut resolved = config.clone();
            resolved.market_weights = config.market_weights.materialize(series.asset_ids())?;
            let grid = match kind {
                Kind::Sweep(g) => Some(g.clone()),
                _ => None,
            };
            let result = match kind {
                Kind::Stats => stats(&series, &resolved, sink),
                Kind::Optimize => optimize(&series, &resolved, sink),
                Kind::Backtest => backtest(&series, &resolved, sink),
                Kind::Sweep(g) => sweep(&series, &resolved, g, sink),
            };
            (kind.name(), inputs, serde_json::to_value(&resolved)?, grid, result)
        }
        Job::Synth { spec_path, spec } => {
            let bytes = read_bytes(spec_path)?;
            let inputs = vec![InputFingerprint::of("spec", spec_path, &bytes)];
            let result = synth(spec, sink);
            ("synth", inputs, serde_json::to_value(spec)?, None, result)
        }
    };
    if let Err(CliError::Core(e)) = &result {
        if let Some(report) = nonconvergence(e) {
            sink.file("alpha_report.json", json(report)?)?;
        }
    }
    let manifest = RunManifest {
        command: command.to_owned(),
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        inputs,
        config,
        grid,
        outputs: sink.records().to_vec(),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    if let Some(dir) = sink.dir() {
        crate::output::write_atomic(&dir.join(MANIFEST_FILE), &json(&manifest)?)?;
    }
    result.map(|_| manifest)
}

fn nonconvergence(e: &Error) -> Option<&AlphaSolveReport> {
    match e {
        Error::NoConvergence { report } => Some(report),
        Error::Window { source, .. } => nonconvergence(source),
        _ => None,
    }
}

fn replay(manifest_path: &Path, out: Option<&Path>) -> CliResult<()> {
    let manifest = RunManifest::read(manifest_path)?;
    for input in &manifest.inputs {
        let bytes = read_bytes(&input.path)?;
        if crate::output::sha256_hex(&bytes) != input.sha256 {
            return Err(CliError::Input(format!("input `{}` changed since the recorded run", input.path.display())));
        }
    }
    let input = |role: &str| {
        manifest
            .inputs
            .iter()
            .find(|i| i.role == role)
            .map(|i| i.path.clone())
            .ok_or_else(|| CliError::Input(format!("manifest has no `{role}` input")))
    };
    let kind = match (manifest.command.as_str(), &manifest.grid) {
        ("stats", _) => Some(Kind::Stats),
        ("optimize", _) => Some(Kind::Optimize),
        ("backtest", _) => Some(Kind::Backtest),
        ("sweep", Some(g)) => Some(Kind::Sweep(g.clone())),
        ("synth", _) => None,
        (other, _) => return Err(CliError::Input(format!("cannot replay command `{other}`"))),
    };
    let job = match kind {
        Some(kind) => Job::Market { kind, prices: input("prices")?, config: serde_json::from_value(manifest.config.clone())? },
        None => Job::Synth { spec_path: input("spec")?, spec: serde_json::from_value(manifest.config.clone())? },
    };
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => manifest_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf(),
    };
    let mut sink = Sink::new(Some(dir))?;
    let outcome = execute(&job, &mut sink);
    for recorded in &manifest.outputs {
        let fresh = sink.records().iter().find(|r| r.file == recorded.file);
        if fresh.map(|r| &r.sha256) != Some(&recorded.sha256) {
            return Err(CliError::ReplayMismatch { file: recorded.file.clone() });
        }
    }
    if sink.records().len() != manifest.outputs.len() {
        return Err(CliError::ReplayMismatch { file: "<output set>".into() });
    }
    outcome.map(|_| ())
}

#[derive(Serialize)]
struct StatsOut<'a> {
    asset_ids: &'a [String],
    n_obs: usize,
    periods_per_year: u32,
    mean: Vec<f64>,
    variance: Vec<f64>,
    entropy: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

fn stats(series: &ReturnSeries, config: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    let s = estimate_stats(series, &config.estimator)?;
    let m = series.n_assets();
    let out = StatsOut {
        asset_ids: series.asset_ids(),
        n_obs: s.n_obs,
        periods_per_year: series.periods_per_year(),
        mean: s.mean.iter().copied().collect(),
        variance: s.variance.iter().copied().collect(),
        entropy: s.entropy.iter().copied().collect(),
        covariance: (0..m).map(|i| (0..m).map(|j| s.covariance[(i, j)]).collect()).collect(),
    };
    let mut table = Table::new(&["asset", "mean", "variance", "entropy"])?;
    for (i, id) in series.asset_ids().iter().enumerate() {
        table.row(&[id.clone(), num(s.mean[i]), num(s.variance[i]), num(s.entropy[i])])?;
    }
    let mut header = vec!["asset".to_owned()];
    header.extend(series.asset_ids().iter().cloned());
    let mut cov = Table::new(&header)?;
    for (i, id) in series.asset_ids().iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..m).map(|j| num(s.covariance[(i, j)])));
        cov.row(&row)?;
    }
    sink.primary("stats.json", json(&out)?)?;
    sink.file("stats.csv", table.finish()?)?;
    sink.file("covariance.csv", cov.finish()?)?;
    Ok(())
}

#[derive(Serialize)]
struct PortfolioOut<'a> {
    asset_ids: &'a [String],
    weights: Vec<f64>,
    alpha: f64,
    beta: f64,
    gamma: f64,
    risk: f64,
    qr: Option<f64>,
    qr_market: Option<f64>,
    y2: f64,
    return_constraint_active: bool,
    m_c: f64,
    warnings: Vec<Warning>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_report: Option<AlphaSolveReport>,
}

fn optimize(series: &ReturnSeries, config: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    let stats = estimate_stats(series, &config.estimator)?;
    let view = build_view(series, &stats, &config.obv, config.estimator.bin_rule)?;
    let estimate = WindowEstimate { stats, view };
    let settings = config.optimizer();
    let problem = strategy_problem(Strategy::EntropyFull, &estimate, &settings, series.periods_per_year())?;
    let (pf, report) = solve_portfolio(&problem, &settings.alpha)?;
    let qr_market = quality_ratio(&problem.market_weights, pf.beta, &problem.view, pf.alpha, &problem.entropies).ok();
    let out = PortfolioOut {
        asset_ids: series.asset_ids(),
        weights: pf.weights.iter().copied().collect(),
        alpha: pf.alpha,
        beta: pf.beta,
        gamma: pf.gamma,
        risk: pf.risk,
        qr: pf.qr,
        qr_market,
        y2: pf.y2,
        return_constraint_active: pf.return_constraint_active,
        m_c: problem.m_c,
        warnings: pf.warnings.clone(),
        alpha_report: report,
    };
    sink.primary("portfolio.json", json(&out)?)
}

#[derive(Serialize)]
struct StrategySummary {
    strategy: Strategy,
    terminal_value: f64,
    mean_return: f64,
    return_variance: f64,
    annualized_profit: Option<f64>,
    n_periods: usize,
    failed_windows: usize,
    nonconverged_windows: usize,
    mean_qr: Option<f64>,
}

#[derive(Serialize)]
struct BacktestSummary<'a> {
    metadata: &'a entroport::backtest::ReportMetadata,
    strategies: Vec<StrategySummary>,
}

fn summarize(report: &BacktestReport) -> BacktestSummary<'_> {
    let strategies = report
        .strategies
        .iter()
        .map(|s| {
            let qr = s.qr_series();
            StrategySummary {
                strategy: s.strategy,
                terminal_value: *s.values.last().expect("values start at 1"),
                mean_return: s.mean_return,
                return_variance: s.return_variance,
                annualized_profit: s.annualized_profit,
                n_periods: s.returns.len(),
                failed_windows: s.failed_windows,
                nonconverged_windows: s.nonconverged_windows,
                mean_qr: (!qr.is_empty()).then(|| qr.iter().sum::<f64>() / qr.len() as f64),
            }
        })
        .collect();
    BacktestSummary { metadata: &report.metadata, strategies }
}

fn backtest(series: &ReturnSeries, config: &RunConfig, sink: &mut Sink) -> CliResult<()> {
    let report = run_backtest(series, &config.backtest_config())?;
    sink.primary("summary.json", json(&summarize(&report))?)?;
    sink.file("report.json", json(&report)?)?;
    for s in &report.strategies {
        let name = s.strategy.name();
        sink.file(&format!("curve_{name}.csv"), curve_csv(series, s)?)?;
        sink.file(&format!("weights_{name}.csv"), weights_csv(series, s)?)?;
        sink.file(&format!("rebalances_{name}.csv"), rebalances_csv(s)?)?;
    }
    Ok(())
}

fn curve_csv(series: &ReturnSeries, s: &StrategyReport) -> CliResult<Vec<u8>> {
    let mut t = Table::new(&["step", "period", "date", "return", "value"])?;
    t.row(&["0", "", "", "", &num(s.values[0])])?;
    for (k, &p) in s.periods.iter().enumerate() {
        let date = series.date_label(p).unwrap_or_default();
        t.row(&[(k + 1).to_string(), p.to_string(), date, num(s.returns[k]), num(s.values[k + 1])])?;
    }
    t.finish()
}

fn weights_csv(series: &ReturnSeries, s: &StrategyReport) -> CliResult<Vec<u8>> {
    let mut header = vec!["period".to_owned(), "date".to_owned()];
    header.extend(series.asset_ids().iter().cloned());
    let mut t = Table::new(&header)?;
    for (k, &p) in s.periods.iter().enumerate() {
        let mut row = vec![p.to_string(), series.date_label(p).unwrap_or_default()];
        row.extend(s.weights[k].iter().map(|&w| num(w)));
        t.row(&row)?;
    }
    t.finish()
}

fn rebalances_csv(s: &StrategyReport) -> CliResult<Vec<u8>> {
    let mut t = Table::new(&["period", "date", "alpha", "beta", "qr", "qr_market", "converged", "iterations", "failure"])?;
    for r in &s.rebalances {
        t.row(&[
            r.period.to_string(),
            r.date.clone().unwrap_or_default(),
            opt(r.alpha),
            opt(r.beta),
            opt(r.qr),
            opt(r.qr_market),
            r.converged.map(|c| c.to_string()).unwrap_or_default(),
            r.iterations.map(|i| i.to_string()).unwrap_or_default(),
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    t.finish()
}

fn sweep(series: &ReturnSeries, config: &RunConfig, grid: &Grid, sink: &mut Sink) -> CliResult<()> {
    let bt = config.backtest_config();
    let (name, bytes, first_error) = match grid {
        Grid::Alpha(alphas) => {
            let rows = sweep_alpha(series, &bt, alphas)?;
            let mut t = Table::new(&["alpha", "mean_profit", "profit_variance", "annualized_profit", "mean_qr", "error"])?;
            for r in &rows {
                t.row(&[
                    num(r.alpha),
                    opt(r.mean_profit),
                    opt(r.profit_variance),
                    opt(r.annualized_profit),
                    opt(r.mean_qr),
                    r.error.clone().unwrap_or_default(),
                ])?;
            }
            let all_failed = rows.iter().all(|r| r.error.is_some());
            let first = rows.first().and_then(|r| r.error.clone().zip(r.error_class));
            ("sweep_alpha.csv", t.finish()?, all_failed.then_some(first).flatten())
        }
        Grid::Mc(values) => {
            let rows = sweep_mc(series, &bt, values)?;
            let mut t = Table::new(&["m_c", "mean_profit", "profit_variance", "annualized_profit", "error"])?;
            for r in &rows {
                t.row(&[
                    num(r.m_c),
                    opt(r.mean_profit),
                    opt(r.profit_variance),
                    opt(r.annualized_profit),
                    r.error.clone().unwrap_or_default(),
                ])?;
            }
            let all_failed = rows.iter().all(|r| r.error.is_some());
            let first = rows.first().and_then(|r| r.error.clone().zip(r.error_class));
            ("sweep_mc.csv", t.finish()?, all_failed.then_some(first).flatten())
        }
    };
    sink.primary(name, bytes)?;
    match first_error {
        Some((msg, class)) => Err(CliError::SweepFailed { message: msg, class }),
        None => Ok(()),
    }
}

fn synth(spec: &SyntheticSpec, sink: &mut Sink) -> CliResult<()> {
    let series = generate_synthetic(spec)?;
    let (y, m, d) = SYNTH_START;
    let start = NaiveDate::from_ymd_opt(y, m, d).expect("valid start date");
    let prices = compound_prices(&series, start, SYNTH_START_PRICE)?;
    let series = series.with_dates(prices.dates()[1..].to_vec())?;
    let mut price_bytes = Vec::new();
    write_prices(&prices, &mut price_bytes)?;
    let mut return_bytes = Vec::new();
    write_returns(&series, &mut return_bytes)?;
    sink.primary("prices.csv", price_bytes)?;
    sink.file("returns.csv", return_bytes)?;
    Ok(())
}
