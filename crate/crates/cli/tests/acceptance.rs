//! Acceptance checks. Prints one line per criterion and exits nonzero if a
//! gated criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use entroport::backtest::{estimate_window, run_backtest, strategy_problem, BacktestConfig, Strategy};
use entroport::config::RunConfig;
use entroport::estimators::{entropy_of, gaussian_entropy, histogram, student_t_entropy, BinRule};
use entroport::market_data::{generate_synthetic, ReturnSeries, SyntheticSpec};
use entroport::objective_value::{ObjectiveView, ObvMode};
use entroport::optimizer::{
    c_tilde, min_variance_weights, solve_alpha, solve_min_risk, solve_portfolio, solve_weights, AlphaConfig,
    OptimizerProblem,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde_json::{json, Value};

const UNIT_GAUSSIAN_ENTROPY: f64 = 1.418938;

struct Outcome {
    passed: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome { passed: true, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome { passed: false, detail: detail.into() }
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn identity_view(cov: &DMatrix<f64>, means: &DVector<f64>) -> ObjectiveView {
    ObjectiveView { mode: ObvMode::Identity, cov: cov.clone(), means: means.clone(), scale_d: 1.0, normalization_target: 1.0 }
}

fn problem(cov: DMatrix<f64>, means: DVector<f64>, s: DVector<f64>, m_c: f64) -> OptimizerProblem {
    let m = means.len();
    let view = identity_view(&cov, &means);
    OptimizerProblem::new(cov, means, s, m_c, DVector::from_element(m, 1.0 / m as f64), view).unwrap()
}

fn random_spd(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(m, m) * 0.1
}

/// Weights, γ and β from the full bordered system
/// `[C̃ −𝟏 m; 𝟏ᵀ 0 0; mᵀ 0 0]·[p; γ; β] = [0; 1; m_c]`.
fn kkt(ct: &DMatrix<f64>, means: &DVector<f64>, m_c: f64) -> Option<(DVector<f64>, f64, f64)> {
    let m = means.len();
    let mut k = DMatrix::zeros(m + 2, m + 2);
    k.view_mut((0, 0), (m, m)).copy_from(ct);
    for i in 0..m {
        k[(i, m)] = -1.0;
        k[(i, m + 1)] = means[i];
        k[(m, i)] = 1.0;
        k[(m + 1, i)] = means[i];
    }
    let mut rhs = DVector::zeros(m + 2);
    rhs[m] = 1.0;
    rhs[m + 1] = m_c;
    let x = k.full_piv_lu().solve(&rhs)?;
    Some((x.rows(0, m).into_owned(), x[m], x[m + 1]))
}

/// Budget-only weights `C⁻¹𝟏 / 𝟏ᵀC⁻¹𝟏` via a QR solve.
fn min_variance_oracle(c: &DMatrix<f64>) -> DVector<f64> {
    let u = c.clone().qr().solve(&DVector::from_element(c.nrows(), 1.0)).unwrap();
    let z = u.sum();
    u / z
}

fn criterion_1() -> Outcome {
    let closed = gaussian_entropy(1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let est = entropy_of(&histogram(&xs, BinRule::Sqrt).unwrap());
    check(
        (closed - UNIT_GAUSSIAN_ENTROPY).abs() < 1e-5 && (est - UNIT_GAUSSIAN_ENTROPY).abs() < 0.05,
        format!("closed form {closed:.7}, histogram {est:.4}"),
    )
}

fn criterion_2() -> Outcome {
    let dofs = [3.0, 5.0, 10.0, 100.0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ev = Vec::new();
    let mut es = Vec::new();
    let mut worst: f64 = 0.0;
    for &nu in &dofs {
        let analytic = student_t_entropy(nu).unwrap();
        let t = StudentT::new(nu).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| t.sample(&mut rng)).collect();
        let est = entropy_of(&histogram(&xs, BinRule::Sqrt).unwrap());
        worst = worst.max((est - analytic).abs());
        ev.push(nu / (nu - 2.0) - 1.0);
        es.push(analytic - UNIT_GAUSSIAN_ENTROPY);
    }
    let decreasing = |v: &[f64]| v.iter().all(|&x| x > 0.0) && v.windows(2).all(|w| w[1] < w[0]);
    check(
        decreasing(&ev) && decreasing(&es) && worst < 0.05,
        format!("excess entropy {:.4?}, worst estimator gap {worst:.4}", es),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_w: f64 = 0.0;
    let mut worst_budget: f64 = 0.0;
    let mut worst_ret: f64 = 0.0;
    let mut n = 0;
    while n < 200 {
        let m = 2 + n % 7;
        let c = random_spd(&mut rng, m);
        let means = DVector::from_fn(m, |_, _| rng.random_range(-0.5..0.5));
        let s = DVector::from_fn(m, |_, _| rng.random_range(-1.0..2.0));
        let alpha = rng.random_range(-0.1..0.5);
        let m_c = rng.random_range(-0.3..0.3);
        let ct = c_tilde(&c, alpha, &s);
        let eig = ct.clone().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), e| (l.min(e.abs()), h.max(e.abs())));
        if lo < 1e-3 * hi {
            continue;
        }
        let Some((oracle, _, _)) = kkt(&ct, &means, m_c) else { continue };
        let p = problem(c, means.clone(), s, m_c);
        let pf = solve_weights(&p, alpha).unwrap();
        worst_w = worst_w.max(max_abs_diff(&pf.weights, &oracle));
        worst_budget = worst_budget.max((pf.weights.sum() - 1.0).abs());
        worst_ret = worst_ret.max((pf.weights.dot(&means) - m_c).abs());
        n += 1;
    }
    check(
        worst_w < 1e-8 && worst_budget < 1e-10 && worst_ret < 1e-8,
        format!("200 instances, max weight gap {worst_w:.1e}, budget {worst_budget:.1e}, return {worst_ret:.1e}"),
    )
}

/// Means spanning at least 0.3, so the return constraint stays well posed.
fn spread_means(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    loop {
        let means = DVector::from_fn(m, |_, _| rng.random_range(-0.5..0.5));
        if means.max() - means.min() >= 0.3 {
            return means;
        }
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_mv: f64 = 0.0;
    let mut worst_iv: f64 = 0.0;
    let mut worst_ridge: f64 = 0.0;
    for k in 0..50 {
        let m = 2 + k % 7;
        let c = random_spd(&mut rng, m);
        let means = spread_means(&mut rng, m);
        let s = DVector::from_fn(m, |_, _| rng.random_range(-1.0..2.0));
        let p = problem(c.clone(), means.clone(), s, 0.1);
        let oracle = min_variance_oracle(&c);
        worst_mv = worst_mv.max(max_abs_diff(&solve_min_risk(&p, 0.0).unwrap().weights, &oracle));
        worst_mv = worst_mv.max(max_abs_diff(&min_variance_weights(&c).unwrap(), &oracle));

        let d = DVector::from_fn(m, |_, _| rng.random_range(0.01..1.0));
        let pd = problem(DMatrix::from_diagonal(&d), means.clone(), DVector::from_element(m, 0.7), 0.1);
        let inv = d.map(|x| 1.0 / x);
        let iv = &inv / inv.sum();
        worst_iv = worst_iv.max(max_abs_diff(&solve_min_risk(&pd, 0.0).unwrap().weights, &iv));

        let alpha = rng.random_range(0.0..0.5);
        let pu = problem(c.clone(), means.clone(), DVector::from_element(m, 1.0), 0.1);
        let ridge = &c + DMatrix::identity(m, m) * alpha;
        let (oracle, _, _) = kkt(&ridge, &means, 0.1).unwrap();
        worst_ridge = worst_ridge.max(max_abs_diff(&solve_weights(&pu, alpha).unwrap().weights, &oracle));
    }
    check(
        worst_mv < 1e-10 && worst_iv < 1e-10 && worst_ridge < 1e-10,
        format!("min-variance {worst_mv:.1e}, inverse-variance {worst_iv:.1e}, uniform ridge {worst_ridge:.1e}"),
    )
}

/// Roots of the cleared self-consistency residual `β(α)·N − D − α·Σ`, found
/// by scanning a signed log grid and bisecting each sign change.
fn alpha_roots(p: &OptimizerProblem) -> Vec<f64> {
    let pm = &p.market_weights;
    let n = pm.dot(&p.view.means);
    let d = (pm.transpose() * &p.view.cov * pm)[(0, 0)];
    let sig: f64 = pm.iter().zip(p.entropies.iter()).map(|(w, s)| s * w * w).sum();
    let h = |a: f64| match kkt(&c_tilde(&p.cov, a, &p.entropies), &p.means, p.m_c) {
        Some((_, _, beta)) => beta * n - d - a * sig,
        None => f64::NAN,
    };
    let steps = 3000;
    let mut grid: Vec<f64> = (0..=steps).map(|k| -(10f64.powf(1.0 - 10.0 * k as f64 / steps as f64))).collect();
    grid.push(0.0);
    grid.extend((0..=steps).rev().map(|k| 10f64.powf(1.0 - 10.0 * k as f64 / steps as f64)));
    let mut roots = Vec::new();
    for w in grid.windows(2) {
        let (hl, hr) = (h(w[0]), h(w[1]));
        if !(hl.is_finite() && hr.is_finite()) || hl.signum() == hr.signum() {
            continue;
        }
        let (mut l, mut r) = (w[0], w[1]);
        for _ in 0..200 {
            let mid = 0.5 * (l + r);
            if h(mid).signum() == hl.signum() {
                l = mid;
            } else {
                r = mid;
            }
        }
        let root = 0.5 * (l + r);
        if h(root).abs() < 1e-8 * (d.abs() + (root * sig).abs()) {
            roots.push(root);
        }
    }
    roots
}

fn synthetic_market(m: usize, t: usize, seed: u64, dofs: &[f64]) -> ReturnSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vols: Vec<f64> = (0..m).map(|_| rng.random_range(0.008..0.02)).collect();
    let rho = rng.random_range(0.1..0.5);
    let cov: Vec<Vec<f64>> =
        (0..m).map(|i| (0..m).map(|j| vols[i] * vols[j] * if i == j { 1.0 } else { rho }).collect()).collect();
    let drift: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..0.001)).collect();
    let spec: SyntheticSpec = serde_json::from_value(json!({
        "n_assets": m, "n_periods": t, "target_covariance": cov,
        "tail_dof": (0..m).map(|i| dofs[i % dofs.len()]).map(|d| if d.is_finite() { json!(d) } else { Value::Null }).collect::<Vec<_>>(),
        "drift": drift, "seed": seed,
    }))
    .unwrap();
    generate_synthetic(&spec).unwrap()
}

fn criterion_5() -> Outcome {
    let cfg = RunConfig::default().backtest_config();
    let mut solved = 0;
    let mut skipped = 0;
    let mut worst_qr: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut failures = Vec::new();
    let mut seed = 0;
    while solved < 50 {
        seed += 1;
        let series = synthetic_market(5, 250, 500 + seed, &[3.0, f64::INFINITY, 5.0, f64::INFINITY, 8.0]);
        let bt = BacktestConfig { window: 250, ..cfg.clone() };
        let est = estimate_window(&series, &bt, 250).unwrap();
        let p = strategy_problem(Strategy::EntropyFull, &est, &bt.optimizer, 252).unwrap();
        let roots = alpha_roots(&p);
        if roots.is_empty() {
            skipped += 1;
            continue;
        }
        solved += 1;
        match solve_alpha(&p, &AlphaConfig::default()) {
            Ok((_, report)) => {
                let qr = report.qr_market.map_or(f64::INFINITY, |q| (q - 1.0).abs());
                let gap = roots.iter().map(|r| (r - report.alpha).abs()).fold(f64::INFINITY, f64::min);
                worst_qr = worst_qr.max(qr);
                worst_gap = worst_gap.max(gap);
                if !report.converged || qr >= 1e-6 || gap >= 1e-6 || report.trace.is_empty() {
                    failures.push(seed);
                }
            }
            Err(e) => failures.push({
                eprintln!("seed {seed}: {e}");
                seed
            }),
        }
    }
    check(
        failures.is_empty(),
        format!(
            "50 problems ({skipped} without a root skipped), max |QR_m-1| {worst_qr:.1e}, max alpha gap {worst_gap:.1e}, failures {failures:?}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let m = 6;
    let it = DMatrix::identity(m, m);
    let means = DVector::from_element(m, 0.01);
    let mut ok = true;
    for &alpha in &[0.05, 0.3, 1.0] {
        let s = DVector::from_fn(m, |i, _| -0.5 + 0.4 * i as f64);
        let w = solve_weights(&problem(it.clone(), means.clone(), s.clone(), 0.01), alpha).unwrap().weights;
        ok &= w.as_slice().windows(2).all(|p| p[1] < p[0]);
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let mut s2 = s.clone();
            s2[2] += 0.1 * k as f64;
            let w2 = solve_weights(&problem(it.clone(), means.clone(), s2, 0.01), alpha).unwrap().weights;
            ok &= w2[2] < prev;
            prev = w2[2];
        }
    }
    check(ok, "weights strictly decrease in S at three temperatures and along a 20-point grid")
}

fn criterion_7() -> Outcome {
    let series = synthetic_market(27, 1500, 7, &[3.0, 4.0, f64::INFINITY, 6.0, f64::INFINITY]);
    let mut rc = RunConfig::default();
    rc.alpha = AlphaConfig::fixed(2e-4);
    let cfg = rc.backtest_config();
    assert_eq!(cfg.window, 75);
    let full = run_backtest(&series, &cfg).unwrap();

    let short = run_backtest(&series.slice(0, 900).unwrap(), &cfg).unwrap();
    let mut lookahead = true;
    for (a, b) in short.strategies.iter().zip(&full.strategies) {
        let n = a.weights.len();
        lookahead &= a.weights[..] == b.weights[..n] && a.values[..] == b.values[..=n];
    }

    let mut compounding: f64 = 0.0;
    for s in &full.strategies {
        for k in 0..s.returns.len() {
            let next = s.values[k] * (1.0 + s.returns[k]);
            compounding = compounding.max((s.values[k + 1] - next).abs() / next.abs());
        }
    }

    let r = series.returns();
    let (t_len, m) = r.shape();
    let w = 1.0 / m as f64;
    let mut v = vec![1.0];
    for t in 75..t_len {
        let mut ret = 0.0;
        for i in 0..m {
            ret += w * r[(t, i)];
        }
        v.push(v[v.len() - 1] * (1.0 + ret));
    }
    let equal = full.strategy(Strategy::Equal).unwrap().values == v;

    let ridge = full.strategy(Strategy::MarkowitzRidge).unwrap();
    let mut unit = true;
    for (k, &t) in ridge.periods.iter().enumerate() {
        let mut est = estimate_window(&series, &cfg, t).unwrap();
        est.stats.entropy.fill(1.0);
        let p = strategy_problem(Strategy::EntropyFull, &est, &cfg.optimizer, 252).unwrap();
        let (pf, _) = solve_portfolio(&p, &cfg.optimizer.alpha).unwrap();
        unit &= pf.weights.as_slice() == &ridge.weights[k][..];
    }
    check(
        lookahead && compounding < 1e-12 && equal && unit,
        format!(
            "27x1500, window 75: no-lookahead {lookahead}, compounding {compounding:.1e}, equal-weight exact {equal}, unit entropy equals ridge {unit}"
        ),
    )
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_entroport")).args(args).output().unwrap()
}

fn outputs_of(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let manifest: Value = serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| {
            let f = o["file"].as_str().unwrap().to_owned();
            let bytes = fs::read(dir.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

fn criterion_8(root: &Path) -> Outcome {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let m = 8;
    let cov: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { 1.5e-4 } else { 4e-5 }).collect()).collect();
    let spec = json!({
        "n_assets": m, "n_periods": 400, "target_covariance": cov,
        "tail_dof": [3, null, 4, null, 6, null, 3, null], "drift": vec![4e-4; m], "seed": 42,
    });
    let spec_path = root.join("spec.json");
    fs::write(&spec_path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
    let (syn, bt, sw) = (root.join("synth"), root.join("backtest"), root.join("sweep"));
    let prices = syn.join("prices.csv");
    let runs: [(PathBuf, Vec<String>); 3] = [
        (syn.clone(), vec!["synth".into(), s(&spec_path), "--out".into(), s(&syn)]),
        (bt.clone(), vec!["backtest".into(), s(&prices), "--out".into(), s(&bt)]),
        (sw.clone(), vec!["sweep".into(), s(&prices), "--alpha".into(), "0,1e-4,5e-4".into(), "--out".into(), s(&sw)]),
    ];
    let mut files = 0;
    for (dir, args) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = cli(&args);
        if !o.status.success() {
            return fail(format!("{} failed: {}", args[0], String::from_utf8_lossy(&o.stderr)));
        }
        let first = outputs_of(dir);
        let again = dir.with_extension("replay");
        let o = cli(&["replay", &s(&dir.join("manifest.json")), "--out", &s(&again)]);
        if !o.status.success() {
            return fail(format!("replay of {} failed: {}", args[0], String::from_utf8_lossy(&o.stderr)));
        }
        if first != outputs_of(&again) {
            return fail(format!("replay of {} differs", args[0]));
        }
        files += first.len();
    }
    pass(format!("synth, backtest and sweep replayed from manifests, {files} files byte-identical"))
}

fn comparison(series: &ReturnSeries, rc: &RunConfig, path: &Path) -> String {
    let rep = run_backtest(series, &rc.backtest_config()).unwrap();
    let mut curve = String::from("step");
    for s in &rep.strategies {
        curve.push(',');
        curve.push_str(s.strategy.name());
    }
    curve.push('\n');
    for k in 0..rep.strategies[0].values.len() {
        curve.push_str(&k.to_string());
        for s in &rep.strategies {
            curve.push_str(&format!(",{}", s.values[k]));
        }
        curve.push('\n');
    }
    fs::write(path, curve).unwrap();
    let finals: Vec<String> = rep
        .strategies
        .iter()
        .map(|s| format!("{} {:.4}", s.strategy.name(), s.values.last().unwrap()))
        .collect();
    let best = rep
        .strategies
        .iter()
        .max_by(|a, b| a.values.last().unwrap().total_cmp(b.values.last().unwrap()))
        .unwrap();
    format!("terminal values {}, highest {}", finals.join(", "), best.strategy.name())
}

fn criterion_9(root: &Path) -> Outcome {
    let series = synthetic_market(27, 1500, 9, &[3.0, 3.5, 4.0, 6.0, 10.0, f64::INFINITY]);
    let fixed = RunConfig::default().with_overrides(&["alpha.mode=fixed", "alpha.value=2e-4"]).unwrap();
    let calibrated = RunConfig::default().with_overrides(&["backtest.failure_policy=skip_and_hold"]).unwrap();
    let a = comparison(&series, &fixed, &root.join("compound_values_fixed.csv"));
    let b = comparison(&series, &calibrated, &root.join("compound_values_self_consistent.csv"));
    pass(format!("fixed alpha 2e-4: {a}; self-consistent alpha: {b}; curves in {}", root.display()))
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    let root_8 = root.join("pipeline");
    let root_9 = root.join("comparison");
    fs::create_dir_all(&root_8).unwrap();
    fs::create_dir_all(&root_9).unwrap();

    type Crit<'a> = (usize, &'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Crit> = vec![
        (1, "gaussian entropy constant", Duration::from_secs(1), Box::new(criterion_1)),
        (2, "student-t excess variance and entropy", Duration::from_secs(5), Box::new(criterion_2)),
        (3, "closed form against bordered-system oracle", Duration::from_secs(10), Box::new(criterion_3)),
        (4, "special-case collapse", Duration::from_secs(5), Box::new(criterion_4)),
        (5, "self-consistent temperature", Duration::from_secs(30), Box::new(criterion_5)),
        (6, "entropy penalty monotonicity", Duration::from_secs(1), Box::new(criterion_6)),
        (7, "backtest integrity", Duration::from_secs(60), Box::new(criterion_7)),
        (8, "end-to-end determinism", Duration::from_secs(120), Box::new(|| criterion_8(&root_8))),
        (9, "strategy comparison (recorded)", Duration::MAX, Box::new(|| criterion_9(&root_9))),
    ];

    let mut gated_failures = 0;
    for (n, name, budget, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f())).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let ok = outcome.passed && in_time;
        let label = if n == 9 {
            "recorded"
        } else if ok {
            "PASS"
        } else {
            "FAIL"
        };
        if n != 9 && !ok {
            gated_failures += 1;
        }
        let timing = if budget == Duration::MAX {
            format!("{:.2}s", elapsed.as_secs_f64())
        } else {
            format!("{:.2}s of {}s", elapsed.as_secs_f64(), budget.as_secs())
        };
        println!("criterion {n} {label}: {name} [{timing}] {}", outcome.detail);
    }
    if gated_failures > 0 {
        eprintln!("{gated_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
