//! Acceptance suite. Runs without the libtest harness so the verdict lines
//! appear in `cargo test` output; exits non-zero if any criterion fails.

use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use lpflow::domination::{scan_orbit, ScanOptions, Verdict};
use lpflow::model::{cat_eigenvalue, FlowModel, BUILTIN_IDS};
use lpflow::perturb::{
    exchange, lower_exponent_experiment, verify, ExchangeCase, ExchangeOptions, KappaModel, LocalOptions,
};
use lpflow::poincare::{det_factor_check, flowbox_distortion, orbit_cocycle, PoincareCocycle};
use lpflow::spectrum::{exterior_power, le_k, lyapunov_exponents, SampleOptions};
use lpflow::stats::stream_rng;
use lpflow::synthetic::{case_for, designated_nondominated};

const H: f64 = 0.01;
const T: usize = 1000;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cocycle(id: &str, stream: u64, units: usize) -> (FlowModel, PoincareCocycle) {
    let model = FlowModel::builtin(id).unwrap();
    let p = model.sample_point(&mut stream_rng(1000, stream));
    let (_, coc) = orbit_cocycle(&model, &p, H, units).unwrap();
    (model, coc)
}

fn ac1_cat_exponents() -> Outcome {
    let l = ((3.0 + 5f64.sqrt()) / 2.0).ln();
    let start = Instant::now();
    let (_, coc) = cocycle("cat_suspension", 0, T);
    let e = lyapunov_exponents(&coc, T).map_err(|e| e.to_string())?.exponents;
    let elapsed = start.elapsed();
    let err = (e[0] - l).abs().max((e[1] + l).abs());
    check(
        err <= 1e-3 && elapsed < Duration::from_secs(10),
        format!("exponents {:.6} {:.6}, error {err:.2e}, {elapsed:.2?}", e[0], e[1]),
    )
}

fn ac2_zero_sum() -> Outcome {
    let mut worst = 0.0f64;
    for id in BUILTIN_IDS {
        for i in 0..4 {
            let (_, coc) = cocycle(id, i, T);
            let r = lyapunov_exponents(&coc, T).map_err(|e| e.to_string())?;
            worst = worst.max(r.sum().abs());
        }
    }
    check(worst <= 2e-3, format!("max |sum| {worst:.2e} over 4 points per built-in"))
}

fn ac3_determinant_identity() -> Outcome {
    let mut worst = 0.0f64;
    for id in BUILTIN_IDS {
        for i in 0..4 {
            let (_, coc) = cocycle(id, i, T);
            assert_eq!(coc.len(), T);
            worst = worst.max(det_factor_check(&coc));
        }
    }
    check(worst <= 1e-6, format!("max ||det A_j| x_j - 1| {worst:.2e}"))
}

fn ac4_exterior_additivity() -> Outcome {
    let (_, coc) = cocycle("product_hyperbolic", 0, T);
    let r = lyapunov_exponents(&coc, T).map_err(|e| e.to_string())?;
    let top = exterior_power(&coc, 2)
        .and_then(|w| w.top_exponent(T))
        .map_err(|e| e.to_string())?;
    let err = (top - (r.exponents[0] + r.exponents[1])).abs();
    check(err <= 2e-3, format!("top(wedge^2) {top:.6}, lambda_1 + lambda_2 {:.6}, error {err:.2e}", r.exponents[0] + r.exponents[1]))
}

fn ac5_domination_regression() -> Outcome {
    let grid: Vec<usize> = (1..=10).collect();
    let opts = ScanOptions::default();
    let (_, cat) = cocycle("cat_suspension", 0, 200);
    let report = scan_orbit(&cat, 1, &grid, &opts, "cat").map_err(|e| e.to_string())?;
    let lambda = cat_eigenvalue();
    let mut worst_rel = 0.0f64;
    let mut all_lambda = true;
    for e in &report.entries {
        all_lambda &= e.verdict == Verdict::Dominated;
        let expected = lambda.powi(-2 * e.m as i32);
        worst_rel = worst_rel.max((e.ratio_max - expected).abs() / expected);
    }
    let (_, winding) = cocycle("irrational_winding", 0, 200);
    let report = scan_orbit(&winding, 1, &grid, &opts, "winding").map_err(|e| e.to_string())?;
    let all_gamma = report.entries.iter().all(|e| e.verdict == Verdict::NotDominated);
    let mut worst_one = 0.0f64;
    for &m in &grid {
        for (_, r) in lpflow::domination::ratios(&winding, &split_of(&winding), m).map_err(|e| e.to_string())? {
            worst_one = worst_one.max((r - 1.0).abs());
        }
    }
    check(
        all_lambda && worst_rel <= 1e-3 && all_gamma && worst_one <= 1e-9,
        format!(
            "cat Lambda at m=1..10: {all_lambda}, max rel error vs lambda^-2m {worst_rel:.2e}; winding Gamma: {all_gamma}, max |rho - 1| {worst_one:.2e}"
        ),
    )
}

fn split_of(coc: &PoincareCocycle) -> lpflow::domination::Splitting {
    let o = ScanOptions::default();
    lpflow::domination::oseledets_splitting(coc, 1, o.past, coc.len() - o.past - o.future, o.past, o.future).unwrap()
}

struct CampaignStats {
    cases: usize,
    failures: Vec<String>,
    worst_residual: f64,
}

fn schedule_violation(cert: &lpflow::perturb::ExchangeCertificate, m: usize, eps: f64) -> Option<String> {
    let c = &cert.constants;
    let s = c.xi0.sin();
    let s6 = s.powi(6);
    if c.c < 1.0 / (s * s) {
        return Some(format!("c {} < 1/sin^2 xi0", c.c));
    }
    if 8.0 * SQRT_2 * c.c * c.theta.sin() >= eps * s6 {
        return Some("8 sqrt2 c sin theta >= eps sin^6 xi0".into());
    }
    if (m as f64) < 2.0 * PI / c.theta {
        return Some(format!("m {m} < 2 pi / theta"));
    }
    let guard = 8.0 * c.c / s6;
    if (c.quotient_bound - guard).abs() > 1e-9 * guard {
        return Some(format!("quotient bound {} differs from 8c/sin^6 xi0 = {guard}", c.quotient_bound));
    }
    if let Some(q) = c.quotient_cond {
        if q > guard {
            return Some(format!("quotient condition {q} > {guard}"));
        }
    }
    if cert.case == ExchangeCase::RotationChain && c.quotient_cond.is_none() {
        return Some("chain certificate without quotient condition".into());
    }
    None
}

fn ac6_exchange_certificates() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let opts = ExchangeOptions {
        kappa_model: KappaModel {
            lambda: 0.9999,
            sigma: 0.95,
        },
    };
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for case in [ExchangeCase::SmallAngle, ExchangeCase::NormRatio, ExchangeCase::RotationChain] {
        let results: Vec<Result<f64, String>> = pool.install(|| {
            (0..1000u64)
                .into_par_iter()
                .map(|i| {
                    let sc = case_for(case, &mut stream_rng(6000 + case as u64, i)).map_err(|e| format!("#{i}: {e}"))?;
                    let (plan, cert) = exchange(&sc.coc, &sc.split, sc.m, sc.epsilon, 0.5, &opts)
                        .map_err(|e| format!("#{i}: {e}"))?;
                    if cert.case != case {
                        return Err(format!("#{i}: classified as {}", cert.case));
                    }
                    let v = verify(&plan, &cert);
                    if !v.passed {
                        return Err(format!("#{i}: verification {v:?}"));
                    }
                    if let Some(why) = schedule_violation(&cert, sc.m, sc.epsilon) {
                        return Err(format!("#{i}: {why}"));
                    }
                    Ok(v.residual)
                })
                .collect()
        });
        let stats = CampaignStats {
            cases: results.len(),
            worst_residual: results.iter().filter_map(|r| r.as_ref().ok()).copied().fold(0.0, f64::max),
            failures: results.into_iter().filter_map(Result::err).collect(),
        };
        ok &= stats.failures.is_empty() && stats.worst_residual <= 1e-8;
        lines.push(format!(
            "{case}: {} cases, {} failures, max residual {:.2e}{}",
            stats.cases,
            stats.failures.len(),
            stats.worst_residual,
            stats.failures.first().map_or_else(String::new, |f| format!(" (first: {f})"))
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    check(ok, format!("{}; {elapsed:.2?} on 4 workers", lines.join("; ")))
}

fn ac7_local_lowering() -> Outcome {
    let d = designated_nondominated();
    let opts = LocalOptions {
        k: d.k,
        delta: 0.1,
        epsilon: d.epsilon,
        kappa: 0.5,
        horizon: 200,
        base: d.base,
        m: None,
        past: d.past,
        future: d.future,
        exchange: ExchangeOptions {
            kappa_model: KappaModel {
                lambda: 0.9999,
                sigma: 0.95,
            },
        },
    };
    let out = lower_exponent_experiment(&d.coc, &opts).map_err(|e| e.to_string())?;
    let dev_ok = out.chain.max_deviation() <= d.epsilon;
    check(
        out.rate < out.bound && out.unperturbed_rate >= out.bound && dev_ok,
        format!(
            "perturbed {:.4} < bound {:.4} <= unperturbed {:.4} at t = 200, deviation within eps: {dev_ok}",
            out.rate, out.bound, out.unperturbed_rate
        ),
    )
}

fn ac8_flowbox() -> Outcome {
    const SAMPLES: usize = 100_000;
    let mut parts = Vec::new();
    let mut ok = true;
    for id in ["cat_suspension", "irrational_winding"] {
        let model = FlowModel::builtin(id).unwrap();
        let p = model.sample_point(&mut stream_rng(8000, 0));
        let est = flowbox_distortion(&model, &p, 1.0, 0.01, SAMPLES, H, 8).map_err(|e| e.to_string())?;
        ok &= est.distortion <= 3.0 * est.std_error;
        parts.push(format!("{id} {:.2e} (se {:.2e})", est.distortion, est.std_error));
    }
    let model = FlowModel::abc_flow_default();
    let p = model.sample_point(&mut stream_rng(8000, 0));
    let mut prev: Option<f64> = None;
    for r in [0.01, 0.005, 0.0025] {
        let est = flowbox_distortion(&model, &p, 1.0, r, SAMPLES, H, 8).map_err(|e| e.to_string())?;
        if let Some(d) = prev {
            let order = (d / est.distortion).log2();
            ok &= est.distortion < d && order >= 0.8;
            parts.push(format!("abc r={r} order {order:.2}"));
        }
        prev = Some(est.distortion);
    }
    check(ok, parts.join("; "))
}

fn ac9_subadditivity() -> Outcome {
    let opts = SampleOptions {
        n_points: 128,
        step: H,
        seed: 9000,
    };
    let mut tested = 0;
    let mut bad = Vec::new();
    for id in BUILTIN_IDS {
        let model = FlowModel::builtin(id).unwrap();
        for k in 1..=model.fiber_dim() {
            let report = le_k(&model, k, 50, &opts).map_err(|e| e.to_string())?;
            tested += report.checks.len();
            for c in report.checks.iter().filter(|c| !c.holds) {
                bad.push(format!("{id} k={k} ({}, {})", c.i, c.j));
            }
        }
    }
    check(bad.is_empty(), format!("{tested} pairs tested on all built-ins and k, violations {bad:?}"))
}

fn report_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn ac10_determinism() -> Outcome {
    let runs: [&[&str]; 3] = [
        &["exponents", "--model", "abc_flow", "--samples", "4", "--horizon", "300", "--seed", "10"],
        &["classify", "--model", "abc_flow", "--samples", "4", "--horizon", "300", "--seed", "10"],
        &["domination", "--model", "cat_suspension", "--samples", "2", "--horizon", "200", "--seed", "10", "--map"],
    ];
    let mut compared = 0;
    for args in runs {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for (i, d) in dirs.iter().enumerate() {
            let status = Command::new(env!("CARGO_BIN_EXE_lpflow"))
                .args(args)
                .args(["--workers", if i == 0 { "1" } else { "4" }])
                .arg("--output-dir")
                .arg(d.path())
                .output()
                .unwrap()
                .status;
            if !status.success() {
                return Err(format!("{} exited with {status}", args[0]));
            }
        }
        let (a, b) = (report_files(dirs[0].path()), report_files(dirs[1].path()));
        if a.is_empty() || a != b {
            return Err(format!("{} reports differ between runs", args[0]));
        }
        compared += a.len();
    }
    Ok(format!("{compared} report files byte-identical across repeated runs"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC1 cat-suspension exponents", ac1_cat_exponents),
        ("AC2 zero-sum law", ac2_zero_sum),
        ("AC3 determinant identity", ac3_determinant_identity),
        ("AC4 exterior-power additivity", ac4_exterior_additivity),
        ("AC5 domination regression", ac5_domination_regression),
        ("AC6 exchange certificates", ac6_exchange_certificates),
        ("AC7 local lowering inequality", ac7_local_lowering),
        ("AC8 flowbox distortion", ac8_flowbox),
        ("AC9 LE_k subadditivity", ac9_subadditivity),
        ("AC10 determinism", ac10_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
