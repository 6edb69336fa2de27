//! Subcommand implementations. Each writes its reports through a
//! [`RunOutput`] and returns the text echoed to stdout.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

use lpflow::domination::{oseledets_splitting, scan_orbit, ScanOptions, Verdict};
use lpflow::error::Error;
use lpflow::model::FlowModel;
use lpflow::perturb::{
    exchange, lower_exponent_experiment, schedule, verify, ExchangeOptions, KappaModel,
    LocalOptions, RealizablePlan, Verification, DET_TOL,
};
use lpflow::poincare::{flowbox_distortion, orbit_cocycle, PoincareCocycle};
use lpflow::spectrum::{gap_integral, le_k, lyapunov_exponents, GapOptions, SampleOptions, GAP_FACTOR};
use lpflow::stats::{proportion_se, stream_rng};
use lpflow::synthetic::designated_nondominated;
use lpflow::textio::{parse_cocycle_bytes, parse_model_bytes, parse_plan_bytes, write_plan};

use crate::config::ExperimentConfig;
use crate::output::RunOutput;
use crate::{output_dir, resolve_config, CliError, Command, PerturbMode};

pub fn dispatch(cmd: &Command) -> Result<String, CliError> {
    match cmd {
        Command::Exponents(c) => run(c, "exponents", cmd_exponents),
        Command::Domination { common, map } => run(common, "domination", |cfg, out| cmd_domination(cfg, out, *map)),
        Command::Classify(c) => run(c, "classify", cmd_classify),
        Command::LeK(c) => run(c, "le-k", cmd_le_k),
        Command::Perturb { mode, common } => match mode {
            PerturbMode::Exchange => run(common, "perturb-exchange", cmd_perturb_exchange),
            PerturbMode::Local => run(common, "perturb-local", cmd_perturb_local),
        },
        Command::Replay { path, common } => run(common, "replay", |cfg, out| cmd_replay(cfg, out, path)),
        Command::Flowbox(c) => run(c, "flowbox", cmd_flowbox),
    }
}

fn run<F>(common: &crate::Common, name: &str, body: F) -> Result<String, CliError>
where
    F: FnOnce(&ExperimentConfig, &mut RunOutput) -> Result<String, CliError>,
{
    let cfg = resolve_config(common)?;
    let mut out = RunOutput::create(&output_dir(&cfg), name)?;
    let text = body(&cfg, &mut out);
    // The manifest is written even when the command fails.
    out.finish(&cfg)?;
    text
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<FlowModel, CliError> {
    match &cfg.model_file {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            Ok(parse_model_bytes(&bytes)?)
        }
        None => Ok(FlowModel::builtin(&cfg.model)?),
    }
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        b = b.num_threads(w);
    }
    b.build().map_err(|e| CliError::Io(format!("worker pool: {e}")))
}

/// Seeded base points, one RNG stream per point.
fn points(model: &FlowModel, cfg: &ExperimentConfig) -> Vec<DVector<f64>> {
    (0..cfg.samples)
        .map(|i| model.sample_point(&mut stream_rng(cfg.seed, i as u64)))
        .collect()
}

/// Runs `f` over the sample points on the worker pool; results keep point
/// order so reports do not depend on scheduling.
fn per_point<T, F>(cfg: &ExperimentConfig, pts: &[DVector<f64>], f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize, &DVector<f64>) -> Result<T, Error> + Sync,
{
    let results: Vec<Result<T, Error>> =
        pool(cfg)?.install(|| pts.par_iter().enumerate().map(|(i, p)| f(i, p)).collect());
    results.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
        .collect()
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:>10.6}")).collect::<Vec<_>>().join(" ")
}

fn header(cfg: &ExperimentConfig, what: &str, model: &str) -> String {
    format!(
        "# lpflow {what} model={model} horizon={} step={} samples={} seed={}\n",
        cfg.horizon, cfg.step, cfg.samples, cfg.seed
    )
}

#[derive(Debug, Serialize)]
pub struct ExponentRecord {
    pub point: usize,
    pub p0: Vec<f64>,
    pub exponents: Vec<f64>,
    pub sum: f64,
    pub volume_rate: f64,
    pub convergence: Vec<f64>,
    pub generic: bool,
}

fn source_cocycle(cfg: &ExperimentConfig) -> Result<Option<PoincareCocycle>, CliError> {
    match cfg.cocycle.as_deref() {
        None => Ok(None),
        Some("designated") => Ok(Some(designated_nondominated().coc)),
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(Path::new(path), e))?;
            Ok(Some(parse_cocycle_bytes(&bytes)?))
        }
    }
}

fn cmd_exponents(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<String, CliError> {
    let (name, records) = if let Some(coc) = source_cocycle(cfg)? {
        let horizon = cfg.horizon.min(coc.len());
        let r = lyapunov_exponents(&coc, horizon)?;
        let rec = ExponentRecord {
            point: 0,
            p0: Vec::new(),
            sum: r.sum(),
            volume_rate: r.volume_rate,
            generic: r.is_generic(),
            exponents: r.exponents,
            convergence: r.convergence,
        };
        (cfg.cocycle.clone().unwrap_or_default(), vec![rec])
    } else {
        let model = load_model(cfg)?;
        let pts = points(&model, cfg);
        let recs = per_point(cfg, &pts, |i, p| {
            let (_, coc) = orbit_cocycle(&model, p, cfg.step, cfg.horizon)?;
            let r = lyapunov_exponents(&coc, cfg.horizon)?;
            Ok(ExponentRecord {
                point: i,
                p0: p.iter().copied().collect(),
                sum: r.sum(),
                volume_rate: r.volume_rate,
                generic: r.is_generic(),
                exponents: r.exponents,
                convergence: r.convergence,
            })
        })?;
        (model.id.clone(), recs)
    };
    let mut text = header(cfg, "exponents", &name);
    let n = records.first().map_or(0, |r| r.exponents.len());
    let cols: Vec<String> = (1..=n).map(|i| format!("{:>10}", format!("lambda_{i}"))).collect();
    let _ = writeln!(text, "point {} {:>10} {:>10} generic", cols.join(" "), "sum", "drift");
    for r in &records {
        let drift = r.convergence.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(
            text,
            "{:>5} {} {:>10.6} {:>10.2e} {}",
            r.point,
            fmt_vec(&r.exponents),
            r.sum,
            drift,
            r.generic
        );
    }
    out.write("exponents.txt", &text)?;
    out.write("exponents.jsonl", &jsonl(&records))?;
    Ok(text)
}

#[derive(Debug, Serialize)]
pub struct DominationRecord {
    pub point: usize,
    pub k: usize,
    pub m: usize,
    pub ratio_max: Option<f64>,
    pub verdict: String,
    pub delta_marks: Vec<usize>,
    pub min_angle: Option<f64>,
    pub drift: Option<f64>,
    pub note: Option<String>,
}

fn domination_records(
    cfg: &ExperimentConfig,
    point: usize,
    coc: &PoincareCocycle,
) -> Result<Vec<DominationRecord>, Error> {
    let opts = ScanOptions {
        past: cfg.past,
        future: cfg.future,
    };
    let mut recs = Vec::new();
    let mut ks: Vec<usize> = cfg.k.iter().copied().filter(|&k| k < coc.dim()).collect();
    ks.dedup();
    for k in ks {
        match scan_orbit(coc, k, &cfg.m_grid, &opts, "") {
            Ok(report) => recs.extend(report.entries.into_iter().map(|e| DominationRecord {
                point,
                k,
                m: e.m,
                ratio_max: Some(e.ratio_max),
                verdict: e.verdict.to_string(),
                delta_marks: e.delta_marks,
                min_angle: Some(report.min_angle),
                drift: Some(report.drift),
                note: None,
            })),
            Err(e @ (Error::InconclusiveSplitting { .. } | Error::SplitDegenerate { .. })) => {
                recs.extend(cfg.m_grid.iter().map(|&m| DominationRecord {
                    point,
                    k,
                    m,
                    ratio_max: None,
                    verdict: Verdict::Inconclusive.to_string(),
                    delta_marks: Vec::new(),
                    min_angle: None,
                    drift: None,
                    note: Some(e.to_string()),
                }))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(recs)
}

fn cmd_domination(cfg: &ExperimentConfig, out: &mut RunOutput, map: bool) -> Result<String, CliError> {
    let (name, records) = if let Some(coc) = source_cocycle(cfg)? {
        (cfg.cocycle.clone().unwrap_or_default(), domination_records(cfg, 0, &coc)?)
    } else {
        let model = load_model(cfg)?;
        let pts = points(&model, cfg);
        let per = per_point(cfg, &pts, |i, p| {
            let (_, coc) = orbit_cocycle(&model, p, cfg.step, cfg.horizon)?;
            domination_records(cfg, i, &coc)
        })?;
        (model.id.clone(), per.into_iter().flatten().collect())
    };
    let mut text = header(cfg, "domination", &name);
    let _ = writeln!(text, "point     k     m  ratio_max      verdict  delta_marks");
    for r in &records {
        let ratio = r.ratio_max.map_or_else(|| format!("{:>10}", "-"), |x| format!("{x:>10.4e}"));
        let _ = writeln!(text, "{:>5} {:>5} {:>5} {ratio} {:>12} {:>12}", r.point, r.k, r.m, r.verdict, r.delta_marks.len());
    }
    out.write("domination.txt", &text)?;
    out.write("domination.jsonl", &jsonl(&records))?;
    if map {
        let mut tsv = String::from("point\tk\tm\tmark\n");
        for r in &records {
            for t in &r.delta_marks {
                let _ = writeln!(tsv, "{}\t{}\t{}\t{t}", r.point, r.k, r.m);
            }
        }
        out.write("domination_map.tsv", &tsv)?;
    }
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Class {
    #[serde(rename = "Z-like")]
    ZeroLike,
    #[serde(rename = "D-like")]
    DominatedLike,
    #[serde(rename = "unresolved")]
    Unresolved,
}

#[derive(Debug, Serialize)]
pub struct ClassificationRecord {
    pub point: usize,
    pub p0: Vec<f64>,
    pub verdict: Class,
    pub exponents: Vec<f64>,
    pub zero_threshold: f64,
    /// First `(k, m)` with a Λ verdict.
    pub dominated_at: Option<(usize, usize)>,
}

/// Z-like when every exponent is within `10/T` of zero, else D-like when
/// some index in `1..n` is m-dominated for some m of the grid.
pub fn classify_point(
    cfg: &ExperimentConfig,
    point: usize,
    p0: &DVector<f64>,
    coc: &PoincareCocycle,
) -> Result<ClassificationRecord, Error> {
    let report = lyapunov_exponents(coc, cfg.horizon.min(coc.len()))?;
    let threshold = GAP_FACTOR / report.horizon as f64;
    let mut rec = ClassificationRecord {
        point,
        p0: p0.iter().copied().collect(),
        verdict: Class::Unresolved,
        exponents: report.exponents.clone(),
        zero_threshold: threshold,
        dominated_at: None,
    };
    if report.exponents.iter().all(|l| l.abs() < threshold) {
        rec.verdict = Class::ZeroLike;
        return Ok(rec);
    }
    let opts = ScanOptions {
        past: cfg.past,
        future: cfg.future,
    };
    for k in 1..coc.dim() {
        let Ok(scan) = scan_orbit(coc, k, &cfg.m_grid, &opts, "") else {
            continue;
        };
        if let Some(e) = scan.entries.iter().find(|e| e.verdict == Verdict::Dominated) {
            rec.verdict = Class::DominatedLike;
            rec.dominated_at = Some((k, e.m));
            break;
        }
    }
    Ok(rec)
}

fn cmd_classify(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let pts = points(&model, cfg);
    let records = per_point(cfg, &pts, |i, p| {
        let (_, coc) = orbit_cocycle(&model, p, cfg.step, cfg.horizon)?;
        classify_point(cfg, i, p, &coc)
    })?;
    let mut text = header(cfg, "classify", &model.id);
    let _ = writeln!(text, "point  verdict     dominated_at  exponents");
    for r in &records {
        let at = r.dominated_at.map_or_else(|| "-".to_string(), |(k, m)| format!("k={k},m={m}"));
        let label = serde_json::to_value(r.verdict).expect("class serialises");
        let _ = writeln!(text, "{:>5}  {:<10}  {at:<12}  {}", r.point, label.as_str().unwrap_or(""), fmt_vec(&r.exponents));
    }
    let n = records.len();
    let _ = writeln!(text, "# summary over {n} points");
    for class in [Class::ZeroLike, Class::DominatedLike, Class::Unresolved] {
        let count = records.iter().filter(|r| r.verdict == class).count();
        let p = count as f64 / n as f64;
        let label = serde_json::to_value(class).expect("class serialises");
        let _ = writeln!(
            text,
            "{:<10} {count:>6} fraction {p:.4} se {:.4}",
            label.as_str().unwrap_or(""),
            proportion_se(p, n)
        );
    }
    out.write("classify.txt", &text)?;
    out.write("classify.jsonl", &jsonl(&records))?;
    Ok(text)
}

fn cmd_le_k(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let sample = SampleOptions {
        n_points: cfg.samples,
        step: cfg.step,
        seed: cfg.seed,
    };
    let mut text = header(cfg, "le-k", &model.id);
    let mut tsv = String::from("k\tj\tmean\tstd_error\trate\n");
    let pool = pool(cfg)?;
    for &k in &cfg.k {
        let report = pool.install(|| le_k(&model, k, cfg.j_max, &sample))?;
        for j in 1..=cfg.j_max {
            let _ = writeln!(
                tsv,
                "{k}\t{j}\t{}\t{}\t{}",
                report.means[j - 1],
                report.std_errors[j - 1],
                report.rate(j)
            );
        }
        let violations = report.checks.iter().filter(|c| !c.holds).count();
        let _ = writeln!(
            text,
            "k={k} inf_j a_j/j = {:.6} at j={} subadditivity violations {violations}/{}",
            report.infimum,
            report.argmin,
            report.checks.len()
        );
        if k < model.fiber_dim() {
            let gap = pool.install(|| {
                gap_integral(
                    &model,
                    k,
                    &GapOptions {
                        sample,
                        horizon: cfg.horizon,
                        m_grid: cfg.m_grid.clone(),
                        scan: ScanOptions {
                            past: cfg.past,
                            future: cfg.future,
                        },
                    },
                )
            })?;
            let _ = writeln!(
                text,
                "k={k} J_k = {:.6} se {:.6} ({} of {} points undominated, {} inconclusive)",
                gap.value, gap.std_error, gap.n_undominated, gap.n_points, gap.n_inconclusive
            );
        }
    }
    out.write("le_k.txt", &text)?;
    out.write("le_k.tsv", &tsv)?;
    Ok(text)
}

fn kappa_model(cfg: &ExperimentConfig) -> ExchangeOptions {
    ExchangeOptions {
        kappa_model: KappaModel {
            lambda: cfg.kappa_lambda,
            sigma: cfg.kappa_sigma,
        },
    }
}

fn perturb_cocycle(cfg: &ExperimentConfig, extra: usize) -> Result<(String, PoincareCocycle), CliError> {
    if let Some(coc) = source_cocycle(cfg)? {
        return Ok((cfg.cocycle.clone().unwrap_or_default(), coc));
    }
    let model = load_model(cfg)?;
    let p = model.sample_point(&mut stream_rng(cfg.seed, 0));
    let (_, coc) = orbit_cocycle(&model, &p, cfg.step, cfg.past + extra + cfg.future)?;
    Ok((model.id.clone(), coc))
}

fn verification_line(v: &Verification) -> String {
    format!(
        "residual {:e} max_deviation {:e} det_defect {:e} schedule_ok {} passed {}\n",
        v.residual, v.max_deviation, v.det_defect, v.schedule_ok, v.passed
    )
}

fn cmd_perturb_exchange(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<String, CliError> {
    let k = cfg.k[0];
    // The schedule depends on the cocycle, so a model orbit is first built
    // long enough for the requested or a horizon-sized window.
    let (name, coc) = perturb_cocycle(cfg, cfg.m.unwrap_or(cfg.horizon))?;
    let m = match cfg.m {
        Some(m) => m,
        None => schedule(&coc, cfg.epsilon)?.m_min,
    };
    if cfg.past + m + cfg.future > coc.len() {
        return Err(Error::InvalidInput(format!(
            "exchange length {m} with windows {}/{} exceeds cocycle length {}",
            cfg.past,
            cfg.future,
            coc.len()
        ))
        .into());
    }
    let split = oseledets_splitting(&coc, k, cfg.past, m, cfg.past, cfg.future)?;
    let (plan, cert) = exchange(&coc, &split, m, cfg.epsilon, cfg.kappa, &kappa_model(cfg))?;
    let v = verify(&plan, &cert);
    out.write("plan.txt", &write_plan(&plan, Some(&cert)))?;
    let mut text = header(cfg, "perturb exchange", &name);
    let _ = writeln!(
        text,
        "case {} m {} base {} k {k} kappa_spent {:e} kappa {}",
        cert.case, m, plan.base, plan.kappa_spent, plan.kappa
    );
    let c = &cert.constants;
    let _ = writeln!(text, "xi0 {} c {} theta {} quotient_bound {}", c.xi0, c.c, c.theta, c.quotient_bound);
    text.push_str(&verification_line(&v));
    out.write("perturb.txt", &text)?;
    if !v.passed {
        return Err(CliError::Verification(text));
    }
    Ok(text)
}

fn cmd_perturb_local(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<String, CliError> {
    let (name, coc) = perturb_cocycle(cfg, cfg.horizon)?;
    let opts = LocalOptions {
        k: cfg.k[0],
        delta: cfg.delta,
        epsilon: cfg.epsilon,
        kappa: cfg.kappa,
        horizon: cfg.horizon,
        base: cfg.past,
        m: cfg.m,
        past: cfg.past,
        future: cfg.future,
        exchange: kappa_model(cfg),
    };
    let res = lower_exponent_experiment(&coc, &opts)?;
    out.write("plan.txt", &write_plan(&res.chain, None))?;
    if let (Some(plan), Some(cert)) = (&res.exchange_plan, &res.certificate) {
        out.write("exchange_plan.txt", &write_plan(plan, Some(cert)))?;
    }
    let mut text = header(cfg, "perturb local", &name);
    let _ = writeln!(
        text,
        "k {} rate {:.6} unperturbed {:.6} bound {:.6} (delta {} sigma_prev {:.6} sigma_next {:.6})",
        opts.k, res.rate, res.unperturbed_rate, res.bound, cfg.delta, res.sigma_prev, res.sigma_next
    );
    let _ = writeln!(
        text,
        "exchange_mark {} case {} min_horizon {} met {}",
        res.exchange_mark.map_or_else(|| "-".into(), |t| t.to_string()),
        res.certificate.as_ref().map_or_else(|| "-".into(), |c| c.case.to_string()),
        res.min_horizon.map_or_else(|| "-".into(), |t| t.to_string()),
        res.rate < res.bound
    );
    out.write("local.txt", &text)?;
    Ok(text)
}

/// Checks of a plan without certificate: deviation and determinant budgets.
fn plan_checks(plan: &RealizablePlan) -> (bool, String) {
    let dev = plan.max_deviation();
    let det = plan.det_defect();
    let ok = dev <= plan.epsilon && det <= DET_TOL;
    (ok, format!("max_deviation {dev:e} det_defect {det:e} passed {ok}\n"))
}

fn cmd_replay(_cfg: &ExperimentConfig, out: &mut RunOutput, path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let (plan, cert) = parse_plan_bytes(&bytes)?;
    let mut text = format!("# lpflow replay {}\n", path.display());
    let passed = match &cert {
        Some(cert) => {
            let v = verify(&plan, cert);
            let _ = writeln!(text, "case {} steps {}", cert.case, plan.len());
            text.push_str(&verification_line(&v));
            v.passed
        }
        None => {
            let (ok, line) = plan_checks(&plan);
            let _ = writeln!(text, "plan without certificate, steps {}", plan.len());
            text.push_str(&line);
            ok
        }
    };
    let _ = writeln!(text, "verdict {}", if passed { "PASS" } else { "FAIL" });
    out.write("replay.txt", &text)?;
    if !passed {
        return Err(CliError::Verification(text));
    }
    Ok(text)
}

#[derive(Debug, Serialize)]
pub struct FlowboxRecord {
    pub radius: f64,
    pub distortion: f64,
    pub std_error: f64,
    pub relative: f64,
    pub relative_se: f64,
    pub x_t: f64,
    /// `log2(d(2r) / d(r))` against the previous radius.
    pub order: Option<f64>,
}

fn cmd_flowbox(cfg: &ExperimentConfig, out: &mut RunOutput) -> Result<String, CliError> {
    let model = load_model(cfg)?;
    let p = model.sample_point(&mut stream_rng(cfg.seed, 0));
    let pool = pool(cfg)?;
    let mut records: Vec<FlowboxRecord> = Vec::new();
    for i in 0..3 {
        let r = cfg.radius / f64::from(1u32 << i);
        let est = pool.install(|| flowbox_distortion(&model, &p, cfg.flow_time, r, cfg.samples, cfg.step, cfg.seed))?;
        let order = records.last().map(|prev| (prev.distortion / est.distortion).log2());
        records.push(FlowboxRecord {
            radius: r,
            distortion: est.distortion,
            std_error: est.std_error,
            relative: est.relative,
            relative_se: est.relative_se,
            x_t: est.x_t,
            order,
        });
    }
    let mut text = format!(
        "# lpflow flowbox model={} t={} samples={} seed={} p={:?}\n",
        model.id,
        cfg.flow_time,
        cfg.samples,
        cfg.seed,
        p.as_slice()
    );
    let _ = writeln!(text, "    radius   distortion    std_error     relative    order");
    for r in &records {
        let order = r.order.map_or_else(|| "-".to_string(), |o| format!("{o:.3}"));
        let _ = writeln!(
            text,
            "{:>10.6} {:>12.4e} {:>12.4e} {:>12.4e} {order:>8}",
            r.radius, r.distortion, r.std_error, r.relative
        );
    }
    out.write("flowbox.txt", &text)?;
    out.write("flowbox.jsonl", &jsonl(&records))?;
    Ok(text)
}
