//! Line-oriented text formats for cocycles, orbits, plans and certificates,
//! plus the TOML loader for custom models.
//!
//! Every record is one line of whitespace-separated tokens; lines starting
//! with `#` after the header are comments. Floats are written with `{}`,
//! which round-trips exactly, so a saved plan replays bit for bit. Parse
//! errors carry the byte offset of the offending token.
//!
//! ```text
//! # lpflow cocycle v1
//! dim 2
//! len 1
//! block 0 x 1 a 2 1 1 1
//! ```

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::integrator::OrbitSegment;
use crate::model::{Domain, Field, FlowModel, GroundTruth, Term, TermKind};
use crate::perturb::{
    CertificateConstants, ExchangeCase, ExchangeCertificate, PlanStep, RealizablePlan, StepKind,
};
use crate::poincare::PoincareCocycle;
use crate::stats::stream_rng;

pub const COCYCLE_HEADER: &str = "# lpflow cocycle v1";
pub const ORBIT_HEADER: &str = "# lpflow orbit v1";
pub const PLAN_HEADER: &str = "# lpflow plan v1";

/// Largest fiber dimension or record count accepted from a file.
const MAX_DIM: usize = 64;
const MAX_RECORDS: usize = 1 << 22;

type Tok<'a> = (usize, &'a str);

struct Reader<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(src: &'a str) -> Self {
        Reader { src, pos: 0 }
    }

    fn raw_line(&mut self) -> Option<(usize, &'a str)> {
        if self.pos >= self.src.len() {
            return None;
        }
        let start = self.pos;
        let rest = &self.src[start..];
        let end = rest.find('\n').map_or(rest.len(), |i| i);
        self.pos = start + end + 1;
        Some((start, rest[..end].trim_end_matches('\r')))
    }

    fn header(&mut self, expected: &str) -> Result<()> {
        match self.raw_line() {
            Some((_, line)) if line.trim() == expected => Ok(()),
            Some((off, _)) => Err(Error::parse(off, format!("expected header `{expected}`"))),
            None => Err(Error::parse(0, "empty input")),
        }
    }

    /// Next non-blank, non-comment line split into tokens.
    fn record(&mut self) -> Option<Vec<Tok<'a>>> {
        while let Some((off, line)) = self.raw_line() {
            let trimmed = line.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut toks = Vec::new();
            let mut i = 0;
            let bytes = line.as_bytes();
            while i < bytes.len() {
                while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                let s = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                if s < i {
                    toks.push((off + s, &line[s..i]));
                }
            }
            return Some(toks);
        }
        None
    }

    fn expect_record(&mut self, what: &str) -> Result<Record<'a>> {
        let at = self.src.len();
        let toks = self
            .record()
            .ok_or_else(|| Error::parse(at, format!("unexpected end of input, expected {what}")))?;
        Ok(Record { toks, i: 0, end: at })
    }

    fn finish(&mut self) -> Result<()> {
        match self.record() {
            None => Ok(()),
            Some(t) => Err(Error::parse(t[0].0, "trailing data")),
        }
    }
}

struct Record<'a> {
    toks: Vec<Tok<'a>>,
    i: usize,
    end: usize,
}

impl<'a> Record<'a> {
    fn next(&mut self, what: &str) -> Result<Tok<'a>> {
        let end = self.toks.last().map_or(self.end, |(o, s)| o + s.len());
        let t = self
            .toks
            .get(self.i)
            .copied()
            .ok_or_else(|| Error::parse(end, format!("missing {what}")))?;
        self.i += 1;
        Ok(t)
    }

    fn key(&mut self, key: &str) -> Result<()> {
        let (off, s) = self.next(key)?;
        if s != key {
            return Err(Error::parse(off, format!("expected `{key}`, found `{s}`")));
        }
        Ok(())
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let (off, s) = self.next(what)?;
        s.parse::<f64>()
            .map_err(|_| Error::parse(off, format!("invalid number `{s}` for {what}")))
    }

    fn opt_f64(&mut self, what: &str) -> Result<Option<f64>> {
        let (off, s) = self.next(what)?;
        if s == "-" {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| Error::parse(off, format!("invalid number `{s}` for {what}")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.usize_at(what)?.1)
    }

    fn usize_at(&mut self, what: &str) -> Result<(usize, usize)> {
        let (off, s) = self.next(what)?;
        s.parse::<usize>()
            .map(|v| (off, v))
            .map_err(|_| Error::parse(off, format!("invalid integer `{s}` for {what}")))
    }

    fn opt_usize(&mut self, what: &str) -> Result<Option<usize>> {
        let (off, s) = self.next(what)?;
        if s == "-" {
            return Ok(None);
        }
        s.parse::<usize>()
            .map(Some)
            .map_err(|_| Error::parse(off, format!("invalid integer `{s}` for {what}")))
    }

    fn keyed_f64(&mut self, key: &str) -> Result<f64> {
        self.key(key)?;
        self.f64(key)
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        self.key(key)?;
        self.usize(key)
    }

    fn floats(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        (0..count).map(|_| self.f64(what)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(rows, cols, &self.floats(rows * cols, what)?))
    }

    fn done(&self) -> Result<()> {
        match self.toks.get(self.i) {
            None => Ok(()),
            Some((off, s)) => Err(Error::parse(*off, format!("unexpected token `{s}`"))),
        }
    }
}

fn utf8(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| Error::parse(e.valid_up_to(), "invalid UTF-8"))
}

fn bounded(off: usize, value: usize, max: usize, what: &str) -> Result<usize> {
    if value == 0 || value > max {
        return Err(Error::parse(off, format!("{what} {value} outside 1..={max}")));
    }
    Ok(value)
}

fn push_floats<'a>(out: &mut String, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        let _ = write!(out, " {v}");
    }
}

fn push_matrix(out: &mut String, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let _ = write!(out, " {}", m[(i, j)]);
        }
    }
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub fn write_cocycle(coc: &PoincareCocycle) -> String {
    let mut out = format!("{COCYCLE_HEADER}\ndim {}\nlen {}\n", coc.dim(), coc.len());
    for (j, (a, x)) in coc.blocks.iter().zip(&coc.x_factors).enumerate() {
        let _ = write!(out, "block {j} x {x} a");
        push_matrix(&mut out, a);
        out.push('\n');
    }
    out
}

pub fn parse_cocycle(src: &str) -> Result<PoincareCocycle> {
    let mut r = Reader::new(src);
    r.header(COCYCLE_HEADER)?;
    let mut rec = r.expect_record("dim")?;
    rec.key("dim")?;
    let (off, n) = rec.usize_at("dim")?;
    let n = bounded(off, n, MAX_DIM, "dim")?;
    rec.done()?;
    let mut rec = r.expect_record("len")?;
    rec.key("len")?;
    let (off, len) = rec.usize_at("len")?;
    let len = bounded(off, len, MAX_RECORDS, "len")?;
    rec.done()?;
    let mut blocks = Vec::new();
    let mut xs = Vec::new();
    for j in 0..len {
        let mut rec = r.expect_record("block")?;
        rec.key("block")?;
        let (off, idx) = rec.usize_at("block index")?;
        if idx != j {
            return Err(Error::parse(off, format!("expected block {j}, found {idx}")));
        }
        xs.push(rec.keyed_f64("x")?);
        rec.key("a")?;
        blocks.push(rec.matrix(n, n, "block entry")?);
        rec.done()?;
    }
    r.finish()?;
    PoincareCocycle::from_blocks(blocks, Some(xs))
}

pub fn parse_cocycle_bytes(bytes: &[u8]) -> Result<PoincareCocycle> {
    parse_cocycle(utf8(bytes)?)
}

/// Rows of a saved orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitTable {
    pub model_id: String,
    pub dim: usize,
    pub step: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub speeds: Vec<f64>,
}

pub fn write_orbit(orbit: &OrbitSegment) -> String {
    let dim = orbit.p0.len();
    let mut out = format!(
        "{ORBIT_HEADER}\nmodel {}\ndim {dim}\nstep {}\nrows {}\n",
        orbit.model_id,
        orbit.step,
        orbit.states.len()
    );
    for (j, (x, s)) in orbit.states.iter().zip(&orbit.speeds).enumerate() {
        let _ = write!(out, "{}", orbit.time(j));
        push_floats(&mut out, x.iter());
        let _ = writeln!(out, " {s}");
    }
    out
}

pub fn parse_orbit(src: &str) -> Result<OrbitTable> {
    let mut r = Reader::new(src);
    r.header(ORBIT_HEADER)?;
    let mut rec = r.expect_record("model")?;
    rec.key("model")?;
    let model_id = rec.next("model id")?.1.to_string();
    rec.done()?;
    let mut rec = r.expect_record("dim")?;
    rec.key("dim")?;
    let (off, dim) = rec.usize_at("dim")?;
    let dim = bounded(off, dim, MAX_DIM, "dim")?;
    rec.done()?;
    let mut rec = r.expect_record("step")?;
    let step = rec.keyed_f64("step")?;
    rec.done()?;
    let mut rec = r.expect_record("rows")?;
    rec.key("rows")?;
    let (off, rows) = rec.usize_at("rows")?;
    let rows = bounded(off, rows, MAX_RECORDS, "rows")?;
    rec.done()?;
    let mut table = OrbitTable {
        model_id,
        dim,
        step,
        times: Vec::new(),
        states: Vec::new(),
        speeds: Vec::new(),
    };
    for _ in 0..rows {
        let mut rec = r.expect_record("orbit row")?;
        table.times.push(rec.f64("time")?);
        table.states.push(DVector::from_vec(rec.floats(dim, "state")?));
        table.speeds.push(rec.f64("speed")?);
        rec.done()?;
    }
    r.finish()?;
    Ok(table)
}

pub fn parse_orbit_bytes(bytes: &[u8]) -> Result<OrbitTable> {
    parse_orbit(utf8(bytes)?)
}

/// Serialises a plan and, when present, its exchange certificate.
pub fn write_plan(plan: &RealizablePlan, cert: Option<&ExchangeCertificate>) -> String {
    let n = plan.dim();
    let mut out = format!(
        "{PLAN_HEADER}\ndim {n}\nbase {}\nlen {}\nepsilon {}\nkappa {}\nkappa_spent {}\ngamma {}\n",
        plan.base,
        plan.len(),
        plan.epsilon,
        plan.kappa,
        plan.kappa_spent,
        plan.gamma
    );
    for s in &plan.steps {
        let _ = write!(out, "step {} {}", s.mark, s.kind.name());
        match &s.kind {
            StepKind::Passthrough => out.push_str(" angle 0 plane -"),
            StepKind::Rotation { plane, angle }
            | StepKind::BackRotation { plane, angle }
            | StepKind::Elliptic { plane, angle } => {
                let _ = write!(out, " angle {angle} plane");
                push_matrix(&mut out, plane);
            }
        }
        out.push_str(" l");
        push_matrix(&mut out, &s.l);
        out.push_str(" a");
        push_matrix(&mut out, &s.a);
        out.push('\n');
    }
    match cert {
        None => out.push_str("certificate none\n"),
        Some(c) => {
            let _ = writeln!(out, "certificate {}", c.case);
            out.push('u');
            push_floats(&mut out, c.u.iter());
            out.push_str("\ns");
            push_floats(&mut out, c.s.iter());
            let k = &c.constants;
            let _ = writeln!(
                out,
                "\nresidual {}\nconstants xi0 {} c {} theta {} m {} epsilon {} quotient_bound {} t {} r {} varrho {} quotient_cond {} total_angle {}",
                c.residual,
                k.xi0,
                k.c,
                k.theta,
                k.m,
                k.epsilon,
                k.quotient_bound,
                opt(&k.t),
                opt(&k.r),
                opt(&k.varrho),
                opt(&k.quotient_cond),
                opt(&k.total_angle)
            );
        }
    }
    out
}

fn parse_step(rec: &mut Record<'_>, n: usize, expected_mark: usize) -> Result<PlanStep> {
    rec.key("step")?;
    let (off, mark) = rec.usize_at("mark")?;
    if mark != expected_mark {
        return Err(Error::parse(off, format!("expected step at mark {expected_mark}, found {mark}")));
    }
    let (koff, kind) = rec.next("step kind")?;
    let angle = rec.keyed_f64("angle")?;
    rec.key("plane")?;
    let make = |plane| match kind {
        "rotation" => Ok(StepKind::Rotation { plane, angle }),
        "back-rotation" => Ok(StepKind::BackRotation { plane, angle }),
        "elliptic" => Ok(StepKind::Elliptic { plane, angle }),
        other => Err(Error::parse(koff, format!("unknown step kind `{other}`"))),
    };
    let kind = if kind == "passthrough" {
        let (poff, p) = rec.next("plane")?;
        if p != "-" {
            return Err(Error::parse(poff, "passthrough steps carry no plane"));
        }
        StepKind::Passthrough
    } else {
        make(rec.matrix(n, 2, "plane entry")?)?
    };
    rec.key("l")?;
    let l = rec.matrix(n, n, "L entry")?;
    rec.key("a")?;
    let a = rec.matrix(n, n, "A entry")?;
    rec.done()?;
    Ok(PlanStep { mark, kind, l, a })
}

pub fn parse_plan(src: &str) -> Result<(RealizablePlan, Option<ExchangeCertificate>)> {
    let mut r = Reader::new(src);
    r.header(PLAN_HEADER)?;
    let mut rec = r.expect_record("dim")?;
    rec.key("dim")?;
    let (off, n) = rec.usize_at("dim")?;
    let n = bounded(off, n, MAX_DIM, "dim")?;
    rec.done()?;
    let mut rec = r.expect_record("base")?;
    let base = rec.keyed_usize("base")?;
    rec.done()?;
    let mut rec = r.expect_record("len")?;
    rec.key("len")?;
    let (off, len) = rec.usize_at("len")?;
    let len = bounded(off, len, MAX_RECORDS, "len")?;
    rec.done()?;
    let mut scalars = [0.0; 4];
    for (slot, key) in scalars.iter_mut().zip(["epsilon", "kappa", "kappa_spent", "gamma"]) {
        let mut rec = r.expect_record(key)?;
        *slot = rec.keyed_f64(key)?;
        rec.done()?;
    }
    let mut steps = Vec::new();
    for j in 0..len {
        let mut rec = r.expect_record("step")?;
        let mark = base.checked_add(j).ok_or_else(|| Error::parse(rec.toks[0].0, "mark overflow"))?;
        steps.push(parse_step(&mut rec, n, mark)?);
    }
    let plan = RealizablePlan {
        base,
        steps,
        epsilon: scalars[0],
        kappa: scalars[1],
        kappa_spent: scalars[2],
        gamma: scalars[3],
    };
    let mut rec = r.expect_record("certificate")?;
    rec.key("certificate")?;
    let (coff, case) = rec.next("certificate case")?;
    rec.done()?;
    if case == "none" {
        r.finish()?;
        return Ok((plan, None));
    }
    let case: ExchangeCase = case.parse().map_err(|e: String| Error::parse(coff, e))?;
    let mut rec = r.expect_record("u")?;
    rec.key("u")?;
    let u = DVector::from_vec(rec.floats(n, "u entry")?);
    rec.done()?;
    let mut rec = r.expect_record("s")?;
    rec.key("s")?;
    let s = DVector::from_vec(rec.floats(n, "s entry")?);
    rec.done()?;
    let mut rec = r.expect_record("residual")?;
    let residual = rec.keyed_f64("residual")?;
    rec.done()?;
    let mut rec = r.expect_record("constants")?;
    rec.key("constants")?;
    let xi0 = rec.keyed_f64("xi0")?;
    let c = rec.keyed_f64("c")?;
    let theta = rec.keyed_f64("theta")?;
    let m = rec.keyed_usize("m")?;
    let epsilon = rec.keyed_f64("epsilon")?;
    let quotient_bound = rec.keyed_f64("quotient_bound")?;
    rec.key("t")?;
    let t = rec.opt_usize("t")?;
    rec.key("r")?;
    let rr = rec.opt_usize("r")?;
    rec.key("varrho")?;
    let varrho = rec.opt_f64("varrho")?;
    rec.key("quotient_cond")?;
    let quotient_cond = rec.opt_f64("quotient_cond")?;
    rec.key("total_angle")?;
    let total_angle = rec.opt_f64("total_angle")?;
    rec.done()?;
    r.finish()?;
    Ok((
        plan,
        Some(ExchangeCertificate {
            case,
            u,
            s,
            residual,
            constants: CertificateConstants {
                xi0,
                c,
                theta,
                m,
                epsilon,
                quotient_bound,
                t,
                r: rr,
                varrho,
                quotient_cond,
                total_angle,
            },
        }),
    ))
}

pub fn parse_plan_bytes(bytes: &[u8]) -> Result<(RealizablePlan, Option<ExchangeCertificate>)> {
    parse_plan(utf8(bytes)?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    id: String,
    periods: Vec<f64>,
    #[serde(default = "yes")]
    wrap: bool,
    #[serde(default)]
    terms: Vec<TermFile>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermFile {
    component: usize,
    coeff: f64,
    kind: String,
    #[serde(default)]
    freq: Option<Vec<f64>>,
    #[serde(default)]
    phase: f64,
    #[serde(default)]
    powers: Option<Vec<u32>>,
}

/// Tolerance on `|div X|` at the random probe points of a loaded model.
pub const MODEL_DIVERGENCE_TOL: f64 = 1e-9;
const MODEL_PROBES: usize = 1000;

/// Loads a torus model from TOML:
///
/// ```toml
/// id = "shear"
/// periods = [6.283185307179586, 6.283185307179586, 6.283185307179586]
/// wrap = true           # optional, default true
///
/// [[terms]]
/// component = 0         # which coordinate of X the term adds to
/// coeff = 1.0
/// kind = "sin"          # "sin" | "cos" with freq and phase, or "monomial" with powers
/// freq = [0.0, 1.0, 0.0]
/// phase = 0.0
/// ```
///
/// The field is rejected unless its divergence vanishes at a fixed set of
/// random probe points.
pub fn parse_model_toml(src: &str) -> Result<FlowModel> {
    let file: ModelFile = toml::from_str(src).map_err(|e| {
        Error::parse(e.span().map_or(0, |s| s.start), e.message().to_string())
    })?;
    let dim = file.periods.len();
    if !(2..=MAX_DIM).contains(&dim) {
        return Err(Error::invalid(format!("periods must list 2..={MAX_DIM} entries")));
    }
    if file.periods.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::invalid("periods must be positive and finite"));
    }
    let mut terms = Vec::with_capacity(file.terms.len());
    for (i, t) in file.terms.into_iter().enumerate() {
        if t.component >= dim {
            return Err(Error::invalid(format!("terms[{i}].component {} >= dim {dim}", t.component)));
        }
        if !t.coeff.is_finite() || !t.phase.is_finite() {
            return Err(Error::invalid(format!("terms[{i}] has a non-finite coefficient")));
        }
        let kind = match t.kind.as_str() {
            "sin" | "cos" => {
                let freq = t
                    .freq
                    .ok_or_else(|| Error::invalid(format!("terms[{i}].freq is required for `{}`", t.kind)))?;
                if freq.len() != dim || freq.iter().any(|f| !f.is_finite()) {
                    return Err(Error::invalid(format!("terms[{i}].freq must list {dim} finite numbers")));
                }
                if t.kind == "sin" {
                    TermKind::Sin { freq, phase: t.phase }
                } else {
                    TermKind::Cos { freq, phase: t.phase }
                }
            }
            "monomial" => {
                let powers = t
                    .powers
                    .ok_or_else(|| Error::invalid(format!("terms[{i}].powers is required for `monomial`")))?;
                if powers.len() != dim || powers.iter().any(|&p| p > 16) {
                    return Err(Error::invalid(format!("terms[{i}].powers must list {dim} exponents <= 16")));
                }
                TermKind::Monomial { powers }
            }
            other => return Err(Error::invalid(format!("terms[{i}].kind `{other}` is not sin, cos or monomial"))),
        };
        terms.push(Term {
            component: t.component,
            coeff: t.coeff,
            kind,
        });
    }
    let model = FlowModel {
        id: file.id,
        dim,
        field: Field::Terms(terms),
        domain: Domain::Torus {
            periods: file.periods,
            wrap: file.wrap,
        },
        truth: GroundTruth::default(),
    };
    model.check_divergence_free(&mut stream_rng(0, 0), MODEL_PROBES, MODEL_DIVERGENCE_TOL)?;
    Ok(model)
}

pub fn parse_model_bytes(bytes: &[u8]) -> Result<FlowModel> {
    parse_model_toml(utf8(bytes)?)
}
