//! The linear Poincaré cocycle in orthonormal normal frames.
//!
//! The normal fiber at a regular point is the orthogonal complement of the
//! flow direction. Frames are carried from one unit-time mark to the next by
//! pushing forward with DX^1, removing the flow component and
//! re-orthonormalising (Gram–Schmidt), so every block `A_j` is the matrix of
//! `Π ∘ DX^1` between consecutive frames. With this continuation the blocks
//! come out upper triangular.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrator::{
    self, advance, flow_with_tangent, integrate_orbit, integrate_tangent, OrbitSegment,
    TangentSegment, SPEED_FLOOR,
};
use crate::linalg::{mgs_qr, orthogonal_complement};
use crate::model::FlowModel;
use crate::stats::{stream_rng, Moments};

#[derive(Debug, Clone, PartialEq)]
pub struct NormalFrame {
    pub base: DVector<f64>,
    /// d×(d−1), orthonormal columns orthogonal to X(base).
    pub vectors: DMatrix<f64>,
}

impl NormalFrame {
    pub fn gram_defect(&self) -> f64 {
        let n = self.vectors.ncols();
        (self.vectors.transpose() * &self.vectors - DMatrix::identity(n, n)).amax()
    }
}

/// Frame of the normal fiber at `x`: the seed basis e_1, …, e_d is
/// Gram–Schmidt orthogonalised against X(x), taking at each stage the seed
/// vector that sticks out furthest.
pub fn normal_frame(model: &FlowModel, x: &DVector<f64>) -> Result<NormalFrame> {
    let v = model.eval_field(x);
    let speed = v.norm();
    if !(speed >= SPEED_FLOOR) {
        return Err(Error::SpeedUnderflow { step: 0, speed });
    }
    let unit = DMatrix::from_column_slice(model.dim, 1, (v / speed).as_slice());
    Ok(NormalFrame {
        base: x.clone(),
        vectors: orthogonal_complement(&unit, model.dim),
    })
}

/// Blocks of the linear Poincaré flow at unit-time marks.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincareCocycle {
    /// Frame at each mark `0..=len`; empty for synthetic cocycles.
    pub frames: Vec<NormalFrame>,
    pub blocks: Vec<DMatrix<f64>>,
    /// `x_j = ‖X(mark j+1)‖ / ‖X(mark j)‖`.
    pub x_factors: Vec<f64>,
}

impl PoincareCocycle {
    /// A cocycle given directly by its blocks, e.g. a synthetic test input.
    /// `x_factors` default to `1/|det A_j|` when not supplied.
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>, x_factors: Option<Vec<f64>>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::invalid("cocycle needs at least one block"));
        };
        let n = first.nrows();
        if n == 0 {
            return Err(Error::invalid("cocycle blocks must be nonempty"));
        }
        for (j, b) in blocks.iter().enumerate() {
            if b.nrows() != n || b.ncols() != n {
                return Err(Error::invalid(format!(
                    "block {j} is {}x{}, expected {n}x{n}",
                    b.nrows(),
                    b.ncols()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("block {j} has non-finite entries")));
            }
        }
        let x_factors = match x_factors {
            Some(x) => {
                if x.len() != blocks.len() {
                    return Err(Error::invalid("x_factors length differs from block count"));
                }
                x
            }
            None => blocks.iter().map(|b| 1.0 / b.determinant().abs()).collect(),
        };
        Ok(PoincareCocycle {
            frames: Vec::new(),
            blocks,
            x_factors,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Fiber dimension d − 1.
    pub fn dim(&self) -> usize {
        self.blocks[0].nrows()
    }

    /// `A_{to−1} ⋯ A_from`.
    pub fn product(&self, from: usize, to: usize) -> DMatrix<f64> {
        let n = self.dim();
        let mut acc = DMatrix::identity(n, n);
        for b in &self.blocks[from..to] {
            acc = b * acc;
        }
        acc
    }

    /// Inverse blocks in reverse order: the cocycle of the time-reversed flow.
    pub fn reversed(&self) -> Result<Self> {
        let mut blocks = Vec::with_capacity(self.len());
        for (j, b) in self.blocks.iter().enumerate().rev() {
            let inv = b.clone().try_inverse().ok_or(Error::IllConditioned {
                block: j,
                value: 0.0,
            })?;
            blocks.push(inv);
        }
        let x_factors = self.x_factors.iter().rev().map(|x| 1.0 / x).collect();
        Ok(PoincareCocycle {
            frames: self.frames.iter().rev().cloned().collect(),
            blocks,
            x_factors,
        })
    }

    /// `Σ_j log x_j` over `[from, to)`, i.e. `log x` of the composed time.
    pub fn log_x(&self, from: usize, to: usize) -> f64 {
        self.x_factors[from..to].iter().map(|x| x.ln()).sum()
    }
}

/// Number of integrator steps per unit of time; `h` must divide 1.
pub fn steps_per_unit(h: f64) -> Result<usize> {
    let spu = (1.0 / h).round();
    if spu < 1.0 || (spu * h - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "step {h} does not divide the unit time mark"
        )));
    }
    Ok(spu as usize)
}

/// Extracts the unit-time blocks from an orbit and its tangent maps.
pub fn build_cocycle(
    model: &FlowModel,
    orbit: &OrbitSegment,
    tangent: &TangentSegment,
) -> Result<PoincareCocycle> {
    let spu = steps_per_unit(orbit.step)?;
    let marks = orbit.n_steps / spu;
    if marks == 0 {
        return Err(Error::invalid("orbit shorter than one time unit"));
    }
    let mut frame = normal_frame(model, &orbit.states[0])?;
    let mut frames = Vec::with_capacity(marks + 1);
    let mut blocks = Vec::with_capacity(marks);
    let mut x_factors = Vec::with_capacity(marks);
    for j in 0..marks {
        let next = &orbit.states[(j + 1) * spu];
        let flow = model.eval_field(next);
        let speed = flow.norm();
        if !(speed >= SPEED_FLOOR) {
            return Err(Error::SpeedUnderflow {
                step: (j + 1) * spu,
                speed,
            });
        }
        let n_hat = flow / speed;
        let pushed = tangent.compose(j * spu, (j + 1) * spu) * &frame.vectors;
        let projected = &pushed - &n_hat * (n_hat.transpose() * &pushed);
        let (q, r) = mgs_qr(&projected);
        let smallest = r.diagonal().min();
        if !(smallest > 0.0) {
            return Err(Error::IllConditioned {
                block: j,
                value: smallest,
            });
        }
        blocks.push(q.transpose() * &projected);
        x_factors.push(speed / orbit.speeds[j * spu]);
        frames.push(frame);
        frame = NormalFrame {
            base: next.clone(),
            vectors: q,
        };
    }
    frames.push(frame);
    Ok(PoincareCocycle {
        frames,
        blocks,
        x_factors,
    })
}

/// Integrates `units` time units from `p0` and builds the cocycle.
pub fn orbit_cocycle(
    model: &FlowModel,
    p0: &DVector<f64>,
    h: f64,
    units: usize,
) -> Result<(OrbitSegment, PoincareCocycle)> {
    let spu = steps_per_unit(h)?;
    let orbit = integrate_orbit(model, p0, h, units * spu)?;
    let tangent = integrate_tangent(model, &orbit)?;
    let coc = build_cocycle(model, &orbit, &tangent)?;
    Ok((orbit, coc))
}

/// `max_j | |det A_j|·x_j − 1 |`.
pub fn det_factor_check(coc: &PoincareCocycle) -> f64 {
    coc.blocks
        .iter()
        .zip(&coc.x_factors)
        .map(|(a, x)| (a.determinant().abs() * x - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Block of P^m at `mark` computed from a fresh integration of length `m`
/// starting at the frame base, expressed in the cocycle's frames.
pub fn direct_block(
    model: &FlowModel,
    coc: &PoincareCocycle,
    mark: usize,
    m: usize,
    h: f64,
) -> Result<DMatrix<f64>> {
    let start = &coc.frames[mark];
    let target = &coc.frames[mark + m];
    let spu = steps_per_unit(h)?;
    let orbit = integrate_orbit(model, &start.base, h, m * spu)?;
    let tangent = integrate_tangent(model, &orbit)?;
    let pushed = tangent.compose(0, m * spu) * &start.vectors;
    let n_hat = model.eval_field(&target.base).normalize();
    let projected = &pushed - &n_hat * (n_hat.transpose() * &pushed);
    Ok(target.vectors.transpose() * projected)
}

/// Monte Carlo estimate of the flowbox measure distortion.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowboxEstimate {
    /// `‖X(p)‖ · sup_K |μ̄(K) − x(t) μ̄(𝒫^t K)|` over measurable K in the disk.
    pub distortion: f64,
    pub std_error: f64,
    /// Distortion divided by `‖X(p)‖ · vol(B_r)`.
    pub relative: f64,
    pub relative_se: f64,
    pub disk_volume: f64,
    pub x_t: f64,
    pub samples: usize,
}

/// Relative round-off level of the sampled integrand; enters the reported
/// standard error as a floor so exactly preserved measures read as zero.
const FLOWBOX_ROUNDOFF: f64 = 1e-12;
const FLOWBOX_CHUNK: usize = 1024;

/// Volume of the unit ball in R^n.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / n as f64 * unit_ball_volume(n - 2),
    }
}

/// Local data at the source and target of a flowbox.
struct FlowboxEnds {
    frame0: DMatrix<f64>,
    target: DVector<f64>,
    n_t: DVector<f64>,
    frame_t: DMatrix<f64>,
}

/// Oblique-projection Jacobian of the holonomy from the flat section through
/// `p` to the flat section through `X^t(p)`, at the sample point `q`.
fn holonomy_jacobian(
    model: &FlowModel,
    ends: &FlowboxEnds,
    q: &DVector<f64>,
    t: f64,
    h: f64,
) -> Result<(f64, DVector<f64>)> {
    let (mut y, mut d) = flow_with_tangent(model, q, t, h)?;
    for _ in 0..8 {
        let g = ends.n_t.dot(&(&y - &ends.target));
        if g.abs() < 1e-15 {
            break;
        }
        let ds = -g / ends.n_t.dot(&model.eval_field(&y));
        let adv = advance(model, &y, Some(&d), ds);
        y = adv.state;
        d = adv.tangent.expect("tangent requested");
    }
    let vy = model.eval_field(&y);
    let m = d * &ends.frame0;
    let obl = &m - &vy * ((ends.n_t.transpose() * &m) / ends.n_t.dot(&vy));
    let j = (ends.frame_t.transpose() * obl).determinant().abs();
    Ok((j, y))
}

/// Estimates the distortion of the transversal measure on the disk of
/// radius `r` around `p` carried for time `t`. Samples are stratified in the
/// radius with isotropic directions; the estimate is the supremum over
/// measurable subsets (positive or negative part of the defect).
pub fn flowbox_distortion(
    model: &FlowModel,
    p: &DVector<f64>,
    t: f64,
    r: f64,
    n_samples: usize,
    h: f64,
    seed: u64,
) -> Result<FlowboxEstimate> {
    if !(t > 0.0 && t <= 10.0) {
        return Err(Error::invalid(format!("flowbox time {t} outside (0, 10]")));
    }
    if !(r > 0.0) || n_samples < 2 {
        return Err(Error::invalid("flowbox needs r > 0 and at least two samples"));
    }
    let start = normal_frame(model, p)?;
    let (target, _) = flow_with_tangent(model, p, t, h)?;
    let end = normal_frame(model, &target)?;
    let speed_p = model.eval_field(p).norm();
    let flow_t = model.eval_field(&target);
    let x_t = flow_t.norm() / speed_p;
    let ends = FlowboxEnds {
        frame0: start.vectors.clone(),
        target,
        n_t: flow_t.normalize(),
        frame_t: end.vectors,
    };
    let n = model.fiber_dim();
    let chunks = n_samples.div_ceil(FLOWBOX_CHUNK);
    let defects: Vec<Result<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let lo = c * FLOWBOX_CHUNK;
            let hi = (lo + FLOWBOX_CHUNK).min(n_samples);
            let mut out = Vec::with_capacity(hi - lo);
            for i in lo..hi {
                let u = (i as f64 + rand::Rng::random::<f64>(&mut rng)) / n_samples as f64;
                let radius = r * u.powf(1.0 / n as f64);
                let dir = DVector::from_iterator(
                    n,
                    (0..n).map(|_| StandardNormal.sample(&mut rng)),
                )
                .normalize();
                let q = p + &ends.frame0 * (dir * radius);
                let (j, _) = holonomy_jacobian(model, &ends, &q, t, h)?;
                out.push(1.0 - x_t * j);
            }
            Ok(out)
        })
        .collect();
    let mut pos = Moments::new();
    let mut neg = Moments::new();
    for chunk in defects {
        for f in chunk? {
            pos.push(f.max(0.0));
            neg.push((-f).max(0.0));
        }
    }
    let vol = unit_ball_volume(n) * r.powi(n as i32);
    let pick = if pos.mean() >= neg.mean() { pos } else { neg };
    let scale = speed_p * vol;
    let se = scale * (pick.std_error().powi(2) + FLOWBOX_ROUNDOFF.powi(2)).sqrt();
    Ok(FlowboxEstimate {
        distortion: scale * pick.mean(),
        std_error: se,
        relative: pick.mean(),
        relative_se: se / scale,
        disk_volume: vol,
        x_t,
        samples: n_samples,
    })
}

/// Holonomy Jacobian at `q` for the flowbox of `p` over time `t` (exposed
/// for the flux-identity oracle in tests).
pub fn section_jacobian(
    model: &FlowModel,
    p: &DVector<f64>,
    q: &DVector<f64>,
    t: f64,
    h: f64,
) -> Result<(f64, DVector<f64>)> {
    let start = normal_frame(model, p)?;
    let (target, _) = integrator::flow_with_tangent(model, p, t, h)?;
    let end = normal_frame(model, &target)?;
    let ends = FlowboxEnds {
        frame0: start.vectors,
        n_t: model.eval_field(&target).normalize(),
        target,
        frame_t: end.vectors,
    };
    holonomy_jacobian(model, &ends, q, t, h)
}
