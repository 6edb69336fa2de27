//! Finite-time Lyapunov spectra of Poincaré cocycles.
//!
//! Exponents come from Benettin QR re-orthonormalisation with modified
//! Gram–Schmidt at every block. The finite-time Oseledets filtration at the
//! base mark is obtained from the right singular vectors of the composed
//! block, computed by running the same QR iteration on the transposed
//! blocks in reverse order, which never forms the (overflowing) product.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::domination::{scan_orbit, ScanOptions, Verdict};
use crate::error::{Error, Result};
use crate::linalg::{binomial, compound_matrix, generic_frame, mgs_qr, ScaledProduct};
use crate::model::FlowModel;
use crate::poincare::{orbit_cocycle, PoincareCocycle};
use crate::stats::{stream_rng, Moments};

/// Exponents closer than `GAP_FACTOR / T` are one Oseledets block.
pub const GAP_FACTOR: f64 = 10.0;
/// Drift between horizons T/2 and T below which a point is treated as
/// Oseledets-generic.
pub const GENERIC_DRIFT: f64 = 1e-2;
const R_UNDERFLOW: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct OseledetsBlock {
    pub exponents: Vec<f64>,
    /// Orthonormal basis at the base mark, most expanding directions first.
    pub basis: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Nonincreasing, per unit time.
    pub exponents: Vec<f64>,
    pub filtration: Vec<OseledetsBlock>,
    pub horizon: usize,
    /// `|λ_i(T) − λ_i(T/2)|`.
    pub convergence: Vec<f64>,
    /// `−(1/T) log x(T)`, the value the exponent sum should take.
    pub volume_rate: f64,
}

impl SpectrumReport {
    pub fn max_drift(&self) -> f64 {
        self.convergence.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_generic(&self) -> bool {
        self.max_drift() < GENERIC_DRIFT
    }

    pub fn sum(&self) -> f64 {
        self.exponents.iter().sum()
    }
}

/// Accumulated `log R_ii` of the QR iteration over `blocks` applied to the
/// initial orthonormal `q`. Returns the final `q` and the logs.
fn qr_iteration<'a>(
    blocks: impl Iterator<Item = (usize, &'a DMatrix<f64>)>,
    mut q: DMatrix<f64>,
    transpose: bool,
    mut snapshot: impl FnMut(usize, &DMatrix<f64>, &[f64]),
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let k = q.ncols();
    let mut logs = vec![0.0; k];
    for (count, (j, a)) in blocks.enumerate() {
        let moved = if transpose { a.transpose() * &q } else { a * &q };
        let (qn, r) = mgs_qr(&moved);
        for (i, l) in logs.iter_mut().enumerate() {
            let d = r[(i, i)];
            if !(d >= R_UNDERFLOW) {
                return Err(Error::IllConditioned { block: j, value: d });
            }
            *l += d.ln();
        }
        q = qn;
        snapshot(count + 1, &q, &logs);
    }
    Ok((q, logs))
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Per-unit exponents of the product of `blocks`, nonincreasing.
pub fn qr_exponents(blocks: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    if blocks.is_empty() {
        return Err(Error::invalid("no blocks"));
    }
    let n = blocks[0].nrows();
    let (_, logs) = qr_iteration(
        blocks.iter().enumerate(),
        DMatrix::identity(n, n),
        false,
        |_, _, _| {},
    )?;
    let t = blocks.len() as f64;
    Ok(sorted_desc(logs.into_iter().map(|l| l / t).collect()))
}

/// Orthonormal basis of the right singular vectors of `A_{to−1}⋯A_from`,
/// ordered from most to least expanding.
pub fn right_singular_basis(coc: &PoincareCocycle, from: usize, to: usize) -> Result<DMatrix<f64>> {
    let n = coc.dim();
    let (q, _) = qr_iteration(
        (from..to).rev().map(|j| (j, &coc.blocks[j])),
        generic_frame(n),
        true,
        |_, _, _| {},
    )?;
    Ok(q)
}

/// Finite-time exponents over the first `horizon` blocks.
pub fn lyapunov_exponents(coc: &PoincareCocycle, horizon: usize) -> Result<SpectrumReport> {
    if horizon == 0 || horizon > coc.len() {
        return Err(Error::invalid(format!(
            "horizon {horizon} outside 1..={}",
            coc.len()
        )));
    }
    let n = coc.dim();
    let half = (horizon / 2).max(1);
    let mut half_logs = vec![0.0; n];
    // Exponent values do not need a generic start: on a triangular cocycle
    // the identity start reads off the diagonal products exactly, and they
    // are sorted afterwards. Bases do, see `right_singular_basis`.
    let (_, logs) = qr_iteration(
        coc.blocks[..horizon].iter().enumerate(),
        DMatrix::identity(n, n),
        false,
        |count, _, logs| {
            if count == half {
                half_logs.copy_from_slice(logs);
            }
        },
    )?;
    let t = horizon as f64;
    let full = sorted_desc(logs.iter().map(|l| l / t).collect());
    let early = sorted_desc(half_logs.iter().map(|l| l / half as f64).collect());
    let convergence = full.iter().zip(&early).map(|(a, b)| (a - b).abs()).collect();

    let basis = right_singular_basis(coc, 0, horizon)?;
    let mut filtration = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i == n || full[i - 1] - full[i] >= GAP_FACTOR / t {
            filtration.push(OseledetsBlock {
                exponents: full[start..i].to_vec(),
                basis: basis.columns(start, i - start).clone_owned(),
            });
            start = i;
        }
    }
    Ok(SpectrumReport {
        exponents: full,
        filtration,
        horizon,
        convergence,
        volume_rate: -coc.log_x(0, horizon) / t,
    })
}

/// Blocks of the k-th exterior power.
#[derive(Debug, Clone, PartialEq)]
pub struct ExteriorCocycle {
    pub k: usize,
    pub blocks: Vec<DMatrix<f64>>,
}

impl ExteriorCocycle {
    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    /// Top exponent of the exterior cocycle over its first `horizon` blocks.
    pub fn top_exponent(&self, horizon: usize) -> Result<f64> {
        Ok(qr_exponents(&self.blocks[..horizon])?[0])
    }
}

/// `∧^k A_j` for every block, `1 ≤ k ≤ d − 2`.
pub fn exterior_power(coc: &PoincareCocycle, k: usize) -> Result<ExteriorCocycle> {
    let n = coc.dim();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "exterior power k = {k} outside 1..={}",
            n.saturating_sub(1)
        )));
    }
    Ok(ExteriorCocycle {
        k,
        blocks: coc.blocks.iter().map(|a| compound_matrix(a, k)).collect(),
    })
}

/// `Σ_k = λ_1 + … + λ_k`, with `Σ_0 = 0`.
pub fn sigma_k(report: &SpectrumReport, k: usize) -> Result<f64> {
    if k > report.exponents.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds fiber dimension {}",
            report.exponents.len()
        )));
    }
    Ok(report.exponents[..k].iter().sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub n_points: usize,
    pub step: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubadditivityCheck {
    pub i: usize,
    pub j: usize,
    /// Mean of `a_i + a_j − a_{i+j}` over points; should be ≥ −3·SE.
    pub excess: f64,
    pub std_error: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeKReport {
    pub k: usize,
    /// `a_j` for `j = 1..=j_max` (index 0 is j = 1).
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub infimum: f64,
    pub argmin: usize,
    pub checks: Vec<SubadditivityCheck>,
}

impl LeKReport {
    pub fn rate(&self, j: usize) -> f64 {
        self.means[j - 1] / j as f64
    }

    pub fn subadditive(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }
}

/// Absolute slack for the subadditivity test when the sample spread is
/// zero and both sides agree up to floating-point rounding.
const SUBADDITIVITY_ROUNDOFF: f64 = 1e-10;

/// `a_j(p) = log‖∧^k P^j(p)‖` for `j = 1..=j_max` along one orbit.
pub fn exterior_log_norms(coc: &PoincareCocycle, k: usize, j_max: usize) -> Vec<f64> {
    let size = binomial(coc.dim(), k);
    let mut acc = ScaledProduct::identity(size);
    coc.blocks[..j_max]
        .iter()
        .map(|a| {
            acc.push(&compound_matrix(a, k));
            acc.log_norm()
        })
        .collect()
}

fn sample_cocycles<T: Send>(
    model: &FlowModel,
    opts: &SampleOptions,
    units: usize,
    f: impl Fn(&PoincareCocycle) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    (0..opts.n_points)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed, i as u64);
            let p = model.sample_point(&mut rng);
            let (_, coc) = orbit_cocycle(model, &p, opts.step, units)?;
            f(&coc)
        })
        .collect()
}

/// Monte Carlo estimate of `a_j = ∫ log‖∧^k P^j‖ dμ` for `j ≤ j_max`, the
/// infimum of `a_j / j` and a subadditivity check on every pair
/// `i ≤ j, i + j ≤ j_max`.
pub fn le_k(model: &FlowModel, k: usize, j_max: usize, opts: &SampleOptions) -> Result<LeKReport> {
    let n = model.fiber_dim();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} outside 1..={n}")));
    }
    if opts.n_points == 0 || j_max < 2 {
        return Err(Error::invalid("le_k needs n_points >= 1 and j_max >= 2"));
    }
    let rows = sample_cocycles(model, opts, j_max, |coc| Ok(exterior_log_norms(coc, k, j_max)))?;
    let column = |j: usize| Moments::from_slice(&rows.iter().map(|r| r[j - 1]).collect::<Vec<_>>());
    let mut means = Vec::with_capacity(j_max);
    let mut std_errors = Vec::with_capacity(j_max);
    for j in 1..=j_max {
        let m = column(j);
        means.push(m.mean());
        std_errors.push(m.std_error());
    }
    let (argmin, infimum) = (1..=j_max)
        .map(|j| (j, means[j - 1] / j as f64))
        .fold((1, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    let mut checks = Vec::new();
    for i in 1..=j_max / 2 {
        for j in i..=j_max - i {
            let diffs: Vec<f64> = rows
                .iter()
                .map(|r| r[i - 1] + r[j - 1] - r[i + j - 1])
                .collect();
            let m = Moments::from_slice(&diffs);
            let slack = 3.0 * m.std_error() + SUBADDITIVITY_ROUNDOFF * (1.0 + means[i + j - 1].abs());
            checks.push(SubadditivityCheck {
                i,
                j,
                excess: m.mean(),
                std_error: m.std_error(),
                holds: m.mean() >= -slack,
            });
        }
    }
    Ok(LeKReport {
        k,
        means,
        std_errors,
        infimum,
        argmin,
        checks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapOptions {
    pub sample: SampleOptions,
    pub horizon: usize,
    pub m_grid: Vec<usize>,
    pub scan: ScanOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_points: usize,
    /// Points with no detected m-domination for any tested m.
    pub n_undominated: usize,
    /// Of those, points whose splitting could not be resolved.
    pub n_inconclusive: usize,
}

/// Monte Carlo estimate of `∫ (λ_k − λ_{k+1}) dμ` over points without a
/// detected m-dominated splitting of index k for every m in the grid.
/// Points whose splitting is unresolved count as undominated.
pub fn gap_integral(model: &FlowModel, k: usize, opts: &GapOptions) -> Result<GapEstimate> {
    let n = model.fiber_dim();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", n - 1)));
    }
    let per_point = sample_cocycles(model, &opts.sample, opts.horizon, |coc| {
        let report = lyapunov_exponents(coc, coc.len())?;
        let gap = (report.exponents[k - 1] - report.exponents[k]).max(0.0);
        match scan_orbit(coc, k, &opts.m_grid, &opts.scan, "") {
            Ok(scan) => {
                let dominated = scan.entries.iter().any(|e| e.verdict == Verdict::Dominated);
                Ok(if dominated { (0.0, false, false) } else { (gap, true, false) })
            }
            Err(Error::InconclusiveSplitting { .. }) => Ok((gap, true, true)),
            Err(e) => Err(e),
        }
    })?;
    let values: Vec<f64> = per_point.iter().map(|p| p.0).collect();
    let m = Moments::from_slice(&values);
    Ok(GapEstimate {
        value: m.mean(),
        std_error: m.std_error(),
        n_points: values.len(),
        n_undominated: per_point.iter().filter(|p| p.1).count(),
        n_inconclusive: per_point.iter().filter(|p| p.2).count(),
    })
}

/// Growth rate of a fixed vector, used as a one-direction cross-check.
pub fn vector_growth(coc: &PoincareCocycle, v: &DVector<f64>, horizon: usize) -> f64 {
    let mut x = v.normalize();
    let mut log = 0.0;
    for a in &coc.blocks[..horizon] {
        x = a * x;
        let nx = x.norm();
        log += nx.ln();
        x /= nx;
    }
    log / horizon as f64
}
