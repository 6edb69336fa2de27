//! m-dominated splittings along orbits.
//!
//! A candidate splitting `U ⊕ S` of index k is read off the finite-time
//! Oseledets filtrations: `U_t` is the span of the first k Benettin vectors
//! of a forward QR run started well before `t`, and `S_t` is the complement
//! of the k most expanding right singular directions of the product over a
//! future window. The splitting is then tested against
//! `ρ_m(t) = ‖P^m|S_t‖ / 𝔪(P^m|U_t) ≤ 1/2`.

use nalgebra::DMatrix;
use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{
    generic_frame, min_principal_angle, mgs_qr, orthonormalize, restricted_conorm, restricted_norm,
    subspace_distance,
};
use crate::model::FlowModel;
use crate::poincare::PoincareCocycle;

/// Λ iff every sampled ratio is at most this.
pub const RATIO_THRESHOLD: f64 = 0.5 - 1e-9;
pub const SPLIT_ANGLE_FLOOR: f64 = 1e-6;
pub const INVARIANCE_TOL: f64 = 1e-4;
pub const DRIFT_TOL: f64 = 1e-2;

/// Bases of `U_t` and `S_t` at consecutive marks `start..start + len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Splitting {
    pub index: usize,
    pub start: usize,
    pub u: Vec<DMatrix<f64>>,
    pub s: Vec<DMatrix<f64>>,
}

impl Splitting {
    pub fn marks(&self) -> Range<usize> {
        self.start..self.start + self.u.len()
    }

    pub fn covers(&self, mark: usize) -> bool {
        self.marks().contains(&mark)
    }

    pub fn u_at(&self, mark: usize) -> &DMatrix<f64> {
        &self.u[mark - self.start]
    }

    pub fn s_at(&self, mark: usize) -> &DMatrix<f64> {
        &self.s[mark - self.start]
    }

    /// Carries `u0`, `s0` at `start` forward through `len` blocks, giving
    /// `len + 1` marks. Invariant by construction up to round-off.
    pub fn from_bases(
        coc: &PoincareCocycle,
        start: usize,
        u0: &DMatrix<f64>,
        s0: &DMatrix<f64>,
        len: usize,
    ) -> Result<Self> {
        let n = coc.dim();
        if u0.nrows() != n || s0.nrows() != n || u0.ncols() + s0.ncols() != n || u0.ncols() == 0 {
            return Err(Error::invalid("splitting bases do not match the fiber"));
        }
        if start + len > coc.len() {
            return Err(Error::invalid("splitting runs past the end of the cocycle"));
        }
        let mut u = vec![orthonormalize(u0).ok_or_else(|| Error::invalid("U basis is degenerate"))?];
        let mut s = vec![orthonormalize(s0).ok_or_else(|| Error::invalid("S basis is degenerate"))?];
        for j in start..start + len {
            let a = &coc.blocks[j];
            u.push(mgs_qr(&(a * u.last().unwrap())).0);
            s.push(mgs_qr(&(a * s.last().unwrap())).0);
        }
        Ok(Splitting {
            index: u0.ncols(),
            start,
            u,
            s,
        })
    }

    /// Largest principal-angle distance between `A_t U_t` and `U_{t+1}`
    /// (and likewise for S) over the covered marks.
    pub fn invariance_defect(&self, coc: &PoincareCocycle) -> f64 {
        let mut worst: f64 = 0.0;
        for t in self.start..self.start + self.u.len() - 1 {
            let a = &coc.blocks[t];
            for (now, next) in [(self.u_at(t), self.u_at(t + 1)), (self.s_at(t), self.s_at(t + 1))] {
                let moved = mgs_qr(&(a * now)).0;
                worst = worst.max(subspace_distance(&moved, next));
            }
        }
        worst
    }

    pub fn min_angle(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.s)
            .map(|(u, s)| min_principal_angle(u, s))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest principal-angle distance to `other` over common marks.
    pub fn distance(&self, other: &Splitting) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.marks().end.min(other.marks().end);
        let mut worst: f64 = 0.0;
        for t in lo..hi {
            worst = worst.max(subspace_distance(self.u_at(t), other.u_at(t)));
            worst = worst.max(subspace_distance(self.s_at(t), other.s_at(t)));
        }
        worst
    }
}

/// Finite-time Oseledets splitting of index `k` at marks
/// `start..=start + len`, using a forward run over `past` blocks before
/// `start` and a backward run over `future` blocks after the last mark.
pub fn oseledets_splitting(
    coc: &PoincareCocycle,
    k: usize,
    start: usize,
    len: usize,
    past: usize,
    future: usize,
) -> Result<Splitting> {
    let n = coc.dim();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("index k = {k} outside 1..={}", n - 1)));
    }
    if past > start || start + len + future > coc.len() {
        return Err(Error::invalid(format!(
            "cocycle of length {} too short for marks {start}..={} with windows {past}/{future}",
            coc.len(),
            start + len
        )));
    }
    let mut q = generic_frame(n);
    for j in start - past..start {
        q = mgs_qr(&(&coc.blocks[j] * &q)).0;
    }
    let mut u = Vec::with_capacity(len + 1);
    for j in start..=start + len {
        u.push(q.columns(0, k).clone_owned());
        if j < start + len {
            q = mgs_qr(&(&coc.blocks[j] * &q)).0;
        }
    }
    let end = start + len;
    let mut back = generic_frame(n);
    for j in (end..end + future).rev() {
        back = mgs_qr(&(coc.blocks[j].transpose() * &back)).0;
    }
    let mut s = vec![DMatrix::zeros(0, 0); len + 1];
    s[len] = back.columns(k, n - k).clone_owned();
    for j in (start..end).rev() {
        back = mgs_qr(&(coc.blocks[j].transpose() * &back)).0;
        s[j - start] = back.columns(k, n - k).clone_owned();
    }
    Ok(Splitting {
        index: k,
        start,
        u,
        s,
    })
}

/// `ρ_m(t) = ‖P^m|S_t‖ / 𝔪(P^m|U_t)`.
pub fn domination_ratio(coc: &PoincareCocycle, split: &Splitting, m: usize, t: usize) -> Result<f64> {
    if !split.covers(t) || t + m > coc.len() {
        return Err(Error::invalid(format!(
            "mark {t} with m = {m} not covered (cocycle length {})",
            coc.len()
        )));
    }
    let (u, s) = (split.u_at(t), split.s_at(t));
    let angle = min_principal_angle(u, s);
    if angle < SPLIT_ANGLE_FLOOR {
        return Err(Error::SplitDegenerate { mark: t, angle });
    }
    let p = coc.product(t, t + m);
    Ok(restricted_norm(&p, s) / restricted_conorm(&p, u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Λ: every sampled ratio is at most 1/2.
    Dominated,
    /// Γ: some ratio exceeds 1/2.
    NotDominated,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Dominated => "Lambda",
            Verdict::NotDominated => "Gamma",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominationEntry {
    pub m: usize,
    pub ratio_max: f64,
    pub verdict: Verdict,
    /// Marks with `ρ_m > 1/2`.
    pub delta_marks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominationReport {
    pub orbit_id: String,
    pub index: usize,
    pub entries: Vec<DominationEntry>,
    pub min_angle: f64,
    pub invariance_defect: f64,
    /// Disagreement with a splitting built from half-length windows.
    pub drift: f64,
}

impl DominationReport {
    pub fn entry(&self, m: usize) -> Option<&DominationEntry> {
        self.entries.iter().find(|e| e.m == m)
    }

    pub fn any_dominated(&self) -> bool {
        self.entries.iter().any(|e| e.verdict == Verdict::Dominated)
    }
}

/// Ratios `ρ_m(t)` for every mark `t` of the splitting with `t + m` inside
/// the cocycle.
pub fn ratios(coc: &PoincareCocycle, split: &Splitting, m: usize) -> Result<Vec<(usize, f64)>> {
    split
        .marks()
        .filter(|t| t + m <= coc.len())
        .map(|t| domination_ratio(coc, split, m, t).map(|r| (t, r)))
        .collect()
}

/// Tests every `m` in the grid against a given splitting.
pub fn scan_with_splitting(
    coc: &PoincareCocycle,
    split: &Splitting,
    m_grid: &[usize],
    orbit_id: &str,
) -> Result<DominationReport> {
    if m_grid.is_empty() {
        return Err(Error::invalid("m_grid is empty"));
    }
    let defect = split.invariance_defect(coc);
    let mut entries = Vec::with_capacity(m_grid.len());
    for &m in m_grid {
        if m == 0 {
            return Err(Error::invalid("m_grid entries must be positive"));
        }
        let rs = ratios(coc, split, m)?;
        if rs.is_empty() {
            return Err(Error::invalid(format!("no mark of the splitting admits m = {m}")));
        }
        let ratio_max = rs.iter().map(|r| r.1).fold(0.0, f64::max);
        let delta_marks = rs
            .iter()
            .filter(|r| r.1 > RATIO_THRESHOLD)
            .map(|r| r.0)
            .collect();
        let verdict = if defect > INVARIANCE_TOL {
            Verdict::Inconclusive
        } else if ratio_max <= RATIO_THRESHOLD {
            Verdict::Dominated
        } else {
            Verdict::NotDominated
        };
        entries.push(DominationEntry {
            m,
            ratio_max,
            verdict,
            delta_marks,
        });
    }
    Ok(DominationReport {
        orbit_id: orbit_id.to_string(),
        index: split.index,
        entries,
        min_angle: split.min_angle(),
        invariance_defect: defect,
        drift: 0.0,
    })
}

/// Warm-up lengths for the forward and backward filtration runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub past: usize,
    pub future: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            past: 40,
            future: 40,
        }
    }
}

/// Builds the Oseledets candidate splitting over the interior of the
/// cocycle and scans it for every `m` in the grid.
pub fn scan_orbit(
    coc: &PoincareCocycle,
    k: usize,
    m_grid: &[usize],
    opts: &ScanOptions,
    orbit_id: &str,
) -> Result<DominationReport> {
    let max_m = *m_grid.iter().max().ok_or_else(|| Error::invalid("m_grid is empty"))?;
    let (past, future) = (opts.past, opts.future);
    if coc.len() < past + future + max_m {
        return Err(Error::invalid(format!(
            "cocycle of length {} shorter than windows {past}+{future} plus m = {max_m}",
            coc.len()
        )));
    }
    let len = coc.len() - past - future;
    let split = oseledets_splitting(coc, k, past, len, past, future)?;
    let check = oseledets_splitting(coc, k, past, len, past / 2, future / 2)?;
    let drift = split.distance(&check);
    if drift >= DRIFT_TOL {
        return Err(Error::InconclusiveSplitting { drift });
    }
    let mut report = scan_with_splitting(coc, &split, m_grid, orbit_id)?;
    report.drift = drift;
    Ok(report)
}

/// Property (H): with Λ at `m0`, every `ℓ` in the list is also dominated.
pub fn check_property_h(
    coc: &PoincareCocycle,
    split: &Splitting,
    m0: usize,
    ells: &[usize],
) -> Result<Vec<bool>> {
    let base = scan_with_splitting(coc, split, &[m0], "")?;
    if base.entries[0].verdict != Verdict::Dominated {
        return Err(Error::NotDominated);
    }
    ells.iter()
        .map(|&l| Ok(ratios(coc, split, l)?.iter().all(|r| r.1 <= RATIO_THRESHOLD)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertyT {
    pub min_angle: f64,
    pub floor: f64,
    pub holds: bool,
}

/// Property (T): the bundles stay at least `floor` apart.
pub fn check_property_t(report: &DominationReport, floor: f64) -> Result<PropertyT> {
    if !report.any_dominated() {
        return Err(Error::NotDominated);
    }
    Ok(PropertyT {
        min_angle: report.min_angle,
        floor,
        holds: report.min_angle >= floor,
    })
}

/// Marks whose base point returns within `radius` of the mark-0 base point.
pub fn recurrence_marks(model: &FlowModel, coc: &PoincareCocycle, radius: f64) -> Vec<usize> {
    let Some(first) = coc.frames.first() else {
        return Vec::new();
    };
    coc.frames
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, f)| model.displacement(&first.base, &f.base).norm() < radius)
        .map(|(j, _)| j)
        .collect()
}

/// Property (E) surrogate: the ratios at recurrence-return marks only.
pub fn check_property_e(
    coc: &PoincareCocycle,
    split: &Splitting,
    m: usize,
    marks: &[usize],
) -> Result<Vec<(usize, f64, bool)>> {
    marks
        .iter()
        .filter(|&&t| split.covers(t) && t + m <= coc.len())
        .map(|&t| {
            let r = domination_ratio(coc, split, m, t)?;
            Ok((t, r, r <= RATIO_THRESHOLD))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cat_eigenvalue;
    use crate::poincare::orbit_cocycle;
    use nalgebra::DVector;

    fn cat() -> PoincareCocycle {
        let m = FlowModel::cat_suspension();
        orbit_cocycle(&m, &DVector::from_vec(vec![0.4, 0.1, 0.3]), 0.01, 120)
            .unwrap()
            .1
    }

    #[test]
    fn cat_ratio_closed_form() {
        let coc = cat();
        let r = scan_orbit(&coc, 1, &[1, 2, 5], &ScanOptions::default(), "cat").unwrap();
        let lam = cat_eigenvalue();
        for e in &r.entries {
            assert_eq!(e.verdict, Verdict::Dominated);
            let expected = lam.powi(-2 * e.m as i32);
            assert!((e.ratio_max / expected - 1.0).abs() < 1e-3, "m={} {}", e.m, e.ratio_max);
        }
        // Symmetric gluing: eigenvectors are orthogonal.
        assert!((r.min_angle - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn swapped_orientation_is_gamma() {
        let coc = cat();
        let split = oseledets_splitting(&coc, 1, 40, 10, 40, 40).unwrap();
        let swapped = Splitting {
            index: 1,
            start: split.start,
            u: split.s.clone(),
            s: split.u.clone(),
        };
        let rho = domination_ratio(&coc, &swapped, 1, 40).unwrap();
        assert!((rho / cat_eigenvalue().powi(2) - 1.0).abs() < 1e-6);
        let rep = scan_with_splitting(&coc, &swapped, &[1], "").unwrap();
        assert_eq!(rep.entries[0].verdict, Verdict::NotDominated);
        assert_eq!(rep.entries[0].delta_marks.len(), 11);
    }

    #[test]
    fn identity_cocycle_is_gamma_with_unit_ratio() {
        let coc = PoincareCocycle::from_blocks(vec![DMatrix::identity(2, 2); 100], None).unwrap();
        let r = scan_orbit(&coc, 1, &[1, 3], &ScanOptions::default(), "").unwrap();
        for e in &r.entries {
            assert_eq!(e.verdict, Verdict::NotDominated);
            assert!((e.ratio_max - 1.0).abs() < 1e-12);
        }
        assert!(matches!(check_property_t(&r, 0.1), Err(Error::NotDominated)));
    }

    #[test]
    fn degenerate_split_rejected() {
        let coc = PoincareCocycle::from_blocks(vec![DMatrix::identity(2, 2); 3], None).unwrap();
        let e = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let split = Splitting {
            index: 1,
            start: 0,
            u: vec![e.clone(); 4],
            s: vec![e; 4],
        };
        assert!(matches!(
            domination_ratio(&coc, &split, 1, 0),
            Err(Error::SplitDegenerate { .. })
        ));
    }

    #[test]
    fn empty_grid_rejected() {
        let coc = cat();
        assert!(matches!(
            scan_orbit(&coc, 1, &[], &ScanOptions::default(), ""),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn property_h_on_cat() {
        let coc = cat();
        let split = oseledets_splitting(&coc, 1, 40, 20, 40, 40).unwrap();
        let ells: Vec<usize> = (2..=20).collect();
        assert!(check_property_h(&coc, &split, 1, &ells).unwrap().iter().all(|&b| b));
    }
}
