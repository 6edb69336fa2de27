//! Cocycle-level perturbations: rotation steps, realizable plans and the
//! exchange construction moving a vector of the dominating bundle into the
//! dominated one.
//!
//! A plan replaces the blocks `A_j` over a window by maps `L_j` that differ
//! from `A_j` by a rotation (before or after the block) or, inside a long
//! chain, by an elliptic rotation conjugated through a quotient cocycle. The
//! vector-field surgery that would realise these maps is not built; each
//! rotation carries a κ-cost from the cylinder-measure estimate so the
//! measure budget can still be audited.

use nalgebra::{DMatrix, DVector, Matrix2};
use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use crate::domination::{domination_ratio, oseledets_splitting, Splitting, RATIO_THRESHOLD};
use crate::error::{Error, Result};
use crate::linalg::{
    compound_matrix, condition_ratio, mgs_qr, min_principal_angle, op_norm, orthogonal_complement,
    plane_rotation, restricted_conorm, restricted_norm, vector_angle,
    ScaledProduct,
};
use crate::poincare::PoincareCocycle;
use crate::spectrum::{qr_exponents, GAP_FACTOR};

/// Per-step matching tolerance carried by every plan.
pub const GAMMA: f64 = 1e-8;
const ANGLE_SLACK: f64 = 1e-12;
const DEGENERATE_SV: f64 = 1e-9;

/// κ-cost of a rotation chain: a chain of `n` steps on a manifold of
/// dimension `d` keeps a fraction `λ^{(2d−3)n} σ^d` of the flowbox measure
/// unperturbed, so its cost is one minus that.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaModel {
    pub lambda: f64,
    pub sigma: f64,
}

impl Default for KappaModel {
    fn default() -> Self {
        KappaModel {
            lambda: 0.99,
            sigma: 0.95,
        }
    }
}

impl KappaModel {
    pub fn cost(&self, steps: usize, manifold_dim: usize) -> f64 {
        if steps == 0 {
            return 0.0;
        }
        let e = ((2 * manifold_dim - 3) * steps) as f64;
        1.0 - self.lambda.powf(e) * self.sigma.powi(manifold_dim as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Passthrough,
    /// `L = A ∘ R_ξ`, rotation by `angle` in the plane of the two
    /// orthonormal columns of `plane`, turning the first towards the second.
    Rotation { plane: DMatrix<f64>, angle: f64 },
    /// `L = R_ξ ∘ A`.
    BackRotation { plane: DMatrix<f64>, angle: f64 },
    /// `L = A ∘ R` with `R` the identity on a codimension-2 subspace H and
    /// the conjugate of a rotation by `angle` on the quotient, represented
    /// on the orthonormal basis `plane` of H^⊥.
    Elliptic { plane: DMatrix<f64>, angle: f64 },
}

impl StepKind {
    pub fn name(&self) -> &'static str {
        match self {
            StepKind::Passthrough => "passthrough",
            StepKind::Rotation { .. } => "rotation",
            StepKind::BackRotation { .. } => "back-rotation",
            StepKind::Elliptic { .. } => "elliptic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub mark: usize,
    pub kind: StepKind,
    pub l: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

impl PlanStep {
    pub fn deviation(&self) -> f64 {
        op_norm(&(&self.l - &self.a))
    }
}

/// A sequence `L_0, …, L_{ℓ−1}` standing in for the blocks at marks
/// `base..base + ℓ`, with its perturbation and measure budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizablePlan {
    pub base: usize,
    pub steps: Vec<PlanStep>,
    pub epsilon: f64,
    pub kappa: f64,
    pub kappa_spent: f64,
    pub gamma: f64,
}

impl RealizablePlan {
    /// The unperturbed blocks over `base..base + len`.
    pub fn passthrough(coc: &PoincareCocycle, base: usize, len: usize, epsilon: f64) -> Result<Self> {
        if base + len > coc.len() {
            return Err(Error::invalid(format!(
                "passthrough {base}+{len} runs past cocycle length {}",
                coc.len()
            )));
        }
        Ok(RealizablePlan {
            base,
            steps: (base..base + len)
                .map(|j| PlanStep {
                    mark: j,
                    kind: StepKind::Passthrough,
                    l: coc.blocks[j].clone(),
                    a: coc.blocks[j].clone(),
                })
                .collect(),
            epsilon,
            kappa: 0.0,
            kappa_spent: 0.0,
            gamma: GAMMA,
        })
    }

    fn single(step: PlanStep, epsilon: f64, cost: f64) -> Self {
        RealizablePlan {
            base: step.mark,
            steps: vec![step],
            epsilon,
            kappa: cost,
            kappa_spent: cost,
            gamma: GAMMA,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn end(&self) -> usize {
        self.base + self.len()
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.l.nrows())
    }

    /// `L_{ℓ−1} ⋯ L_0`.
    pub fn product(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut acc = DMatrix::identity(n, n);
        for s in &self.steps {
            acc = &s.l * acc;
        }
        acc
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut x = v.clone();
        for s in &self.steps {
            x = &s.l * x;
        }
        x
    }

    /// `max_j ‖L_j − A_j‖`.
    pub fn max_deviation(&self) -> f64 {
        self.steps.iter().map(PlanStep::deviation).fold(0.0, f64::max)
    }

    /// `| |det ∏L| / |det ∏A| − 1 |`, accumulated in logs.
    pub fn det_defect(&self) -> f64 {
        let log: f64 = self
            .steps
            .iter()
            .map(|s| s.l.determinant().abs().ln() - s.a.determinant().abs().ln())
            .sum();
        log.exp_m1().abs()
    }

    /// `log ‖∧^k (L_{ℓ−1} ⋯ L_0)‖`.
    pub fn log_exterior_norm(&self, k: usize) -> f64 {
        let first = compound_matrix(&self.steps[0].l, k);
        let mut acc = ScaledProduct::identity(first.nrows());
        acc.push(&first);
        for s in &self.steps[1..] {
            acc.push(&compound_matrix(&s.l, k));
        }
        acc.log_norm()
    }
}

/// Joins time-contiguous plans; lengths and κ's add.
pub fn concatenate(plans: Vec<RealizablePlan>) -> Result<RealizablePlan> {
    let mut it = plans.into_iter();
    let mut out = it.next().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
    for p in it {
        if p.base != out.end() {
            return Err(Error::invalid(format!(
                "plans not contiguous: previous ends at {}, next starts at {}",
                out.end(),
                p.base
            )));
        }
        out.kappa += p.kappa;
        out.kappa_spent += p.kappa_spent;
        out.epsilon = out.epsilon.max(p.epsilon);
        out.gamma = out.gamma.min(p.gamma);
        out.steps.extend(p.steps);
    }
    if out.kappa >= 1.0 {
        return Err(Error::KappaOverflow {
            total: out.kappa,
            limit: 1.0,
        });
    }
    Ok(out)
}

fn sup_norm(coc: &PoincareCocycle) -> f64 {
    coc.blocks.iter().map(op_norm).fold(0.0, f64::max)
}

/// Largest `ξ_0` with `sup_j ‖A_j‖ · √2 · sin ξ_0 ≤ ε`.
pub fn xi0_for(coc: &PoincareCocycle, epsilon: f64) -> f64 {
    (epsilon / (SQRT_2 * sup_norm(coc))).min(1.0).asin()
}

/// Angles and constants fixed by ε along an orbit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConstants {
    pub xi0: f64,
    pub c: f64,
    pub theta: f64,
    pub m_min: usize,
    pub sup_norm: f64,
    /// `8c / sin⁶ ξ_0`, the admissible condition number of the quotient.
    pub quotient_bound: f64,
}

impl ScheduleConstants {
    /// `c ≥ 1/sin²ξ_0`, `8√2 c sin θ < ε sin⁶ξ_0` and `m ≥ 2π/θ`.
    pub fn holds(&self, epsilon: f64, m: usize) -> bool {
        let s = self.xi0.sin();
        self.c >= 1.0 / (s * s)
            && 8.0 * SQRT_2 * self.c * self.theta.sin() < epsilon * s.powi(6)
            && m as f64 >= 2.0 * PI / self.theta
    }

    /// Bound on `‖R_{θ_j} − Id‖` for the conjugated chain rotations.
    pub fn rotation_bound(&self) -> f64 {
        self.quotient_bound * SQRT_2 * self.theta.sin()
    }
}

/// Computes `ξ_0`, `c`, `θ` and the smallest admissible chain length.
///
/// `c` is the larger of `1/sin²ξ_0` and the condition ratio of every block
/// and of every product of two consecutive blocks. `sin θ` carries an extra
/// factor `1/max(1, sup‖A‖)` so that the elliptic steps `A_j R_j` stay
/// within ε of `A_j`.
pub fn schedule(coc: &PoincareCocycle, epsilon: f64) -> Result<ScheduleConstants> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let sup = sup_norm(coc);
    let xi0 = xi0_for(coc, epsilon);
    let s = xi0.sin();
    let mut c = 1.0 / (s * s);
    for j in 0..coc.len() {
        c = c.max(condition_ratio(&coc.blocks[j]));
        if j + 1 < coc.len() {
            c = c.max(condition_ratio(&(&coc.blocks[j + 1] * &coc.blocks[j])));
        }
    }
    let sin_theta = (0.99 * epsilon * s.powi(6) / (8.0 * SQRT_2 * c * sup.max(1.0))).min(0.5);
    let theta = sin_theta.asin();
    Ok(ScheduleConstants {
        xi0,
        c,
        theta,
        m_min: (2.0 * PI / theta).ceil() as usize,
        sup_norm: sup,
        quotient_bound: 8.0 * c / s.powi(6),
    })
}

/// `[e1, e2]`: `a` normalised and the normalised part of `b` orthogonal to
/// it (zero when the two are parallel).
fn plane_basis(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let e1 = a.normalize();
    let mut e2 = b - &e1 * e1.dot(b);
    let n2 = e2.norm();
    if n2 > 1e-15 * b.norm() {
        e2 /= n2;
    } else {
        e2.fill(0.0);
    }
    DMatrix::from_columns(&[e1, e2])
}

fn budget_check(xi: f64, xi0: f64) -> Result<()> {
    if xi.abs() > xi0 + ANGLE_SLACK {
        return Err(Error::AngleBudgetExceeded {
            detail: format!("rotation angle {xi} exceeds xi0 = {xi0}"),
            min_m: None,
        });
    }
    Ok(())
}

/// `L = A_mark ∘ R_ξ` with `R_ξ` rotating the plane of `(a, b)` by `ξ`
/// from `a` towards `b`.
pub fn rotation_step(
    coc: &PoincareCocycle,
    mark: usize,
    plane: (&DVector<f64>, &DVector<f64>),
    xi: f64,
    epsilon: f64,
) -> Result<PlanStep> {
    budget_check(xi, xi0_for(coc, epsilon))?;
    let a = coc.blocks[mark].clone();
    let r = plane_rotation(plane.0, plane.1, xi);
    Ok(PlanStep {
        mark,
        kind: StepKind::Rotation {
            plane: plane_basis(plane.0, plane.1),
            angle: xi,
        },
        l: &a * r,
        a,
    })
}

/// `L = R_ξ ∘ A_mark`.
pub fn back_rotation_step(
    coc: &PoincareCocycle,
    mark: usize,
    plane: (&DVector<f64>, &DVector<f64>),
    xi: f64,
    epsilon: f64,
) -> Result<PlanStep> {
    budget_check(xi, xi0_for(coc, epsilon))?;
    let a = coc.blocks[mark].clone();
    let r = plane_rotation(plane.0, plane.1, xi);
    Ok(PlanStep {
        mark,
        kind: StepKind::BackRotation {
            plane: plane_basis(plane.0, plane.1),
            angle: xi,
        },
        l: r * &a,
        a,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeCase {
    SmallAngle,
    NormRatio,
    RotationChain,
}

impl fmt::Display for ExchangeCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExchangeCase::SmallAngle => "SmallAngle",
            ExchangeCase::NormRatio => "NormRatio",
            ExchangeCase::RotationChain => "RotationChain",
        })
    }
}

impl FromStr for ExchangeCase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "SmallAngle" => Ok(ExchangeCase::SmallAngle),
            "NormRatio" => Ok(ExchangeCase::NormRatio),
            "RotationChain" => Ok(ExchangeCase::RotationChain),
            other => Err(format!("unknown exchange case `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateConstants {
    pub xi0: f64,
    pub c: f64,
    pub theta: f64,
    pub m: usize,
    pub epsilon: f64,
    pub quotient_bound: f64,
    /// Mark (relative to the base) where the rotation happens.
    pub t: Option<usize>,
    /// Window length of the norm-ratio case.
    pub r: Option<usize>,
    pub varrho: Option<f64>,
    /// Largest condition ratio of the quotient cocycle seen by the chain.
    pub quotient_cond: Option<f64>,
    /// Total rotation of the chain on the quotient.
    pub total_angle: Option<f64>,
}

impl CertificateConstants {
    pub fn schedule_holds(&self) -> bool {
        ScheduleConstants {
            xi0: self.xi0,
            c: self.c,
            theta: self.theta,
            m_min: 0,
            sup_norm: 0.0,
            quotient_bound: self.quotient_bound,
        }
        .holds(self.epsilon, self.m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeCertificate {
    pub case: ExchangeCase,
    /// 𝔲 ∈ U at the base mark (unit).
    pub u: DVector<f64>,
    /// 𝔰 ∈ S at the base mark + m (unit).
    pub s: DVector<f64>,
    pub residual: f64,
    pub constants: CertificateConstants,
}

/// `‖y − α s‖ / ‖α s‖` for `y = plan(u)` and the best scalar α.
pub fn chain_residual(plan: &RealizablePlan, u: &DVector<f64>, s: &DVector<f64>) -> f64 {
    let y = plan.apply(u);
    let alpha = y.dot(s) / s.dot(s);
    let fit = s * alpha;
    (y - &fit).norm() / fit.norm()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ExchangeOptions {
    pub kappa_model: KappaModel,
}

/// The bundles carried through the exchange window, with the triangular
/// factors `T_t` such that `P^t U_0 = U_t T_t`.
struct Window {
    base: usize,
    m: usize,
    u: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    tu: Vec<DMatrix<f64>>,
}

impl Window {
    fn new(coc: &PoincareCocycle, split: &Splitting, m: usize) -> Result<Self> {
        let base = split.start;
        if m == 0 || base + m > coc.len() {
            return Err(Error::invalid(format!(
                "exchange window {base}+{m} does not fit cocycle length {}",
                coc.len()
            )));
        }
        let k = split.index;
        let mut u = vec![split.u_at(base).clone()];
        let mut s = vec![split.s_at(base).clone()];
        let mut tu = vec![DMatrix::identity(k, k)];
        for j in base..base + m {
            let (qu, ru) = mgs_qr(&(&coc.blocks[j] * u.last().unwrap()));
            let t_prev = tu.last().unwrap();
            tu.push(&ru * t_prev);
            u.push(qu);
            s.push(mgs_qr(&(&coc.blocks[j] * s.last().unwrap())).0);
        }
        Ok(Window { base, m, u, s, tu })
    }

    /// Pulls `v ∈ U_t` back to `U_0`, returning a unit vector.
    fn pull_back_u(&self, t: usize, v: &DVector<f64>) -> Result<DVector<f64>> {
        let y = self.u[t].transpose() * v;
        let x = self.tu[t]
            .clone()
            .solve_upper_triangular(&y)
            .ok_or_else(|| Error::invalid("U bundle collapsed in the window"))?;
        Ok((&self.u[0] * x).normalize())
    }

    /// 𝔰: the direction of `y` projected onto `S_m`.
    fn target_s(&self, y: &DVector<f64>) -> DVector<f64> {
        let s = &self.s[self.m];
        (s * (s.transpose() * y)).normalize()
    }
}

/// Smallest and largest singular values.
fn extreme_singular_values(a: &DMatrix<f64>) -> (f64, f64) {
    if a.ncols() == 1 {
        let n = a.norm();
        return (n, n);
    }
    let sv = a.clone().svd(false, false).singular_values;
    (sv.min(), sv.max())
}

/// Right singular vector of `a` for its smallest (`want_max = false`) or
/// largest singular value.
fn extreme_right_vector(a: &DMatrix<f64>, want_max: bool) -> DVector<f64> {
    if a.ncols() == 1 {
        return DVector::from_element(1, 1.0);
    }
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let sv = &svd.singular_values;
    let idx = if want_max { sv.imax() } else { sv.imin() };
    v_t.row(idx).transpose()
}

enum Found {
    Small { t: usize },
    Ratio { t: usize, r: usize },
}

fn find_case(coc: &PoincareCocycle, w: &Window, sc: &ScheduleConstants) -> Option<Found> {
    for t in 0..=w.m {
        if min_principal_angle(&w.u[t], &w.s[t]) <= sc.xi0 {
            return Some(Found::Small { t });
        }
    }
    // Σ log cond(A_j) over a window bounds its log ratio from above, so
    // windows that cannot reach c are skipped without an SVD.
    let mut prefix = vec![0.0];
    for j in 0..w.m {
        let (lo, hi) = extreme_singular_values(&coc.blocks[w.base + j]);
        prefix.push(prefix[j] + (hi / lo).ln());
    }
    let log_c = sc.c.ln();
    for t in 0..w.m {
        if prefix[w.m] - prefix[t] < log_c {
            break;
        }
        let mut pu = w.u[t].clone();
        let mut ps = w.s[t].clone();
        let (mut lu, mut ls) = (0.0, 0.0);
        for r in 1..=w.m - t {
            let a = &coc.blocks[w.base + t + r - 1];
            pu = a * pu;
            ps = a * ps;
            let (su, sm) = (pu.amax(), ps.amax());
            pu /= su;
            ps /= sm;
            lu += su.ln();
            ls += sm.ln();
            if r >= 2 && prefix[t + r] - prefix[t] >= log_c {
                let (u_min, _) = extreme_singular_values(&pu);
                let (_, s_max) = extreme_singular_values(&ps);
                let log_ratio = s_max.ln() + ls - u_min.ln() - lu;
                if log_ratio >= log_c {
                    return Some(Found::Ratio { t, r });
                }
            }
        }
    }
    None
}

/// Principal pair `(u_t, s_t)` realising the smallest angle between the
/// bundles at window mark `t`. Ties between equal principal angles pick the
/// `u` that grows least over the rest of the window and its partner `s`.
fn principal_pair(coc: &PoincareCocycle, w: &Window, t: usize) -> (DVector<f64>, DVector<f64>) {
    let (ut, st) = (&w.u[t], &w.s[t]);
    let rest = coc.product(w.base + t, w.base + w.m);
    let cross = ut.transpose() * st;
    let svd = cross.clone().svd(true, true);
    let (y, z_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let top = sv.max();
    let (u, mut s) = if top > DEGENERATE_SV {
        let idx: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] >= top - DEGENERATE_SV).collect();
        let wu = ut * y.select_columns(&idx);
        let ws = st * z_t.select_rows(&idx).transpose();
        let c = if idx.len() == 1 {
            DVector::from_element(1, 1.0)
        } else {
            extreme_right_vector(&(&rest * &wu), false)
        };
        (&wu * &c, (&ws * &c).normalize())
    } else {
        let cu = extreme_right_vector(&(&rest * ut), false);
        let cs = extreme_right_vector(&(&rest * st), true);
        (ut * cu, st * cs)
    };
    if u.dot(&s) < 0.0 {
        s = -s;
    }
    (u.normalize(), s)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    w: &Window,
    parts: Vec<RealizablePlan>,
    kappa: f64,
    epsilon: f64,
    u: DVector<f64>,
    case: ExchangeCase,
    constants: CertificateConstants,
) -> Result<(RealizablePlan, ExchangeCertificate)> {
    let mut plan = concatenate(parts)?;
    if plan.kappa_spent > kappa {
        return Err(Error::KappaOverflow {
            total: plan.kappa_spent,
            limit: kappa,
        });
    }
    plan.kappa = kappa;
    plan.epsilon = epsilon;
    debug_assert_eq!(plan.len(), w.m);
    let s = w.target_s(&plan.apply(&u));
    let residual = chain_residual(&plan, &u, &s);
    Ok((
        plan,
        ExchangeCertificate {
            case,
            u,
            s,
            residual,
            constants,
        },
    ))
}

fn base_constants(sc: &ScheduleConstants, m: usize, epsilon: f64) -> CertificateConstants {
    CertificateConstants {
        xi0: sc.xi0,
        c: sc.c,
        theta: sc.theta,
        m,
        epsilon,
        quotient_bound: sc.quotient_bound,
        t: None,
        r: None,
        varrho: None,
        quotient_cond: None,
        total_angle: None,
    }
}

fn small_angle(
    coc: &PoincareCocycle,
    w: &Window,
    t: usize,
    sc: &ScheduleConstants,
    epsilon: f64,
    kappa: f64,
    opts: &ExchangeOptions,
) -> Result<(RealizablePlan, ExchangeCertificate)> {
    let (ut, st) = principal_pair(coc, w, t);
    let xi = vector_angle(&ut, &st);
    let cost = opts.kappa_model.cost(1, coc.dim() + 1);
    let base = w.base;
    let parts = if t < w.m {
        vec![
            RealizablePlan::passthrough(coc, base, t, epsilon)?,
            RealizablePlan::single(rotation_step(coc, base + t, (&ut, &st), xi, epsilon)?, epsilon, cost),
            RealizablePlan::passthrough(coc, base + t + 1, w.m - t - 1, epsilon)?,
        ]
    } else {
        vec![
            RealizablePlan::passthrough(coc, base, w.m - 1, epsilon)?,
            RealizablePlan::single(
                back_rotation_step(coc, base + w.m - 1, (&ut, &st), xi, epsilon)?,
                epsilon,
                cost,
            ),
        ]
    };
    let u = w.pull_back_u(t, &ut)?;
    let mut k = base_constants(sc, w.m, epsilon);
    k.t = Some(t);
    finish(w, parts, kappa, epsilon, u, ExchangeCase::SmallAngle, k)
}

#[allow(clippy::too_many_arguments)]
fn norm_ratio(
    coc: &PoincareCocycle,
    w: &Window,
    t: usize,
    r: usize,
    sc: &ScheduleConstants,
    epsilon: f64,
    kappa: f64,
    opts: &ExchangeOptions,
) -> Result<(RealizablePlan, ExchangeCertificate)> {
    let base = w.base;
    let pr = coc.product(base + t, base + t + r);
    let ut = &w.u[t] * extreme_right_vector(&(&pr * &w.u[t]), false);
    let mut st = &w.s[t] * extreme_right_vector(&(&pr * &w.s[t]), true);
    let ut = ut.normalize();
    st = st.normalize();
    if ut.dot(&st) < 0.0 {
        st = -st;
    }
    let sx = sc.xi0.sin();
    let u_hat = &ut + &st * sx;
    let xi2 = vector_angle(&ut, &u_hat);
    let pu = &pr * &ut;
    let ps = &pr * &st;
    let varrho = pu.norm() / (sx * ps.norm());
    if !(varrho < sx + ANGLE_SLACK) {
        return Err(Error::invalid(format!(
            "norm-ratio window gives varrho = {varrho} >= sin xi0 = {sx}"
        )));
    }
    let s_next = ps.normalize();
    let s_hat = pu.normalize() * varrho + &s_next;
    let xi4 = vector_angle(&s_hat, &s_next);
    let cost = opts.kappa_model.cost(1, coc.dim() + 1);
    let parts = vec![
        RealizablePlan::passthrough(coc, base, t, epsilon)?,
        RealizablePlan::single(rotation_step(coc, base + t, (&ut, &st), xi2, epsilon)?, epsilon, cost),
        RealizablePlan::passthrough(coc, base + t + 1, r - 2, epsilon)?,
        RealizablePlan::single(
            back_rotation_step(coc, base + t + r - 1, (&s_hat, &s_next), xi4, epsilon)?,
            epsilon,
            cost,
        ),
        RealizablePlan::passthrough(coc, base + t + r, w.m - t - r, epsilon)?,
    ];
    let u = w.pull_back_u(t, &ut)?;
    let mut k = base_constants(sc, w.m, epsilon);
    k.t = Some(t);
    k.r = Some(r);
    k.varrho = Some(varrho);
    finish(w, parts, kappa, epsilon, u, ExchangeCase::NormRatio, k)
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Orthonormal basis of `a · span(basis)`; empty bases stay empty.
fn push_basis(a: &DMatrix<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    if basis.ncols() == 0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    mgs_qr(&(a * basis)).0
}

fn rotation2(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

fn to_dyn(m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
}

fn to_static(m: &DMatrix<f64>) -> Matrix2<f64> {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

fn signed_angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let cross = a[0] * b[1] - a[1] * b[0];
    cross.atan2(a.dot(b))
}

fn chain(
    coc: &PoincareCocycle,
    w: &Window,
    sc: &ScheduleConstants,
    epsilon: f64,
    kappa: f64,
    opts: &ExchangeOptions,
) -> Result<(RealizablePlan, ExchangeCertificate)> {
    let (base, m) = (w.base, w.m);
    let n = coc.dim();
    let pm = coc.product(base, base + m);
    let (u0, s0) = (&w.u[0], &w.s[0]);
    let k = u0.ncols();

    // u: least expanded direction of U_0; G_0 its complement inside U_0.
    let svd_u = (&pm * u0).svd(false, true);
    let vu = svd_u.v_t.unwrap().transpose();
    let iu = svd_u.singular_values.imin();
    let others_u: Vec<usize> = (0..k).filter(|&i| i != iu).collect();
    let v0 = (u0 * vu.column(iu)).normalize();
    let g0 = u0 * vu.select_columns(&others_u);

    // s': most expanded image inside S_m; F_m its complement inside S_m.
    let svd_s = (&pm * s0).svd(true, false);
    let ls = svd_s.u.unwrap();
    let is = svd_s.singular_values.imax();
    let others_s: Vec<usize> = (0..n - k).filter(|&i| i != is).collect();
    let fm = ls.select_columns(&others_s);

    // G_t forward, F_t backward.
    let mut g = vec![g0.clone()];
    for j in base..base + m {
        g.push(push_basis(&coc.blocks[j], g.last().unwrap()));
    }
    let mut f = vec![DMatrix::zeros(n, 0); m + 1];
    f[m] = fm.clone();
    for t in (0..m).rev() {
        let inv = coc.blocks[base + t]
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("singular block in rotation chain"))?;
        f[t] = push_basis(&inv, &f[t + 1]);
    }
    let q: Vec<DMatrix<f64>> = (0..=m)
        .map(|t| {
            let h = hstack(&g[t], &f[t]);
            let h = if h.ncols() == 0 { h } else { mgs_qr(&h).0 };
            orthogonal_complement(&h, n)
        })
        .collect();

    // Quotient cocycle on H^⊥ and its conditioning.
    let mut b = vec![Matrix2::identity()];
    let mut worst = 1.0_f64;
    for t in 0..m {
        let step = to_static(&(q[t + 1].transpose() * &coc.blocks[base + t] * &q[t]));
        let next = step * b[t];
        let cond = condition_ratio(&to_dyn(&next));
        worst = worst.max(cond);
        if !(cond <= sc.quotient_bound) {
            return Err(Error::QuotientIllConditioned {
                mark: t + 1,
                cond,
                bound: sc.quotient_bound,
            });
        }
        b.push(next);
    }

    // w_0: the direction of S_0 orthogonal to F_0.
    let f0_coords = s0.transpose() * &f[0];
    let f0_coords = if f0_coords.ncols() == 0 {
        DMatrix::zeros(n - k, 0)
    } else {
        mgs_qr(&f0_coords).0
    };
    let mut w0 = s0 * orthogonal_complement(&f0_coords, n - k).column(0);
    let cv = q[0].transpose() * &v0;
    let mut cw = q[0].transpose() * &w0;
    let mut total = signed_angle(&cv, &cw);
    if total.abs() > FRAC_PI_2 {
        w0 = -w0;
        cw = -cw;
        total = signed_angle(&cv, &cw);
    }
    w0 *= cv.norm() / cw.norm();
    let theta_j = total / m as f64;
    if theta_j.abs() > sc.theta + ANGLE_SLACK {
        return Err(Error::AngleBudgetExceeded {
            detail: format!("chain step angle {theta_j} exceeds theta = {}", sc.theta),
            min_m: Some(sc.m_min),
        });
    }

    let e = rotation2(theta_j);
    let mut steps = Vec::with_capacity(m);
    for t in 0..m {
        let binv = b[t].try_inverse().expect("quotient block is invertible");
        let rt = to_dyn(&(b[t] * e * binv)) - DMatrix::identity(2, 2);
        let r = DMatrix::identity(n, n) + &q[t] * rt * q[t].transpose();
        let a = coc.blocks[base + t].clone();
        steps.push(PlanStep {
            mark: base + t,
            kind: StepKind::Elliptic {
                plane: q[t].clone(),
                angle: theta_j,
            },
            l: &a * r,
            a,
        });
    }
    let cost = opts.kappa_model.cost(m, n + 1);
    let plan = RealizablePlan {
        base,
        steps,
        epsilon,
        kappa: cost,
        kappa_spent: cost,
        gamma: GAMMA,
    };

    // Correct v_0 by the G-component so the image lands in S_m.
    let image = plan.apply(&v0);
    let target = &pm * &w0;
    let gm_raw = &pm * &g0;
    let basis = hstack(&gm_raw, &fm);
    let u = if basis.ncols() == 0 {
        v0.clone()
    } else {
        let coeffs = basis
            .clone()
            .svd(true, true)
            .solve(&(&image - &target), 1e-14)
            .map_err(|e| Error::invalid(e.to_string()))?;
        let cg = coeffs.rows(0, k - 1).clone_owned();
        &v0 - &g0 * cg
    };
    let u = u.normalize();
    let mut consts = base_constants(sc, m, epsilon);
    consts.quotient_cond = Some(worst);
    consts.total_angle = Some(total);
    finish(w, vec![plan], kappa, epsilon, u, ExchangeCase::RotationChain, consts)
}

fn prepare(
    coc: &PoincareCocycle,
    split: &Splitting,
    m: usize,
    epsilon: f64,
) -> Result<(Window, ScheduleConstants)> {
    let w = Window::new(coc, split, m)?;
    let sc = schedule(coc, epsilon)?;
    if (m as f64) < 2.0 * PI / sc.theta {
        return Err(Error::AngleBudgetExceeded {
            detail: format!(
                "m = {m} below 2π/θ = {:.3} for epsilon = {epsilon}",
                2.0 * PI / sc.theta
            ),
            min_m: Some(sc.m_min),
        });
    }
    Ok((w, sc))
}

/// Builds a plan over `m` blocks from the splitting's start mark carrying a
/// vector of `U` into `S`, choosing the small-angle, norm-ratio or
/// rotation-chain construction as the window allows.
pub fn exchange(
    coc: &PoincareCocycle,
    split: &Splitting,
    m: usize,
    epsilon: f64,
    kappa: f64,
    opts: &ExchangeOptions,
) -> Result<(RealizablePlan, ExchangeCertificate)> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::invalid("kappa must lie in (0, 1)"));
    }
    let base = split.start;
    if base + m > coc.len() || m == 0 {
        return Err(Error::invalid("exchange window does not fit the cocycle"));
    }
    let pm = coc.product(base, base + m);
    let ratio = restricted_norm(&pm, split.s_at(base)) / restricted_conorm(&pm, split.u_at(base));
    if ratio < 0.5 {
        return Err(Error::NoMixingNeeded { ratio });
    }
    let (w, sc) = prepare(coc, split, m, epsilon)?;
    match find_case(coc, &w, &sc) {
        Some(Found::Small { t }) => small_angle(coc, &w, t, &sc, epsilon, kappa, opts),
        Some(Found::Ratio { t, r }) => norm_ratio(coc, &w, t, r, &sc, epsilon, kappa, opts),
        None => chain(coc, &w, &sc, epsilon, kappa, opts),
    }
}

/// The long-chain construction on its own. Its hypotheses (large angles,
/// bounded window ratios) are not re-checked; a violation shows up as a
/// failed quotient-conditioning guard.
pub fn rotation_chain(
    coc: &PoincareCocycle,
    split: &Splitting,
    m: usize,
    epsilon: f64,
    kappa: f64,
    opts: &ExchangeOptions,
) -> Result<(RealizablePlan, ExchangeCertificate)> {
    let (w, sc) = prepare(coc, split, m, epsilon)?;
    chain(coc, &w, &sc, epsilon, kappa, opts)
}

/// Verification of a plan against its certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub residual: f64,
    pub max_deviation: f64,
    pub det_defect: f64,
    pub schedule_ok: bool,
    pub passed: bool,
}

pub const RESIDUAL_TOL: f64 = 1e-8;
pub const DET_TOL: f64 = 1e-10;

/// Recomputes the residual and the budget invariants from the plan alone.
pub fn verify(plan: &RealizablePlan, cert: &ExchangeCertificate) -> Verification {
    let residual = chain_residual(plan, &cert.u, &cert.s);
    let max_deviation = plan.max_deviation();
    let det_defect = plan.det_defect();
    let schedule_ok = cert.constants.schedule_holds();
    let passed = residual <= RESIDUAL_TOL
        && max_deviation <= plan.epsilon
        && det_defect <= DET_TOL
        && schedule_ok
        && plan.kappa_spent <= plan.kappa;
    Verification {
        residual,
        max_deviation,
        det_defect,
        schedule_ok,
        passed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOptions {
    pub k: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub kappa: f64,
    pub horizon: usize,
    pub base: usize,
    /// Exchange length; the schedule minimum when unset.
    pub m: Option<usize>,
    pub past: usize,
    pub future: usize,
    pub exchange: ExchangeOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub chain: RealizablePlan,
    pub rate: f64,
    pub unperturbed_rate: f64,
    pub bound: f64,
    pub sigma_prev: f64,
    pub sigma_next: f64,
    pub exchange_mark: Option<usize>,
    /// The exchange segment of `chain`, which `certificate` refers to.
    pub exchange_plan: Option<RealizablePlan>,
    pub certificate: Option<ExchangeCertificate>,
    /// Smallest horizon on the search grid at which the bound is met.
    pub min_horizon: Option<usize>,
}

struct Attempt {
    outcome: LocalOutcome,
    met: bool,
}

fn attempt(coc: &PoincareCocycle, opts: &LocalOptions, horizon: usize) -> Result<Attempt> {
    let (k, base) = (opts.k, opts.base);
    let n = coc.dim();
    let ft = qr_exponents(&coc.blocks[base..base + horizon])?;
    let sigma_prev: f64 = ft[..k - 1].iter().sum();
    let sigma_next: f64 = ft[..(k + 1).min(n)].iter().sum();
    let bound = opts.delta + 0.5 * (sigma_prev + sigma_next);
    let t = horizon as f64;
    let passthrough = RealizablePlan::passthrough(coc, base, horizon, opts.epsilon)?;
    let unperturbed_rate = passthrough.log_exterior_norm(k) / t;
    let mut best = LocalOutcome {
        chain: passthrough,
        rate: unperturbed_rate,
        unperturbed_rate,
        bound,
        sigma_prev,
        sigma_next,
        exchange_mark: None,
        exchange_plan: None,
        certificate: None,
        min_horizon: None,
    };
    if unperturbed_rate < bound {
        return Ok(Attempt { outcome: best, met: true });
    }
    if k == n || ft[k - 1] - ft[k] <= GAP_FACTOR / t {
        return Err(Error::invalid(format!(
            "no finite-time gap between exponents {k} and {}",
            k + 1
        )));
    }
    let m = match opts.m {
        Some(m) => m,
        None => schedule(coc, opts.epsilon)?.m_min,
    };
    if m > horizon {
        return Ok(Attempt { outcome: best, met: false });
    }
    let split = oseledets_splitting(coc, k, base, horizon, opts.past, opts.future)?;
    let mut candidates: Vec<usize> = (base..=base + horizon - m)
        .filter(|&tau| {
            domination_ratio(coc, &split, m, tau).is_ok_and(|r| r > RATIO_THRESHOLD)
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::NotDominated);
    }
    let centre = 2 * base + horizon;
    candidates.sort_by_key(|&tau| ((2 * tau + m) as i64 - centre as i64).abs());
    for tau in candidates {
        let sub = Splitting {
            index: k,
            start: tau,
            u: split.u[tau - base..=tau - base + m].to_vec(),
            s: split.s[tau - base..=tau - base + m].to_vec(),
        };
        let Ok((plan, cert)) = exchange(coc, &sub, m, opts.epsilon, opts.kappa, &opts.exchange) else {
            continue;
        };
        let chain = concatenate(vec![
            RealizablePlan::passthrough(coc, base, tau - base, opts.epsilon)?,
            plan.clone(),
            RealizablePlan::passthrough(coc, tau + m, base + horizon - tau - m, opts.epsilon)?,
        ])?;
        let rate = chain.log_exterior_norm(k) / t;
        if rate < best.rate {
            best.chain = chain;
            best.rate = rate;
            best.exchange_mark = Some(tau);
            best.exchange_plan = Some(plan);
            best.certificate = Some(cert);
        }
        if best.rate < bound {
            return Ok(Attempt { outcome: best, met: true });
        }
    }
    Ok(Attempt { outcome: best, met: false })
}

/// Tries to lower `(1/t) log‖∧^k‖` below `δ + ½(Σ_{k−1} + Σ_{k+1})` by one
/// exchange placed at a non-dominated mark of `[base, base + t]`.
pub fn lower_exponent_experiment(coc: &PoincareCocycle, opts: &LocalOptions) -> Result<LocalOutcome> {
    let n = coc.dim();
    if opts.k == 0 || opts.k > n {
        return Err(Error::invalid(format!("k = {} outside 1..={n}", opts.k)));
    }
    if opts.base + opts.horizon + opts.future > coc.len() || opts.past > opts.base || opts.horizon == 0 {
        return Err(Error::invalid("cocycle too short for the requested base, horizon and windows"));
    }
    let full = attempt(coc, opts, opts.horizon)?;
    let stride = (opts.horizon / 20).max(1);
    if !full.met {
        let max_h = coc.len() - opts.future - opts.base;
        let mut h = opts.horizon + stride;
        while h <= max_h {
            if attempt(coc, opts, h).is_ok_and(|a| a.met) {
                return Err(Error::HorizonTooShort { minimal: Some(h) });
            }
            h += stride;
        }
        return Err(Error::HorizonTooShort { minimal: None });
    }
    let mut outcome = full.outcome;
    outcome.min_horizon = Some(opts.horizon);
    let mut h = stride;
    while h < opts.horizon {
        if attempt(coc, opts, h).is_ok_and(|a| a.met) {
            outcome.min_horizon = Some(h);
            break;
        }
        h += stride;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cocycle(n: usize, len: usize) -> PoincareCocycle {
        PoincareCocycle::from_blocks(vec![DMatrix::identity(n, n); len], None).unwrap()
    }

    fn unit(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn zero_rotation_is_the_block() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let coc = PoincareCocycle::from_blocks(vec![a.clone()], None).unwrap();
        let step = rotation_step(&coc, 0, (&unit(2, 0), &unit(2, 1)), 0.0, 1.0).unwrap();
        assert_eq!(step.l, a);
        let back = back_rotation_step(&coc, 0, (&unit(2, 0), &unit(2, 1)), 0.0, 1.0).unwrap();
        assert_eq!(back.l, a);
    }

    #[test]
    fn rotation_deviation_on_isometry() {
        let coc = identity_cocycle(2, 1);
        let step = rotation_step(&coc, 0, (&unit(2, 0), &unit(2, 1)), 0.1, 1.0).unwrap();
        assert!((step.deviation() - 2.0 * 0.05f64.sin()).abs() < 1e-12);
        assert!((step.l.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn angle_budget_enforced() {
        let coc = identity_cocycle(2, 1);
        // ε = 0.1 gives ξ_0 = asin(0.1/√2) ≈ 0.0708.
        let err = rotation_step(&coc, 0, (&unit(2, 0), &unit(2, 1)), 0.1, 0.1).unwrap_err();
        assert!(matches!(err, Error::AngleBudgetExceeded { .. }));
    }

    #[test]
    fn concatenation_budgets() {
        let coc = identity_cocycle(2, 10);
        let a = RealizablePlan::passthrough(&coc, 0, 2, 0.1).unwrap();
        let b = RealizablePlan::passthrough(&coc, 2, 3, 0.1).unwrap();
        let joined = concatenate(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(joined.len(), 5);
        assert_eq!(joined.kappa_spent, a.kappa_spent + b.kappa_spent);
        let single = concatenate(vec![a.clone()]).unwrap();
        assert_eq!(single, a);
        let mut p = a.clone();
        p.kappa = 0.6;
        let mut q = b.clone();
        q.kappa = 0.5;
        assert!(matches!(concatenate(vec![p, q]), Err(Error::KappaOverflow { .. })));
        assert!(concatenate(vec![b, a]).is_err());
    }

    #[test]
    fn isometry_exchange_is_a_rotation_chain() {
        let coc = identity_cocycle(2, 200);
        let u0 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let s0 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let split = Splitting::from_bases(&coc, 0, &u0, &s0, 200).unwrap();
        let eps = 1.3;
        let sc = schedule(&coc, eps).unwrap();
        let m = sc.m_min;
        let opts = ExchangeOptions {
            kappa_model: KappaModel {
                lambda: 0.9999,
                sigma: 0.95,
            },
        };
        let (plan, cert) = exchange(&coc, &split, m, eps, 0.5, &opts).unwrap();
        assert_eq!(cert.case, ExchangeCase::RotationChain);
        assert!(cert.residual <= 1e-10, "{}", cert.residual);
        let total = cert.constants.total_angle.unwrap();
        assert!((total.abs() - FRAC_PI_2).abs() < 1e-12);
        assert!(plan.max_deviation() <= eps);
        assert!(verify(&plan, &cert).passed);
    }

    #[test]
    fn guard_catches_violated_hypotheses() {
        // U is the contracting direction: the quotient condition number
        // grows without bound along the window.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.05, 1.0 / 1.05]));
        let coc = PoincareCocycle::from_blocks(vec![a; 400], None).unwrap();
        let u0 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let s0 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let split = Splitting::from_bases(&coc, 0, &u0, &s0, 400).unwrap();
        let eps = 1.3;
        let m = schedule(&coc, eps).unwrap().m_min;
        let opts = ExchangeOptions::default();
        assert!(matches!(
            rotation_chain(&coc, &split, m, eps, 0.9, &opts),
            Err(Error::QuotientIllConditioned { .. })
        ));
    }

    #[test]
    fn schedule_bound_below_epsilon() {
        let coc = identity_cocycle(2, 10);
        let sc = schedule(&coc, 0.1).unwrap();
        assert!(sc.rotation_bound() < 0.1);
        assert!(sc.holds(0.1, sc.m_min));
        assert!(!sc.holds(0.1, sc.m_min - 1));
    }

    #[test]
    fn no_mixing_needed_when_dominated() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0 / 3.0]));
        let coc = PoincareCocycle::from_blocks(vec![a; 50], None).unwrap();
        let u0 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let s0 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let split = Splitting::from_bases(&coc, 0, &u0, &s0, 50).unwrap();
        assert!(matches!(
            exchange(&coc, &split, 10, 1.0, 0.5, &ExchangeOptions::default()),
            Err(Error::NoMixingNeeded { .. })
        ));
    }

    #[test]
    fn kappa_cost_model() {
        let k = KappaModel::default();
        assert_eq!(k.cost(0, 3), 0.0);
        let one = k.cost(1, 3);
        assert!((one - (1.0 - 0.99f64.powi(3) * 0.95f64.powi(3))).abs() < 1e-15);
        assert!(k.cost(10, 3) > one);
    }
}
