//! Fixed-step RK4 for the flow and its variational equation.
//!
//! State and tangent map are advanced jointly so that the Jacobian is
//! evaluated at the same stage points as the field. On mapping tori a step
//! that crosses the roof is split at the crossing time (found by bisection)
//! and the chart transition is applied to both the state and the tangent.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Domain, FlowModel};

pub const MAX_STEP: f64 = 0.1;
pub const DEFAULT_STEP: f64 = 0.01;
/// Below this speed the orbit is considered to have left the regular set.
pub const SPEED_FLOOR: f64 = 1e-8;
pub const DET_TOL: f64 = 1e-8;
const CROSSING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    /// Index j of the step x_j → x_{j+1} containing the crossing.
    pub step: usize,
    /// Jacobian of the chart transition, d×d.
    pub gluing: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitSegment {
    pub model_id: String,
    pub p0: DVector<f64>,
    pub step: f64,
    pub n_steps: usize,
    pub states: Vec<DVector<f64>>,
    pub speeds: Vec<f64>,
    pub crossings: Vec<Crossing>,
}

impl OrbitSegment {
    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.step
    }
}

/// Per-step tangent maps `D_j ≈ DX^h(x_j)` of an [`OrbitSegment`].
#[derive(Debug, Clone, PartialEq)]
pub struct TangentSegment {
    pub step: f64,
    pub maps: Vec<DMatrix<f64>>,
}

impl TangentSegment {
    /// The composed map `D_{to-1} ⋯ D_from` (identity when `from == to`).
    pub fn compose(&self, from: usize, to: usize) -> DMatrix<f64> {
        let d = self.maps.first().map_or(0, |m| m.nrows());
        let mut acc = DMatrix::identity(d, d);
        for m in &self.maps[from..to] {
            acc = m * acc;
        }
        acc
    }
}

/// One classical RK4 step for `x' = X(x)` and, if given, `D' = DX(x)·D`.
fn rk4(
    model: &FlowModel,
    x: &DVector<f64>,
    d: Option<&DMatrix<f64>>,
    h: f64,
) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let k1 = model.eval_field(x);
    let x2 = x + &k1 * (h / 2.0);
    let k2 = model.eval_field(&x2);
    let x3 = x + &k2 * (h / 2.0);
    let k3 = model.eval_field(&x3);
    let x4 = x + &k3 * h;
    let k4 = model.eval_field(&x4);
    let xn = x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    let dn = d.map(|d| {
        let j1 = model.eval_jacobian(x) * d;
        let j2 = model.eval_jacobian(&x2) * (d + &j1 * (h / 2.0));
        let j3 = model.eval_jacobian(&x3) * (d + &j2 * (h / 2.0));
        let j4 = model.eval_jacobian(&x4) * (d + &j3 * h);
        d + (j1 + (j2 + j3) * 2.0 + j4) * (h / 6.0)
    });
    (xn, dn)
}

/// Chart transition for a crossing in the direction of `sign(h)`: returns
/// the d×d Jacobian and applies the map to `x` in place.
fn glue(model: &FlowModel, x: &mut DVector<f64>, forward: bool) -> DMatrix<f64> {
    let Domain::MappingTorus { roof, gluing, .. } = &model.domain else {
        unreachable!("glue on a model without roof");
    };
    let n = gluing.nrows();
    let g = if forward {
        gluing.clone()
    } else {
        gluing.clone().try_inverse().expect("gluing matrix is invertible")
    };
    let fiber = &g * x.rows(0, n);
    x.rows_mut(0, n).copy_from(&fiber);
    if forward {
        x[n] -= roof;
    } else {
        x[n] += roof;
    }
    let mut full = DMatrix::identity(n + 1, n + 1);
    full.view_mut((0, 0), (n, n)).copy_from(&g);
    full
}

fn crossed(model: &FlowModel, z: f64, h: f64) -> bool {
    match &model.domain {
        Domain::MappingTorus { roof, .. } => {
            if h > 0.0 {
                z >= *roof
            } else {
                z < 0.0
            }
        }
        Domain::Torus { .. } => false,
    }
}

/// Result of advancing by one (possibly split) step.
pub struct Advance {
    pub state: DVector<f64>,
    pub tangent: Option<DMatrix<f64>>,
    pub gluing: Option<DMatrix<f64>>,
}

/// Advances `x` (and `d`) by `h`, handling at most one roof crossing.
/// No reduction to the fundamental domain is applied.
pub fn advance(model: &FlowModel, x: &DVector<f64>, d: Option<&DMatrix<f64>>, h: f64) -> Advance {
    let (xn, dn) = rk4(model, x, d, h);
    let last = model.dim - 1;
    if !crossed(model, xn[last], h) {
        return Advance {
            state: xn,
            tangent: dn,
            gluing: None,
        };
    }
    let sign = h.signum();
    let (mut lo, mut hi) = (0.0, h.abs());
    while hi - lo > CROSSING_TOL {
        let mid = 0.5 * (lo + hi);
        let (xm, _) = rk4(model, x, None, sign * mid);
        if crossed(model, xm[last], h) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (mut xc, dc) = rk4(model, x, d, sign * hi);
    let g = glue(model, &mut xc, h > 0.0);
    let dc = dc.map(|m| &g * m);
    let rest = h - sign * hi;
    let (xf, df) = if rest.abs() > 0.0 {
        rk4(model, &xc, dc.as_ref(), rest)
    } else {
        (xc, dc)
    };
    Advance {
        state: xf,
        tangent: df,
        gluing: Some(g),
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h <= MAX_STEP) {
        return Err(Error::invalid(format!("step {h} outside (0, {MAX_STEP}]")));
    }
    Ok(())
}

fn speed_of(model: &FlowModel, x: &DVector<f64>, step: usize) -> Result<f64> {
    let speed = model.eval_field(x).norm();
    if !(speed >= SPEED_FLOOR) {
        return Err(Error::SpeedUnderflow { step, speed });
    }
    Ok(speed)
}

/// Integrates `n` steps of size `h` from `p0`, reducing states into the
/// fundamental domain after every step.
pub fn integrate_orbit(model: &FlowModel, p0: &DVector<f64>, h: f64, n: usize) -> Result<OrbitSegment> {
    check_step(h)?;
    if p0.len() != model.dim {
        return Err(Error::invalid(format!(
            "initial state has length {}, model dimension is {}",
            p0.len(),
            model.dim
        )));
    }
    let mut states = Vec::with_capacity(n + 1);
    let mut speeds = Vec::with_capacity(n + 1);
    let mut crossings = Vec::new();
    let mut x = p0.clone();
    model.wrap(&mut x);
    speeds.push(speed_of(model, &x, 0)?);
    states.push(x.clone());
    for j in 0..n {
        let adv = advance(model, &x, None, h);
        x = adv.state;
        model.wrap(&mut x);
        if let Some(gluing) = adv.gluing {
            crossings.push(Crossing { step: j, gluing });
        }
        speeds.push(speed_of(model, &x, j + 1)?);
        states.push(x.clone());
    }
    Ok(OrbitSegment {
        model_id: model.id.clone(),
        p0: p0.clone(),
        step: h,
        n_steps: n,
        states,
        speeds,
        crossings,
    })
}

/// Tangent maps of every step of `orbit`, each integrated from the identity.
pub fn integrate_tangent(model: &FlowModel, orbit: &OrbitSegment) -> Result<TangentSegment> {
    let d = model.dim;
    let id = DMatrix::identity(d, d);
    let mut maps = Vec::with_capacity(orbit.n_steps);
    for j in 0..orbit.n_steps {
        let adv = advance(model, &orbit.states[j], Some(&id), orbit.step);
        let m = adv.tangent.expect("tangent requested");
        let det = m.determinant();
        if !((det - 1.0).abs() <= DET_TOL) {
            return Err(Error::DeterminantDrift {
                step: j,
                det,
                tol: DET_TOL,
            });
        }
        maps.push(m);
    }
    Ok(TangentSegment {
        step: orbit.step,
        maps,
    })
}

/// Flows `x` for time `t` with steps of at most `h` (the last one is
/// shortened), returning the unreduced state and the tangent map DX^t(x).
pub fn flow_with_tangent(
    model: &FlowModel,
    x: &DVector<f64>,
    t: f64,
    h: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_step(h)?;
    let d = model.dim;
    let mut state = x.clone();
    let mut tangent = DMatrix::identity(d, d);
    let n = (t.abs() / h).floor() as usize;
    let sign = t.signum();
    let mut remaining = t;
    for j in 0..=n {
        let dt = if j < n { sign * h } else { remaining };
        if dt.abs() < 1e-15 {
            break;
        }
        let adv = advance(model, &state, Some(&tangent), dt);
        state = adv.state;
        tangent = adv.tangent.expect("tangent requested");
        remaining -= dt;
        speed_of(model, &state, j + 1)?;
    }
    Ok((state, tangent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn winding_straight_lines() {
        let m = FlowModel::irrational_winding_default();
        let orbit = integrate_orbit(&m, &v(&[0.0, 0.0, 0.0]), 0.1, 5).unwrap();
        let mut expected = v(&[0.5, 0.5 * 2f64.sqrt(), 0.5 * 3f64.sqrt()]);
        m.wrap(&mut expected);
        assert!((&orbit.states[5] - expected).amax() < 1e-14);
        assert_eq!(orbit.crossings.len(), 0);
    }

    #[test]
    fn large_step_rejected() {
        let m = FlowModel::irrational_winding_default();
        assert!(matches!(
            integrate_orbit(&m, &v(&[0.0, 0.0, 0.0]), 0.5, 2),
            Err(Error::InvalidInput(_))
        ));
        assert!(integrate_orbit(&m, &v(&[0.0, 0.0, 0.0]), 0.0, 2).is_err());
    }

    #[test]
    fn cat_crossing_applies_gluing() {
        let m = FlowModel::cat_suspension();
        let orbit = integrate_orbit(&m, &v(&[0.1, 0.2, 0.0]), 0.0625, 16).unwrap();
        let last = &orbit.states[16];
        assert_abs_diff_eq!(last[0], 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(last[1], 0.3, epsilon = 1e-9);
        assert!(last[2] < 1e-9 || (1.0 - last[2]) < 1e-9);
        assert_eq!(orbit.crossings.len(), 1);
        let tangent = integrate_tangent(&m, &orbit).unwrap();
        let total = tangent.compose(0, 16);
        let expected = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((total - expected).amax() < 1e-12);
    }

    #[test]
    fn backward_crossing_inverts() {
        let m = FlowModel::cat_suspension();
        let x = v(&[0.1, 0.2, 0.05]);
        let (fwd, _) = flow_with_tangent(&m, &x, 1.0, 0.1).unwrap();
        let (back, dt) = flow_with_tangent(&m, &fwd, -1.0, 0.1).unwrap();
        assert!((back - &x).amax() < 1e-11);
        assert!((dt.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_steps() {
        let m = FlowModel::abc_flow_default();
        let orbit = integrate_orbit(&m, &v(&[0.1, 0.2, 0.3]), 0.01, 0).unwrap();
        assert_eq!(orbit.states.len(), 1);
        assert_eq!(integrate_tangent(&m, &orbit).unwrap().maps.len(), 0);
    }

    #[test]
    fn abc_richardson() {
        let m = FlowModel::abc_flow_default();
        let x = v(&[0.3, 1.1, 2.0]);
        let (_, a) = flow_with_tangent(&m, &x, 1.0, 0.01).unwrap();
        let (_, b) = flow_with_tangent(&m, &x, 1.0, 0.005).unwrap();
        assert!((a - b).amax() < 1e-6);
    }

    #[test]
    fn determinant_drift_detected() {
        // A field with trace ≠ 0 integrated by the tangent routine must trip
        // the volume monitor.
        use crate::model::{Field, Term, TermKind};
        let mut m = FlowModel::abc_flow_default();
        m.field = Field::Terms(vec![
            Term { component: 0, coeff: 1.0, kind: TermKind::Monomial { powers: vec![0, 0, 0] } },
            Term { component: 0, coeff: 0.1, kind: TermKind::Monomial { powers: vec![1, 0, 0] } },
        ]);
        let orbit = integrate_orbit(&m, &v(&[0.1, 0.2, 0.3]), 0.01, 3).unwrap();
        assert!(matches!(
            integrate_tangent(&m, &orbit),
            Err(Error::DeterminantDrift { step: 0, .. })
        ));
    }
}
