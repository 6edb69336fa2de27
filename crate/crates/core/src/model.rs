//! Divergence-free model flows.
//!
//! A [`FlowModel`] couples an analytic vector field and its Jacobian with the
//! flat domain it lives on. Two kinds of domain are supported: a flat torus
//! (periodic box) and a mapping torus, where the last coordinate is the flow
//! direction and crossing the roof applies a linear gluing map to the fiber
//! coordinates. The built-in suspensions put all of their hyperbolicity in
//! that gluing map, so their ground truth is exact.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One additive term of a component of a custom field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub component: usize,
    pub coeff: f64,
    pub kind: TermKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermKind {
    /// `sin(freq · x + phase)`
    Sin { freq: Vec<f64>, phase: f64 },
    /// `cos(freq · x + phase)`
    Cos { freq: Vec<f64>, phase: f64 },
    /// `∏ x_i^{powers_i}`
    Monomial { powers: Vec<u32> },
}

impl Term {
    fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TermKind::Sin { freq, phase } => self.coeff * (dot(freq, x) + phase).sin(),
            TermKind::Cos { freq, phase } => self.coeff * (dot(freq, x) + phase).cos(),
            TermKind::Monomial { powers } => {
                self.coeff
                    * powers
                        .iter()
                        .zip(x)
                        .map(|(&p, &xi)| xi.powi(p as i32))
                        .product::<f64>()
            }
        }
    }

    fn gradient_into(&self, x: &[f64], row: &mut [f64]) {
        match &self.kind {
            TermKind::Sin { freq, phase } => {
                let c = self.coeff * (dot(freq, x) + phase).cos();
                for (r, f) in row.iter_mut().zip(freq) {
                    *r += c * f;
                }
            }
            TermKind::Cos { freq, phase } => {
                let s = -self.coeff * (dot(freq, x) + phase).sin();
                for (r, f) in row.iter_mut().zip(freq) {
                    *r += s * f;
                }
            }
            TermKind::Monomial { powers } => {
                for (i, r) in row.iter_mut().enumerate() {
                    let pi = powers[i];
                    if pi == 0 {
                        continue;
                    }
                    let mut prod = self.coeff * pi as f64;
                    for (j, (&p, &xj)) in powers.iter().zip(x).enumerate() {
                        let e = if j == i { p - 1 } else { p };
                        prod *= xj.powi(e as i32);
                    }
                    *r += prod;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Constant(DVector<f64>),
    Abc { a: f64, b: f64, c: f64 },
    Terms(Vec<Term>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    /// Box `[0, period_i)` per axis; coordinates are reduced modulo the
    /// periods after each step when `wrap` is set.
    Torus { periods: Vec<f64>, wrap: bool },
    /// Fiber coordinates `0..d-1` live on `[0, fiber_period)`; the last
    /// coordinate runs over `[0, roof)`. Crossing the roof maps the fiber
    /// by `gluing` and subtracts the roof.
    MappingTorus {
        fiber_period: f64,
        roof: f64,
        gluing: DMatrix<f64>,
    },
}

/// Known exact behaviour of a model, used by oracle tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    /// Lyapunov exponents of the linear Poincaré cocycle, nonincreasing.
    pub exponents: Option<Vec<f64>>,
    /// Indices k for which every orbit carries a dominated splitting.
    pub dominated_indices: Vec<usize>,
    /// Lower bound for the angle between the dominated bundles.
    pub angle_floor: Option<f64>,
}

/// An analytic divergence-free vector field on a flat domain.
///
/// All built-ins have an empty singular set on their domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub id: String,
    pub dim: usize,
    pub field: Field,
    pub domain: Domain,
    pub truth: GroundTruth,
}

/// Largest eigenvalue of the cat matrix [[2,1],[1,1]].
pub fn cat_eigenvalue() -> f64 {
    (3.0 + 5f64.sqrt()) / 2.0
}

pub const BUILTIN_IDS: [&str; 4] = [
    "cat_suspension",
    "irrational_winding",
    "abc_flow",
    "product_hyperbolic",
];

impl FlowModel {
    /// Suspension of the cat automorphism with unit roof.
    pub fn cat_suspension() -> Self {
        let gluing = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let l = cat_eigenvalue().ln();
        FlowModel {
            id: "cat_suspension".into(),
            dim: 3,
            field: Field::Constant(DVector::from_vec(vec![0.0, 0.0, 1.0])),
            domain: Domain::MappingTorus {
                fiber_period: 1.0,
                roof: 1.0,
                gluing,
            },
            truth: GroundTruth {
                exponents: Some(vec![l, -l]),
                dominated_indices: vec![1],
                angle_floor: Some(PI / 4.0),
            },
        }
    }

    /// Linear flow `(1, α, β)` on the 3-torus of side 1.
    pub fn irrational_winding(alpha: f64, beta: f64) -> Self {
        FlowModel {
            id: "irrational_winding".into(),
            dim: 3,
            field: Field::Constant(DVector::from_vec(vec![1.0, alpha, beta])),
            domain: Domain::Torus {
                periods: vec![1.0; 3],
                wrap: true,
            },
            truth: GroundTruth {
                exponents: Some(vec![0.0, 0.0]),
                dominated_indices: vec![],
                angle_floor: None,
            },
        }
    }

    pub fn irrational_winding_default() -> Self {
        Self::irrational_winding(2f64.sqrt(), 3f64.sqrt())
    }

    /// Arnold–Beltrami–Childress flow on the 2π-periodic 3-torus.
    pub fn abc_flow(a: f64, b: f64, c: f64) -> Self {
        FlowModel {
            id: "abc_flow".into(),
            dim: 3,
            field: Field::Abc { a, b, c },
            domain: Domain::Torus {
                periods: vec![2.0 * PI; 3],
                wrap: true,
            },
            truth: GroundTruth::default(),
        }
    }

    pub fn abc_flow_default() -> Self {
        Self::abc_flow(1.0, 1.0, 1.0)
    }

    /// Cat suspension times `dim - 3` neutral circle directions. The fiber
    /// is `(x, y, w_1, …)`; the gluing acts as the cat map on `(x, y)` and
    /// as the identity on the `w`'s.
    pub fn product_hyperbolic(dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(Error::invalid("product_hyperbolic needs dim >= 4"));
        }
        let fiber = dim - 1;
        let mut gluing = DMatrix::identity(fiber, fiber);
        gluing[(0, 0)] = 2.0;
        gluing[(0, 1)] = 1.0;
        gluing[(1, 0)] = 1.0;
        gluing[(1, 1)] = 1.0;
        let mut v = DVector::zeros(dim);
        v[dim - 1] = 1.0;
        let l = cat_eigenvalue().ln();
        let mut exps = vec![l];
        exps.extend(std::iter::repeat_n(0.0, fiber - 2));
        exps.push(-l);
        Ok(FlowModel {
            id: "product_hyperbolic".into(),
            dim,
            field: Field::Constant(v),
            domain: Domain::MappingTorus {
                fiber_period: 1.0,
                roof: 1.0,
                gluing,
            },
            truth: GroundTruth {
                exponents: Some(exps),
                dominated_indices: vec![1, fiber - 1],
                angle_floor: Some(PI / 4.0),
            },
        })
    }

    /// Looks up a built-in by id with its default parameters.
    pub fn builtin(id: &str) -> Result<Self> {
        match id {
            "cat_suspension" => Ok(Self::cat_suspension()),
            "irrational_winding" => Ok(Self::irrational_winding_default()),
            "abc_flow" => Ok(Self::abc_flow_default()),
            "product_hyperbolic" => Self::product_hyperbolic(4),
            other => Err(Error::invalid(format!("unknown model id `{other}`"))),
        }
    }

    /// Dimension of the normal fiber.
    pub fn fiber_dim(&self) -> usize {
        self.dim - 1
    }

    pub fn eval_field(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.field {
            Field::Constant(v) => v.clone(),
            Field::Abc { a, b, c } => {
                let (px, py, pz) = (x[0], x[1], x[2]);
                DVector::from_vec(vec![
                    a * pz.sin() + c * py.cos(),
                    b * px.sin() + a * pz.cos(),
                    c * py.sin() + b * px.cos(),
                ])
            }
            Field::Terms(terms) => {
                let mut out = DVector::zeros(self.dim);
                for t in terms {
                    out[t.component] += t.value(x.as_slice());
                }
                out
            }
        }
    }

    pub fn eval_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.field {
            Field::Constant(_) => DMatrix::zeros(self.dim, self.dim),
            Field::Abc { a, b, c } => {
                let (px, py, pz) = (x[0], x[1], x[2]);
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        0.0,
                        -c * py.sin(),
                        a * pz.cos(),
                        b * px.cos(),
                        0.0,
                        -a * pz.sin(),
                        -b * px.sin(),
                        c * py.cos(),
                        0.0,
                    ],
                )
            }
            Field::Terms(terms) => {
                let d = self.dim;
                let mut jac = DMatrix::zeros(d, d);
                let mut row = vec![0.0; d];
                for t in terms {
                    row.iter_mut().for_each(|r| *r = 0.0);
                    t.gradient_into(x.as_slice(), &mut row);
                    for (j, r) in row.iter().enumerate() {
                        jac[(t.component, j)] += r;
                    }
                }
                jac
            }
        }
    }

    pub fn divergence(&self, x: &DVector<f64>) -> f64 {
        self.eval_jacobian(x).trace()
    }

    /// Reduces a state into the fundamental domain. For mapping tori only the
    /// fiber coordinates are reduced; roof crossings are the integrator's job.
    pub fn wrap(&self, x: &mut DVector<f64>) {
        match &self.domain {
            Domain::Torus { periods, wrap } => {
                if *wrap {
                    for (xi, p) in x.iter_mut().zip(periods) {
                        *xi = xi.rem_euclid(*p);
                    }
                }
            }
            Domain::MappingTorus { fiber_period, .. } => {
                let n = x.len() - 1;
                for xi in x.iter_mut().take(n) {
                    *xi = xi.rem_euclid(*fiber_period);
                }
            }
        }
    }

    /// Uniform sample from the invariant (Lebesgue) measure on the domain.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.domain {
            Domain::Torus { periods, .. } => {
                DVector::from_iterator(self.dim, periods.iter().map(|p| rng.random::<f64>() * p))
            }
            Domain::MappingTorus {
                fiber_period, roof, ..
            } => {
                let mut x = DVector::zeros(self.dim);
                for i in 0..self.dim - 1 {
                    x[i] = rng.random::<f64>() * fiber_period;
                }
                x[self.dim - 1] = rng.random::<f64>() * roof;
                x
            }
        }
    }

    /// Minimal-image displacement `b - a` on the domain, used for recurrence
    /// tests. Mapping tori are treated as their fiber torus times an interval.
    pub fn displacement(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let mut d = b - a;
        match &self.domain {
            Domain::Torus { periods, wrap } => {
                if *wrap {
                    for (di, p) in d.iter_mut().zip(periods) {
                        *di -= p * (*di / p).round();
                    }
                }
            }
            Domain::MappingTorus { fiber_period, .. } => {
                let n = d.len() - 1;
                for di in d.iter_mut().take(n) {
                    *di -= fiber_period * (*di / fiber_period).round();
                }
            }
        }
        d
    }

    /// Checks the divergence-free property at `samples` random points.
    pub fn check_divergence_free<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        samples: usize,
        tol: f64,
    ) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = self.sample_point(rng);
            let div = self.divergence(&x).abs();
            worst = worst.max(div);
            if !(div <= tol) {
                return Err(Error::invalid(format!(
                    "model `{}` is not divergence-free: trace {div:e} at {:?}",
                    self.id,
                    x.as_slice()
                )));
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn field_values() {
        let w = FlowModel::irrational_winding_default();
        assert_eq!(
            w.eval_field(&v(&[0.0, 0.0, 0.0])),
            v(&[1.0, 2f64.sqrt(), 3f64.sqrt()])
        );
        let cat = FlowModel::cat_suspension();
        assert_eq!(cat.eval_field(&v(&[0.3, 0.9, 0.5])), v(&[0.0, 0.0, 1.0]));
        let abc = FlowModel::abc_flow_default();
        assert_eq!(abc.eval_field(&v(&[0.0, 0.0, 0.0])), v(&[1.0, 1.0, 1.0]));
    }

    #[test]
    fn jacobian_values() {
        let w = FlowModel::irrational_winding_default();
        assert_eq!(w.eval_jacobian(&v(&[0.2, 0.1, 0.7])), DMatrix::zeros(3, 3));
        let cat = FlowModel::cat_suspension();
        assert_eq!(cat.eval_jacobian(&v(&[0.2, 0.1, 0.7])), DMatrix::zeros(3, 3));
        let abc = FlowModel::abc_flow_default();
        let j = abc.eval_jacobian(&v(&[0.0, 0.0, 0.0]));
        let expected = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((j - expected).amax() < 1e-15);
    }

    #[test]
    fn builtins_divergence_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for id in BUILTIN_IDS {
            let m = FlowModel::builtin(id).unwrap();
            let worst = m.check_divergence_free(&mut rng, 10_000, 1e-10).unwrap();
            assert!(worst <= 1e-10, "{id}: {worst}");
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let abc = FlowModel::abc_flow(1.0, 0.7, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = abc.sample_point(&mut rng);
            let jac = abc.eval_jacobian(&x);
            let err = |h: f64| {
                let mut worst: f64 = 0.0;
                for i in 0..3 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let col = (abc.eval_field(&xp) - abc.eval_field(&xm)) / (2.0 * h);
                    worst = worst.max((col - jac.column(i)).amax());
                }
                worst
            };
            let (e3, e4) = (err(1e-3), err(1e-4));
            let order = (e3 / e4).log10();
            assert!(order >= 1.9, "observed order {order} ({e3:e}, {e4:e})");
        }
    }

    #[test]
    fn product_hyperbolic_structure() {
        let m = FlowModel::product_hyperbolic(5).unwrap();
        assert_eq!(m.fiber_dim(), 4);
        let exps = m.truth.exponents.clone().unwrap();
        assert_eq!(exps.len(), 4);
        assert_eq!(exps[1], 0.0);
        assert!(FlowModel::product_hyperbolic(3).is_err());
    }

    #[test]
    fn unknown_id_rejected() {
        assert!(FlowModel::builtin("lorenz").is_err());
    }
}
