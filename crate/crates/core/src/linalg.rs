//! Small dense linear-algebra kernels shared by the cocycle modules.
//!
//! Everything here works on `DMatrix<f64>` with column-vector conventions:
//! a subspace is represented by a matrix whose columns form an orthonormal
//! basis of it.

use nalgebra::{DMatrix, DVector};

/// Columns with residual norm below this (relative to the input column)
/// are treated as linearly dependent.
const DEPENDENCE_TOL: f64 = 1e-12;

/// Fixed orthonormal frame in general position with respect to every
/// coordinate subspace. QR iterations start here: from the identity they
/// never leave an invariant coordinate flag of a triangular cocycle.
pub fn generic_frame(n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |i, j| {
        let x = (i + 1) as f64 * std::f64::consts::SQRT_2 + ((j + 1) * (j + 2)) as f64 * 3f64.sqrt();
        x.fract() - 0.5 + if i == j { 0.25 } else { 0.0 }
    });
    mgs_qr(&m).0
}

/// Thin QR factorisation by modified Gram–Schmidt with one
/// re-orthogonalisation pass. Returns `(Q, R)` with `Q` n×k having
/// orthonormal columns and `R` k×k upper triangular with nonnegative diagonal.
///
/// A column that is dependent on the previous ones gets a zero diagonal
/// entry in `R` and an arbitrary unit column in `Q` orthogonal to the rest.
pub fn mgs_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, k) = a.shape();
    let mut q = a.clone();
    let mut r = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                r[(i, j)] += proj;
                let qi = q.column(i).clone_owned();
                q.column_mut(j).axpy(-proj, &qi, 1.0);
            }
        }
        let norm = q.column(j).norm();
        r[(j, j)] = norm;
        if norm > 0.0 && norm.is_finite() {
            q.column_mut(j).scale_mut(1.0 / norm);
        } else {
            let fill = completion_vector(&q.columns(0, j).clone_owned(), n);
            q.set_column(j, &fill);
        }
    }
    (q, r)
}

/// A unit vector orthogonal to the columns of `basis` (which must have
/// fewer than `n` orthonormal columns).
fn completion_vector(basis: &DMatrix<f64>, n: usize) -> DVector<f64> {
    let mut best = DVector::<f64>::zeros(n);
    let mut best_norm = -1.0;
    for e in 0..n {
        let mut v = DVector::<f64>::zeros(n);
        v[e] = 1.0;
        for i in 0..basis.ncols() {
            let p = basis.column(i).dot(&v);
            v.axpy(-p, &basis.column(i), 1.0);
        }
        let nv = v.norm();
        if nv > best_norm {
            best_norm = nv;
            best = v / nv;
        }
    }
    best
}

/// Orthonormal basis of the column span of `a`; `None` if the columns are
/// (numerically) dependent.
pub fn orthonormalize(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (q, r) = mgs_qr(a);
    for j in 0..a.ncols() {
        let scale = a.column(j).norm();
        if !(r[(j, j)] > DEPENDENCE_TOL * scale.max(f64::MIN_POSITIVE)) {
            return None;
        }
    }
    Some(q)
}

/// Orthonormal basis of the orthogonal complement of the span of the
/// orthonormal columns of `basis` in R^n.
pub fn orthogonal_complement(basis: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = basis.ncols();
    let mut cols: Vec<DVector<f64>> = (0..k).map(|i| basis.column(i).clone_owned()).collect();
    let mut out = Vec::with_capacity(n - k);
    // Try candidates in order of how far they stick out of the current span.
    while cols.len() < n {
        let mut best: Option<DVector<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..n {
            let mut v = DVector::<f64>::zeros(n);
            v[e] = 1.0;
            for _ in 0..2 {
                for c in &cols {
                    let p = c.dot(&v);
                    v.axpy(-p, c, 1.0);
                }
            }
            let nv = v.norm();
            if nv > best_norm {
                best_norm = nv;
                best = Some(v / nv);
            }
        }
        let v = best.expect("complement exists while dim < n");
        cols.push(v.clone());
        out.push(v);
    }
    if out.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&out)
    }
}

/// Largest singular value.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Smallest of the `min(rows, cols)` singular values: for an n×k matrix
/// with k ≤ n this is the co-norm of the map restricted to its domain.
pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.min()
}

/// Norm of `a` restricted to the subspace spanned by the orthonormal
/// columns of `basis`.
pub fn restricted_norm(a: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
    op_norm(&(a * basis))
}

/// Co-norm (minimal expansion) of `a` restricted to span(`basis`).
pub fn restricted_conorm(a: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
    min_singular_value(&(a * basis))
}

/// Operator norm condition ratio ‖A‖/𝔪(A) of a square matrix.
pub fn condition_ratio(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    sv.max() / sv.min()
}

/// Smallest principal angle between the subspaces spanned by the
/// orthonormal columns of `a` and `b`, in `[0, π/2]`.
///
/// Computed as `atan2(sin, cos)` so that small angles keep full relative
/// precision.
pub fn min_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 || b.ncols() == 0 {
        return std::f64::consts::FRAC_PI_2;
    }
    let (small, large) = if a.ncols() <= b.ncols() { (a, b) } else { (b, a) };
    let cos = op_norm(&(small.transpose() * large)).min(1.0);
    let residual = small - large * (large.transpose() * small);
    let sin = min_singular_value(&residual).min(1.0);
    sin.atan2(cos)
}

/// Distance between equal-dimensional subspaces: sine of the largest
/// principal angle, ‖(I − P_b) a‖.
pub fn subspace_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 {
        return 0.0;
    }
    let residual = a - b * (b.transpose() * a);
    op_norm(&residual).min(1.0)
}

/// Distance from the unit vector along `v` to the subspace spanned by the
/// orthonormal columns of `basis` (sine of the angle).
pub fn distance_to_subspace(v: &DVector<f64>, basis: &DMatrix<f64>) -> f64 {
    let n = v.norm();
    if n == 0.0 {
        return 0.0;
    }
    if basis.ncols() == 0 {
        return 1.0;
    }
    let unit = v / n;
    let residual = &unit - basis * (basis.transpose() * &unit);
    residual.norm()
}

/// Rotation of R^n by `angle` in the plane spanned by `a` and `b`, turning
/// `a` towards `b`, identity on the orthogonal complement of the plane.
///
/// If `a` and `b` are parallel the plane is undefined and the identity is
/// returned.
pub fn plane_rotation(a: &DVector<f64>, b: &DVector<f64>, angle: f64) -> DMatrix<f64> {
    let n = a.len();
    let e1 = a / a.norm();
    let mut e2 = b - &e1 * e1.dot(b);
    let n2 = e2.norm();
    if n2 <= 1e-15 * b.norm() || angle == 0.0 {
        return DMatrix::identity(n, n);
    }
    e2 /= n2;
    let (s, c) = angle.sin_cos();
    // R = I + (c - 1)(e1 e1ᵀ + e2 e2ᵀ) + s(e2 e1ᵀ − e1 e2ᵀ)
    let mut r = DMatrix::identity(n, n);
    r += (&e1 * e1.transpose() + &e2 * e2.transpose()) * (c - 1.0);
    r += (&e2 * e1.transpose() - &e1 * e2.transpose()) * s;
    r
}

/// Angle between two nonzero vectors, in `[0, π]`.
pub fn vector_angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    let cos = a.dot(b) / (na * nb);
    let sin = {
        let ua = a / na;
        let ub = b / nb;
        (&ub - &ua * ua.dot(&ub)).norm()
    };
    sin.atan2(cos)
}

/// Rotation in span(a, b) taking the direction of `a` to the direction of `b`.
pub fn rotation_taking(a: &DVector<f64>, b: &DVector<f64>) -> (DMatrix<f64>, f64) {
    let angle = vector_angle(a, b);
    (plane_rotation(a, b, angle), angle)
}

/// Enumerates the k-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn extend(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            extend(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    extend(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Binomial coefficient.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// k-th compound matrix: entry (I, J) is the minor det A[I, J] with the
/// k-subsets I, J in lexicographic order. This is the matrix of ∧^k A in
/// the basis e_{i1} ∧ … ∧ e_{ik}.
pub fn compound_matrix(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "compound of a non-square matrix");
    if k == 1 {
        return a.clone();
    }
    let subsets = combinations(n, k);
    let size = subsets.len();
    let mut out = DMatrix::<f64>::zeros(size, size);
    let mut minor = DMatrix::<f64>::zeros(k, k);
    for (ri, rows) in subsets.iter().enumerate() {
        for (ci, cols) in subsets.iter().enumerate() {
            for (p, &r) in rows.iter().enumerate() {
                for (q, &c) in cols.iter().enumerate() {
                    minor[(p, q)] = a[(r, c)];
                }
            }
            out[(ri, ci)] = minor.clone().determinant();
        }
    }
    out
}

/// A matrix product kept in `scale · exp(log_scale)` form so that long
/// hyperbolic products neither overflow nor underflow.
#[derive(Debug, Clone)]
pub struct ScaledProduct {
    pub matrix: DMatrix<f64>,
    pub log_scale: f64,
}

impl ScaledProduct {
    pub fn identity(n: usize) -> Self {
        ScaledProduct {
            matrix: DMatrix::identity(n, n),
            log_scale: 0.0,
        }
    }

    /// Left-multiplies by `a` (the product becomes `a · self`).
    pub fn push(&mut self, a: &DMatrix<f64>) {
        self.matrix = a * &self.matrix;
        let m = self.matrix.amax();
        if m > 1e100 || (m < 1e-100 && m > 0.0) {
            self.matrix /= m;
            self.log_scale += m.ln();
        }
    }

    /// log of the operator norm of the full product.
    pub fn log_norm(&self) -> f64 {
        op_norm(&self.matrix).ln() + self.log_scale
    }
}
