//! Hand-built linear cocycles with prescribed geometry, used by the exchange
//! campaigns, the local lowering check and negative controls.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::{FRAC_PI_2, SQRT_2};

use crate::domination::Splitting;
use crate::error::Result;
use crate::linalg::{mgs_qr, op_norm, orthogonal_complement};
use crate::perturb::{schedule, ExchangeCase};
use crate::poincare::PoincareCocycle;
use crate::stats::stream_rng;

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn frames<R: Rng + ?Sized>(n: usize, len: usize, rng: &mut R) -> Vec<DMatrix<f64>> {
    (0..=len).map(|_| random_orthogonal(n, rng)).collect()
}

/// A cocycle, an invariant splitting from mark 0 and exchange parameters
/// under which one particular construction applies.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub expected: ExchangeCase,
    pub coc: PoincareCocycle,
    pub split: Splitting,
    pub m: usize,
    pub epsilon: f64,
}

fn finish_case(
    expected: ExchangeCase,
    blocks: Vec<DMatrix<f64>>,
    u0: &DMatrix<f64>,
    s0: &DMatrix<f64>,
    xi0: f64,
    m_floor: usize,
) -> Result<SyntheticCase> {
    let len = blocks.len();
    let coc = PoincareCocycle::from_blocks(blocks, None)?;
    let sup = coc.blocks.iter().map(op_norm).fold(0.0, f64::max);
    // Nudge ε up so ξ_0 recomputed from it does not round below xi0.
    let epsilon = SQRT_2 * sup * xi0.sin() * (1.0 + 1e-12);
    let sc = schedule(&coc, epsilon)?;
    let m = sc.m_min.max(m_floor);
    debug_assert!(m <= len, "synthetic window too short: {m} > {len}");
    let split = Splitting::from_bases(&coc, 0, u0, s0, m)?;
    Ok(SyntheticCase {
        expected,
        coc,
        split,
        m,
        epsilon,
    })
}

fn dims<R: Rng + ?Sized>(rng: &mut R) -> (usize, usize) {
    let n = rng.random_range(2..=4);
    (n, rng.random_range(1..n))
}

/// Length bound for the small-angle windows: `2π/θ` for the widest shear
/// the generator draws, rounded up.
const SMALL_ANGLE_LEN: usize = 800;

/// Orthogonal blocks except a shear at mark 2 that brings one direction of U
/// to angle `ξ_0/2` from S at mark 3 and its inverse at mark 3.
pub fn small_angle_case<R: Rng + ?Sized>(rng: &mut R) -> Result<SyntheticCase> {
    let (n, k) = dims(rng);
    let xi0: f64 = rng.random_range(1.0..1.3);
    let alpha = xi0 / 2.0;
    let e = frames(n, SMALL_ANGLE_LEN, rng);
    let mut shear = DMatrix::identity(n, n);
    shear[(k - 1, k - 1)] = alpha.sin();
    shear[(k, k - 1)] = alpha.cos();
    let inv = shear.clone().try_inverse().expect("shear is invertible");
    let blocks: Vec<DMatrix<f64>> = (0..SMALL_ANGLE_LEN)
        .map(|j| match j {
            2 => &e[3] * &shear * e[2].transpose(),
            3 => &e[4] * &inv * e[3].transpose(),
            _ => &e[j + 1] * e[j].transpose(),
        })
        .collect();
    let u0 = e[0].columns(0, k).clone_owned();
    let s0 = e[0].columns(k, n - k).clone_owned();
    finish_case(ExchangeCase::SmallAngle, blocks, &u0, &s0, xi0, 0)
}

const NORM_RATIO_LEN: usize = 400;

/// Orthogonal frames with a window of blocks contracting U by `e^{−a}` and
/// expanding S by `e^{a}`.
pub fn norm_ratio_case<R: Rng + ?Sized>(rng: &mut R) -> Result<SyntheticCase> {
    let (n, k) = dims(rng);
    let a: f64 = rng.random_range(0.04..0.08);
    let width = rng.random_range(4..=10);
    let xi0 = rng.random_range(0.85f64..0.95).asin();
    let offset = rng.random_range(0..100);
    let e = frames(n, NORM_RATIO_LEN, rng);
    let diag = DVector::from_fn(n, |i, _| if i < k { (-a).exp() } else { a.exp() });
    let d = DMatrix::from_diagonal(&diag);
    let blocks: Vec<DMatrix<f64>> = (0..NORM_RATIO_LEN)
        .map(|j| {
            if (offset..offset + width).contains(&j) {
                &e[j + 1] * &d * e[j].transpose()
            } else {
                &e[j + 1] * e[j].transpose()
            }
        })
        .collect();
    let u0 = e[0].columns(0, k).clone_owned();
    let s0 = e[0].columns(k, n - k).clone_owned();
    finish_case(ExchangeCase::NormRatio, blocks, &u0, &s0, xi0, offset + width)
}

const CHAIN_LEN: usize = 200;

/// Nearly orthogonal blocks `O_j exp(S_j)` with small symmetric `S_j`, and a
/// splitting whose angle stays well above `ξ_0`.
pub fn rotation_chain_case<R: Rng + ?Sized>(rng: &mut R) -> Result<SyntheticCase> {
    let (n, k) = dims(rng);
    let blocks: Vec<DMatrix<f64>> = (0..CHAIN_LEN)
        .map(|_| {
            let o = random_orthogonal(n, rng);
            let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sym = (&g + g.transpose()) * 0.5;
            let sym = &sym * (5e-4 / op_norm(&sym));
            o * sym.exp()
        })
        .collect();
    let frame = random_orthogonal(n, rng);
    let u0 = frame.columns(0, k).clone_owned();
    let tilt = DMatrix::from_fn(k, n - k, |_, _| rng.random_range(-1.0..1.0) / (k as f64).sqrt());
    let s0 = frame.columns(k, n - k) + &u0 * tilt * 0.15;
    let s0 = mgs_qr(&s0).0;
    // ε = 1.3 sup‖A‖ gives sin ξ_0 = 1.3/√2.
    let xi0 = (1.3 / SQRT_2).asin();
    finish_case(ExchangeCase::RotationChain, blocks, &u0, &s0, xi0, 0)
}

pub fn case_for<R: Rng + ?Sized>(case: ExchangeCase, rng: &mut R) -> Result<SyntheticCase> {
    match case {
        ExchangeCase::SmallAngle => small_angle_case(rng),
        ExchangeCase::NormRatio => norm_ratio_case(rng),
        ExchangeCase::RotationChain => rotation_chain_case(rng),
    }
}

/// Parameters of the fixed non-dominated cocycle used for the local lowering
/// check.
#[derive(Debug, Clone)]
pub struct Designated {
    pub coc: PoincareCocycle,
    pub k: usize,
    pub base: usize,
    pub horizon: usize,
    pub past: usize,
    pub future: usize,
    pub delta: f64,
    pub epsilon: f64,
}

/// Fiber 3, index 2. Every block is `Q diag(e^{0.3}, e^{0.1}, e^{−0.4}) Qᵀ`
/// except over marks `[80, 120)` of the horizon, where the last two rates
/// swap, so U = Q⟨e1, e2⟩ is not dominating S = Q⟨e3⟩ there.
pub fn designated_nondominated() -> Designated {
    let (past, horizon, future) = (80, 200, 80);
    let q = random_orthogonal(3, &mut stream_rng(0x5eed, 7));
    let block = |rates: [f64; 3]| {
        let d = DMatrix::from_diagonal(&DVector::from_iterator(3, rates.iter().map(|r| r.exp())));
        &q * d * q.transpose()
    };
    let regular = block([0.3, 0.1, -0.4]);
    let swapped = block([0.3, -0.4, 0.1]);
    let blocks = (0..past + horizon + future)
        .map(|j| {
            if (past + 80..past + 120).contains(&j) {
                swapped.clone()
            } else {
                regular.clone()
            }
        })
        .collect();
    Designated {
        coc: PoincareCocycle::from_blocks(blocks, None).expect("blocks are invertible"),
        k: 2,
        base: past,
        horizon,
        past,
        future,
        delta: 0.1,
        epsilon: 15.0,
    }
}

/// `A_j = [e1 | s_{j+1}] diag(4, 1/4) [e1 | s_j]^{−1}` with `∠(e1, s_j) =
/// 1/(j+1)`: dominated at every mark while the splitting angle decays.
pub fn angle_decay(len: usize) -> (PoincareCocycle, Splitting) {
    let s = |j: usize| {
        let a = 1.0 / (j as f64 + 1.0);
        DVector::from_vec(vec![a.cos(), a.sin()])
    };
    let e1 = DVector::from_vec(vec![1.0, 0.0]);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.25]));
    let basis = |j: usize| DMatrix::from_columns(&[e1.clone(), s(j)]);
    let blocks = (0..len)
        .map(|j| basis(j + 1) * &d * basis(j).try_inverse().expect("basis is invertible"))
        .collect();
    let coc = PoincareCocycle::from_blocks(blocks, None).expect("blocks are invertible");
    // S is repelling in forward time, so the exact bases are used instead
    // of pushed-forward ones.
    let split = Splitting {
        index: 1,
        start: 0,
        u: vec![DMatrix::from_columns(&[e1]); len + 1],
        s: (0..=len).map(|j| DMatrix::from_columns(&[s(j)])).collect(),
    };
    (coc, split)
}

/// Constant `diag(e^a, e^{−a})` with U along the contracting axis: the
/// quotient cocycle of a rotation chain becomes arbitrarily ill-conditioned.
pub fn quotient_guard_control(a: f64, len: usize) -> (PoincareCocycle, Splitting) {
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![a.exp(), (-a).exp()]));
    let coc = PoincareCocycle::from_blocks(vec![d; len], None).expect("blocks are invertible");
    let u0 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let s0 = orthogonal_complement(&u0, 2);
    let split = Splitting::from_bases(&coc, 0, &u0, &s0, len).expect("bases match the fiber");
    (coc, split)
}

/// Angle used by the property-T control at mark `j`.
pub fn angle_decay_angle(j: usize) -> f64 {
    (1.0 / (j as f64 + 1.0)).min(FRAC_PI_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_principal_angle;

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = stream_rng(1, 0);
        let q = random_orthogonal(4, &mut rng);
        assert!((q.transpose() * &q - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn small_angle_geometry() {
        let mut rng = stream_rng(2, 0);
        let case = small_angle_case(&mut rng).unwrap();
        let xi0 = crate::perturb::xi0_for(&case.coc, case.epsilon);
        let a3 = min_principal_angle(case.split.u_at(3), case.split.s_at(3));
        assert!((a3 - xi0 / 2.0).abs() < 1e-9, "{a3} vs {xi0}");
        let a2 = min_principal_angle(case.split.u_at(2), case.split.s_at(2));
        assert!((a2 - FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn angle_decay_angles() {
        let (_, split) = angle_decay(20);
        for j in 0..=20 {
            let a = min_principal_angle(split.u_at(j), split.s_at(j));
            assert!((a - angle_decay_angle(j)).abs() < 1e-9, "{j}: {a} vs {}", angle_decay_angle(j));
        }
    }
}
