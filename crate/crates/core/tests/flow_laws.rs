use nalgebra::{DMatrix, DVector};
use rand::Rng;

use lpflow::integrator::flow_with_tangent;
use lpflow::model::{FlowModel, BUILTIN_IDS};
use lpflow::poincare::{direct_block, orbit_cocycle};
use lpflow::stats::stream_rng;

const H: f64 = 0.01;

fn builtins() -> Vec<FlowModel> {
    BUILTIN_IDS.iter().map(|id| FlowModel::builtin(id).unwrap()).collect()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

#[test]
fn tangent_maps_compose() {
    let mut rng = stream_rng(3, 0);
    for model in builtins() {
        for _ in 0..3 {
            let p = model.sample_point(&mut rng);
            let s = rng.random_range(1..=1000) as f64 * H;
            let t = rng.random_range(1..=1000) as f64 * H;
            let (mid, d1) = flow_with_tangent(&model, &p, s, H).unwrap();
            let (_, d2) = flow_with_tangent(&model, &mid, t, H).unwrap();
            let (_, whole) = flow_with_tangent(&model, &p, s + t, H).unwrap();
            let err = rel(&(&d2 * &d1), &whole);
            assert!(err <= 1e-8, "{} s={s} t={t}: {err:e}", model.id);
        }
    }
}

#[test]
fn tangent_map_carries_the_field() {
    let mut rng = stream_rng(3, 1);
    for model in builtins() {
        for _ in 0..5 {
            let p = model.sample_point(&mut rng);
            let t = rng.random_range(0.5..10.0);
            let (q, d) = flow_with_tangent(&model, &p, t, H).unwrap();
            let err = (&d * model.eval_field(&p) - model.eval_field(&q)).norm();
            assert!(err <= 1e-6, "{} t={t}: {err:e}", model.id);
        }
    }
}

#[test]
fn blocks_are_projected_tangent_maps() {
    let mut rng = stream_rng(3, 2);
    let models = builtins();
    for trial in 0..100 {
        let model = &models[trial % models.len()];
        let p = model.sample_point(&mut rng);
        let (_, coc) = orbit_cocycle(model, &p, H, 6).unwrap();
        let j = rng.random_range(0..coc.len());
        let n = coc.dim();
        let c = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let (from, to) = (&coc.frames[j], &coc.frames[j + 1]);
        let (_, d) = flow_with_tangent(model, &from.base, 1.0, H).unwrap();
        let pushed = d * (&from.vectors * &c);
        let x = model.eval_field(&to.base).normalize();
        let projected = &pushed - &x * x.dot(&pushed);
        let expected = to.vectors.transpose() * projected;
        let err = (&coc.blocks[j] * &c - expected).norm();
        assert!(err <= 1e-8, "{} mark {j}: {err:e}", model.id);
    }
}

#[test]
fn flow_direction_drops_out() {
    let mut rng = stream_rng(3, 3);
    for model in builtins() {
        let p = model.sample_point(&mut rng);
        let (q, d) = flow_with_tangent(&model, &p, 1.0, H).unwrap();
        let x = model.eval_field(&q).normalize();
        let image = d * model.eval_field(&p);
        let projected = &image - &x * x.dot(&image);
        assert!(projected.norm() <= 1e-8, "{}", model.id);
    }
}

#[test]
fn poincare_cocycle_law() {
    let mut rng = stream_rng(3, 4);
    for model in builtins() {
        let p = model.sample_point(&mut rng);
        let (_, coc) = orbit_cocycle(&model, &p, H, 8).unwrap();
        for (s, t) in [(1, 1), (2, 3), (3, 5)] {
            let first = direct_block(&model, &coc, 0, s, H).unwrap();
            let second = direct_block(&model, &coc, s, t, H).unwrap();
            let whole = direct_block(&model, &coc, 0, s + t, H).unwrap();
            assert!(rel(&(&second * &first), &whole) <= 1e-6, "{} s={s} t={t}", model.id);
            assert!(rel(&coc.product(0, s + t), &whole) <= 1e-6, "{} s={s} t={t}", model.id);
        }
    }
}
