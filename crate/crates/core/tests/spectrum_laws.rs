use std::sync::OnceLock;

use lpflow::model::{FlowModel, BUILTIN_IDS};
use lpflow::poincare::{orbit_cocycle, PoincareCocycle};
use lpflow::spectrum::{exterior_power, le_k, lyapunov_exponents, sigma_k, SampleOptions};
use lpflow::stats::stream_rng;

const T: usize = 1000;
const H: f64 = 0.01;

fn cocycles() -> &'static Vec<(FlowModel, PoincareCocycle)> {
    static CELL: OnceLock<Vec<(FlowModel, PoincareCocycle)>> = OnceLock::new();
    CELL.get_or_init(|| {
        BUILTIN_IDS
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let model = FlowModel::builtin(id).unwrap();
                let p = model.sample_point(&mut stream_rng(17, i as u64));
                let (_, coc) = orbit_cocycle(&model, &p, H, T).unwrap();
                (model, coc)
            })
            .collect()
    })
}

#[test]
fn exterior_powers_add_exponents() {
    for (model, coc) in cocycles() {
        let report = lyapunov_exponents(coc, T).unwrap();
        for k in 1..coc.dim() {
            let top = exterior_power(coc, k).unwrap().top_exponent(T).unwrap();
            let sum = sigma_k(&report, k).unwrap();
            assert!((top - sum).abs() <= 2e-3, "{} k={k}: {top} vs {sum}", model.id);
        }
    }
}

#[test]
fn exponents_sum_to_zero() {
    for (model, coc) in cocycles() {
        let report = lyapunov_exponents(coc, T).unwrap();
        assert!(report.sum().abs() <= 2e-3, "{}: {}", model.id, report.sum());
    }
}

#[test]
fn reversal_negates_the_spectrum() {
    for (model, coc) in cocycles() {
        let forward = lyapunov_exponents(coc, T).unwrap().exponents;
        let backward = lyapunov_exponents(&coc.reversed().unwrap(), T).unwrap().exponents;
        for (f, b) in forward.iter().zip(backward.iter().rev()) {
            assert!((f + b).abs() <= 2e-3, "{}: {forward:?} vs {backward:?}", model.id);
        }
    }
}

#[test]
fn exterior_log_norms_are_subadditive() {
    let opts = SampleOptions {
        n_points: 64,
        step: H,
        seed: 5,
    };
    for id in BUILTIN_IDS {
        let model = FlowModel::builtin(id).unwrap();
        for k in 1..model.fiber_dim() {
            let report = le_k(&model, k, 50, &opts).unwrap();
            let bad: Vec<_> = report.checks.iter().filter(|c| !c.holds).collect();
            assert!(bad.is_empty(), "{id} k={k}: {bad:?}");
        }
    }
}
