use std::path::PathBuf;

use nalgebra::DMatrix;
use proptest::prelude::*;

use lpflow::error::Error;
use lpflow::integrator::integrate_orbit;
use lpflow::model::FlowModel;
use lpflow::perturb::{exchange, verify, ExchangeOptions, KappaModel};
use lpflow::poincare::PoincareCocycle;
use lpflow::stats::stream_rng;
use lpflow::perturb::ExchangeCase;
use lpflow::synthetic::case_for;
use lpflow::textio::{
    parse_cocycle, parse_cocycle_bytes, parse_model_bytes, parse_orbit, parse_orbit_bytes,
    parse_plan, parse_plan_bytes, write_cocycle, write_orbit, write_plan,
};

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn fuzz_seeds_parse_without_panicking() {
    for (path, bytes) in corpus("cocycle") {
        let r = parse_cocycle_bytes(&bytes);
        if path.ends_with("truncated") {
            assert!(matches!(r, Err(Error::Parse { .. })));
        } else {
            r.unwrap();
        }
    }
    for (_, bytes) in corpus("orbit") {
        parse_orbit_bytes(&bytes).unwrap();
    }
    for (_, bytes) in corpus("plan") {
        parse_plan_bytes(&bytes).unwrap();
    }
    for (path, bytes) in corpus("model") {
        assert_eq!(parse_model_bytes(&bytes).is_ok(), !path.ends_with("broken"));
    }
}

fn plan_text(i: u64) -> String {
    let case = [ExchangeCase::SmallAngle, ExchangeCase::NormRatio, ExchangeCase::RotationChain][i as usize % 3];
    let sc = case_for(case, &mut stream_rng(51, i)).unwrap();
    let opts = ExchangeOptions {
        kappa_model: KappaModel { lambda: 0.9999, sigma: 0.95 },
    };
    let (plan, cert) = exchange(&sc.coc, &sc.split, sc.m, sc.epsilon, 0.9, &opts).unwrap();
    write_plan(&plan, Some(&cert))
}

#[test]
fn saved_plans_replay_and_detect_tampering() {
    for i in 0..3 {
        let text = plan_text(i);
        let (plan, cert) = parse_plan(&text).unwrap();
        let cert = cert.unwrap();
        assert_eq!(write_plan(&plan, Some(&cert)), text);
        assert!(verify(&plan, &cert).passed);

        let mut tampered = plan.clone();
        tampered.steps[0].l[(0, 0)] += 1e-3;
        assert!(verify(&tampered, &cert).residual > 1e-8);

        let cut = &text[..text.len() / 2];
        assert!(matches!(parse_plan(cut), Err(Error::Parse { .. })));
    }
}

#[test]
fn orbit_round_trip() {
    let model = FlowModel::abc_flow_default();
    let p = model.sample_point(&mut stream_rng(51, 9));
    let orbit = integrate_orbit(&model, &p, 0.01, 50).unwrap();
    let table = parse_orbit(&write_orbit(&orbit)).unwrap();
    assert_eq!(table.states, orbit.states);
    assert_eq!(table.speeds, orbit.speeds);
    assert_eq!(table.model_id, orbit.model_id);
}

fn cocycle_strategy() -> impl Strategy<Value = PoincareCocycle> {
    (1usize..4, 1usize..6).prop_flat_map(|(n, len)| {
        (
            prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), n * n), len),
            prop::collection::vec(1e-3f64..1e3, len),
        )
            .prop_map(move |(blocks, xs)| {
                let blocks = blocks.into_iter().map(|b| DMatrix::from_vec(n, n, b)).collect();
                PoincareCocycle { frames: Vec::new(), blocks, x_factors: xs }
            })
    })
}

proptest! {
    #[test]
    fn cocycle_text_round_trips(coc in cocycle_strategy()) {
        let back = parse_cocycle(&write_cocycle(&coc)).unwrap();
        prop_assert_eq!(back.blocks, coc.blocks);
        prop_assert_eq!(back.x_factors, coc.x_factors);
    }

    #[test]
    fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let _ = parse_cocycle_bytes(&bytes);
        let _ = parse_orbit_bytes(&bytes);
        let _ = parse_plan_bytes(&bytes);
        let _ = parse_model_bytes(&bytes);
    }

    #[test]
    fn mutated_seeds_never_panic(pos in 0usize..200, byte in any::<u8>(), target in 0usize..4) {
        let name = ["cocycle", "orbit", "plan", "model"][target];
        for (_, mut bytes) in corpus(name) {
            if !bytes.is_empty() {
                let p = pos % bytes.len();
                bytes[p] = byte;
            }
            let _ = parse_cocycle_bytes(&bytes);
            let _ = parse_orbit_bytes(&bytes);
            let _ = parse_plan_bytes(&bytes);
            let _ = parse_model_bytes(&bytes);
        }
    }

    #[test]
    fn offsets_lie_inside_the_input(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        for r in [parse_cocycle_bytes(&bytes).err(), parse_orbit_bytes(&bytes).err()] {
            if let Some(Error::Parse { offset, .. }) = r {
                prop_assert!(offset <= bytes.len());
            }
        }
    }
}
