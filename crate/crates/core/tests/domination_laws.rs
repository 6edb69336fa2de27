use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use lpflow::domination::{
    check_property_e, check_property_t, oseledets_splitting, ratios, recurrence_marks,
    scan_with_splitting, Splitting, Verdict, RATIO_THRESHOLD,
};
use lpflow::model::FlowModel;
use lpflow::poincare::{orbit_cocycle, PoincareCocycle};
use lpflow::stats::stream_rng;
use lpflow::synthetic::angle_decay;

fn model_cocycle(id: &str, units: usize) -> (FlowModel, PoincareCocycle) {
    let model = FlowModel::builtin(id).unwrap();
    let p = model.sample_point(&mut stream_rng(23, 0));
    let (_, coc) = orbit_cocycle(&model, &p, 0.01, units).unwrap();
    (model, coc)
}

fn diagonal_cocycle(rates: &[(f64, f64)]) -> (PoincareCocycle, Splitting) {
    let blocks = rates
        .iter()
        .map(|&(a, b)| DMatrix::from_diagonal(&DVector::from_vec(vec![a.exp(), b.exp()])))
        .collect();
    let coc = PoincareCocycle::from_blocks(blocks, None).unwrap();
    let u0 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let s0 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let split = Splitting::from_bases(&coc, 0, &u0, &s0, rates.len()).unwrap();
    (coc, split)
}

proptest! {
    #[test]
    fn verdict_matches_threshold(
        rates in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 12..30),
        m in 1usize..8,
    ) {
        let (coc, split) = diagonal_cocycle(&rates);
        let report = scan_with_splitting(&coc, &split, &[m], "synthetic").unwrap();
        let all_small = ratios(&coc, &split, m).unwrap().iter().all(|r| r.1 <= RATIO_THRESHOLD);
        prop_assert_eq!(report.entries[0].verdict == Verdict::Dominated, all_small);
    }
}

#[test]
fn splittings_from_different_windows_agree() {
    for id in ["cat_suspension", "product_hyperbolic"] {
        let (_, coc) = model_cocycle(id, 500);
        let a = oseledets_splitting(&coc, 1, 100, 200, 60, 60).unwrap();
        let b = oseledets_splitting(&coc, 1, 200, 200, 100, 40).unwrap();
        assert!(a.distance(&b) <= 1e-3, "{id}: {}", a.distance(&b));
    }
}

#[test]
fn triangular_blocks_split_at_every_dominated_index() {
    // The product_hyperbolic blocks are upper triangular in the section
    // frame with the neutral direction last.
    let (model, coc) = model_cocycle("product_hyperbolic", 200);
    for &k in &model.truth.dominated_indices {
        let split = oseledets_splitting(&coc, k, 40, 120, 40, 40).unwrap();
        let report = scan_with_splitting(&coc, &split, &[1, 2, 5], "ph").unwrap();
        assert!(report.entries.iter().all(|e| e.verdict == Verdict::Dominated), "k={k}: {report:?}");
    }
}

#[test]
fn ratio_does_not_grow_with_m() {
    for id in ["cat_suspension", "product_hyperbolic"] {
        let (_, coc) = model_cocycle(id, 200);
        let split = oseledets_splitting(&coc, 1, 40, 120, 40, 40).unwrap();
        let report = scan_with_splitting(&coc, &split, &(1..=10).collect::<Vec<_>>(), id).unwrap();
        for w in report.entries.windows(2) {
            assert!(w[1].ratio_max <= w[0].ratio_max * (1.0 + 1e-3), "{id}: {w:?}");
        }
    }
}

#[test]
fn angle_floor_detects_decay() {
    let (coc, split) = angle_decay(60);
    let report = scan_with_splitting(&coc, &split, &[1, 2], "decay").unwrap();
    assert!(report.any_dominated());
    let t = check_property_t(&report, 0.05).unwrap();
    assert!(!t.holds && t.min_angle < 0.05);

    let (_, cat) = model_cocycle("cat_suspension", 160);
    let split = oseledets_splitting(&cat, 1, 40, 80, 40, 40).unwrap();
    let report = scan_with_splitting(&cat, &split, &[1, 2], "cat").unwrap();
    assert!(check_property_t(&report, 0.05).unwrap().holds);
}

#[test]
fn domination_holds_at_recurrences() {
    let (model, coc) = model_cocycle("cat_suspension", 400);
    let split = oseledets_splitting(&coc, 1, 40, 300, 40, 40).unwrap();
    // Restrict to marks the splitting covers.
    let marks: Vec<usize> = recurrence_marks(&model, &coc, 0.3)
        .into_iter()
        .filter(|t| (40..=330).contains(t))
        .collect();
    assert!(!marks.is_empty());
    let checks = check_property_e(&coc, &split, 3, &marks).unwrap();
    assert!(!checks.is_empty() && checks.iter().all(|c| c.2));
}
