use nalgebra::DMatrix;
use pnlss_core::poly::{BranchPolynomial, DecoupledMap};
use pnlss_core::reduction::{self, function_error, RemoveOptions, UnifyOptions};
use proptest::prelude::*;

fn map_from(w: &[f64], v: &[f64], c: &[f64]) -> DecoupledMap {
    let r = c.len() / 2;
    let branches = c.chunks(2).map(|k| BranchPolynomial::new(2, k.to_vec())).collect();
    DecoupledMap::new(DMatrix::from_row_slice(2, r, w), DMatrix::from_row_slice(2, r, v), branches, false).unwrap()
}

fn nonzero() -> impl Strategy<Value = f64> {
    (0.2f64..1.0, any::<bool>()).prop_map(|(x, neg)| if neg { -x } else { x })
}

fn points(seed: u64) -> DMatrix<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    DMatrix::from_fn(150, 2, |_, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn compensated_removal_beats_plain_deletion(
        w in prop::collection::vec(-1.0f64..1.0, 6),
        v in prop::collection::vec(-1.0f64..1.0, 6),
        c in prop::collection::vec(-1.0f64..1.0, 6),
        seed in 0u64..1000,
    ) {
        let d = map_from(&w, &v, &c);
        let p = points(seed);
        let res = reduction::remove_branch(&d, &p, &RemoveOptions::default()).unwrap();
        prop_assert_eq!(res.map.r(), 2);
        prop_assert!(res.report.aggregate_ef <= res.deletion_report.aggregate_ef + 1e-12);
    }

    #[test]
    fn quadratic_cubic_branches_unify_exactly(
        w in prop::collection::vec(nonzero(), 6),
        v in prop::collection::vec(nonzero(), 6),
        c in prop::collection::vec(0.2f64..1.0, 6),
        seed in 0u64..1000,
    ) {
        // z -> a z rescales the cubic/quadratic ratio by a, so every branch fits one shape
        let d = map_from(&w, &v, &c);
        let p = points(seed);
        let res = reduction::unify_branches(&d, &p, &UnifyOptions { max_iter: 5000, ..Default::default() }).unwrap();
        let q = reduction::decoupled_outputs(&d, &p);
        let e = function_error(&q, &reduction::decoupled_outputs(&res.map, &p)).unwrap();
        prop_assert!(res.map.unified);
        prop_assert!(e.aggregate_ef < 1e-6, "{}", e.aggregate_ef);
    }
}
