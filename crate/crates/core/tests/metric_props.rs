mod common;

use common::{brute_eer, brute_min_dcf};
use nvl_core::eval::{eer, min_dcf, ScoreSet};
use proptest::prelude::*;

/// Scores on a coarse grid so ties are common.
fn scores(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let one = (-400i32..400).prop_map(|k| k as f64 / 80.0);
    (
        prop::collection::vec(one.clone(), 1..max),
        prop::collection::vec(one, 1..max),
    )
}

fn prior() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.01), Just(0.05), Just(0.5), 0.001f64..0.999]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn agrees_with_threshold_sweep((t, n) in scores(500), p in prior()) {
        let s = ScoreSet::new(t.clone(), n.clone()).unwrap();
        prop_assert!((eer(&s) - brute_eer(&t, &n)).abs() < 1e-12);
        prop_assert!((min_dcf(&s, p).unwrap() - brute_min_dcf(&t, &n, p)).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_strictly_increasing_maps((t, n) in scores(300), p in prior()) {
        let f = |v: &f64| (v / 3.0).exp() * 7.0 - 2.0;
        let a = ScoreSet::new(t.clone(), n.clone()).unwrap();
        let b = ScoreSet::new(t.iter().map(f).collect(), n.iter().map(f).collect()).unwrap();
        prop_assert_eq!(eer(&a), eer(&b));
        prop_assert_eq!(min_dcf(&a, p).unwrap(), min_dcf(&b, p).unwrap());
    }

    #[test]
    fn swapping_labels_and_negating_keeps_eer((t, n) in scores(300)) {
        let a = ScoreSet::new(t.clone(), n.clone()).unwrap();
        let b = ScoreSet::new(n.iter().map(|v| -v).collect(), t.iter().map(|v| -v).collect()).unwrap();
        prop_assert!((eer(&a) - eer(&b)).abs() < 1e-12);
    }

    #[test]
    fn ranges((t, n) in scores(300), p in prior()) {
        let s = ScoreSet::new(t, n).unwrap();
        let e = eer(&s);
        let d = min_dcf(&s, p).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!((0.0..=1.0).contains(&d), "{d}");
    }
}

#[test]
fn separable_and_inverted_scores() {
    let s = ScoreSet::new(vec![2.0, 3.0], vec![0.0, 1.0]).unwrap();
    assert_eq!(eer(&s), 0.0);
    assert_eq!(min_dcf(&s, 0.05).unwrap(), 0.0);
    let s = ScoreSet::new(vec![0.0, 1.0], vec![2.0, 3.0]).unwrap();
    assert_eq!(eer(&s), 1.0);
    assert_eq!(min_dcf(&s, 0.05).unwrap(), 1.0);
}

#[test]
fn hand_computed_crossing() {
    // Sorted: n0 t0.5 n1 t2. Accept-all (0,1); after 0: (0,.5); after .5: (.5,.5).
    let s = ScoreSet::new(vec![0.5, 2.0], vec![0.0, 1.0]).unwrap();
    assert_eq!(eer(&s), 0.5);
    // P_fa = 0.5 costs 0.95·0.5/0.05; the best point is reject-all above 1: (0.5, 0).
    assert!((min_dcf(&s, 0.05).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn invalid_inputs() {
    assert!(ScoreSet::new(vec![], vec![1.0]).is_err());
    assert!(ScoreSet::new(vec![f64::NAN], vec![1.0]).is_err());
    let s = ScoreSet::new(vec![1.0], vec![0.0]).unwrap();
    assert!(min_dcf(&s, 0.0).is_err());
    assert!(min_dcf(&s, 1.0).is_err());
}
