mod common;

use colorvar::metrics::{ari, cgacc, cscore, evaluate, fms};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_ari, brute_fms, pair_table, random_partition};

#[test]
fn ari_and_fms_match_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let n = rng.random_range(2..=15);
        let truth = random_partition(&mut rng, n);
        let pred = random_partition(&mut rng, n);
        let (a, f) = (ari(&truth, &pred).unwrap(), fms(&truth, &pred).unwrap());
        assert!((a - brute_ari(&truth, &pred)).abs() < 1e-12, "{truth:?} {pred:?}");
        assert!((f - brute_fms(&truth, &pred)).abs() < 1e-12, "{truth:?} {pred:?}");
    }
}

#[test]
fn four_point_example_against_enumeration() {
    let truth = [1, 1, 2, 2];
    let all_in_one = [0, 0, 0, 0];
    assert!((ari(&truth, &all_in_one).unwrap() - brute_ari(&truth, &all_in_one)).abs() < 1e-12);
    assert!((fms(&truth, &all_in_one).unwrap() - (2.0 / 12f64.sqrt())).abs() < 1e-12);
}

#[test]
fn cscore_reproduces_reported_arithmetic() {
    assert!((cscore(0.69, 0.71) - 0.700).abs() <= 0.001);
    assert!((cscore(0.75, 0.76) - 0.756).abs() <= 0.002);
    assert_eq!(cscore(1.0, 1.0), 1.0);
    assert_eq!(cscore(0.0, 0.0), 0.0);
}

#[test]
fn cgacc_counts_pure_multi_clusters() {
    // four clusters of size >= 2, three of them pure, plus a singleton
    let truth = [0, 0, 1, 1, 2, 2, 3, 4, 5];
    let pred = [0, 0, 1, 1, 2, 2, 3, 3, 4];
    let c = cgacc(&truth, &pred).unwrap();
    assert!((c.value - 0.75).abs() < 1e-15);
    let none = cgacc(&[0, 0, 1], &[0, 1, 2]).unwrap();
    assert_eq!(none.value, 0.0);
    assert!(none.no_groups_detected);
}

#[test]
fn noise_counts_as_singletons() {
    let groups: Vec<Option<String>> = ["a", "a", "b", "b"].iter().map(|s| Some(s.to_string())).collect();
    let with_noise = evaluate(&groups, &[0, 0, -1, -1]).unwrap();
    let as_singletons = evaluate(&groups, &[0, 0, 1, 2]).unwrap();
    assert_eq!(with_noise, as_singletons);
}

fn partition_pair(max_n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2..=max_n).prop_flat_map(|n| (prop::collection::vec(0usize..5, n), prop::collection::vec(0usize..5, n)))
}

proptest! {
    #[test]
    fn metrics_are_relabeling_invariant((truth, pred) in partition_pair(15), shift in 1usize..7) {
        let relabel = |v: &[usize]| v.iter().map(|x| (x * 7 + shift) % 37).collect::<Vec<_>>();
        prop_assert_eq!(ari(&truth, &pred).unwrap(), ari(&relabel(&truth), &relabel(&pred)).unwrap());
        prop_assert_eq!(fms(&truth, &pred).unwrap(), fms(&relabel(&truth), &relabel(&pred)).unwrap());
        prop_assert_eq!(cgacc(&truth, &pred).unwrap(), cgacc(&relabel(&truth), &relabel(&pred)).unwrap());
    }

    #[test]
    fn identical_partitions_score_one((p, _) in partition_pair(15)) {
        let distinct = p.iter().collect::<std::collections::HashSet<_>>().len();
        prop_assume!(distinct >= 2);
        prop_assert!((ari(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        // all-singleton partitions have no same-cluster pair, so FMS is 0/0 := 0
        if distinct < p.len() {
            prop_assert!((fms(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fms_is_geometric_mean_of_pair_precision_and_recall((truth, pred) in partition_pair(15)) {
        let (tp, fp, fn_, _) = pair_table(&truth, &pred);
        prop_assume!(tp > 0.0);
        let expected = ((tp / (tp + fp)) * (tp / (tp + fn_))).sqrt();
        prop_assert!((fms(&truth, &pred).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn harmonic_mean_ordering(a in 1e-6f64..1.0, f in 1e-6f64..1.0) {
        let h = cscore(a, f);
        prop_assert!(a.min(f) <= h + 1e-15);
        prop_assert!(h <= (a * f).sqrt() + 1e-15);
        prop_assert!((a * f).sqrt() <= (a + f) / 2.0 + 1e-15);
    }
}
