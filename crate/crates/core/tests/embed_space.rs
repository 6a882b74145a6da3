mod common;

use clp_transfer::embed_space::all_knn;
use clp_transfer::{knn, knn_audit, knn_overlap_score, Execution};
use common::*;
use proptest::prelude::*;

#[test]
fn knn_matches_exhaustive_sort() {
    let mut r = rng(64);
    let rows = random_rows(&mut r, 64, 8);
    let m = matrix(&rows);
    // frozen from the brute-force oracle
    assert_eq!(
        knn(&m, 0, 10, true).unwrap().neighbor_ids,
        [15, 19, 38, 50, 26, 45, 53, 37, 18, 48]
    );
    assert_eq!(
        knn(&m, 63, 10, true).unwrap().neighbor_ids,
        [40, 59, 31, 20, 7, 58, 13, 60, 29, 14]
    );
    let all = all_knn(&m, 10, true, Execution::Parallel).unwrap();
    for (q, got) in all.iter().enumerate() {
        assert_eq!(*got, brute_knn(&rows, q, 10), "query {q}");
    }
}

#[test]
fn overlap_score_matches_brute_force() {
    let mut r = rng(32);
    let a = random_rows(&mut r, 32, 4);
    let b = random_rows(&mut r, 32, 4);
    let oracle = brute_overlap_score(&a, &b, 10);
    assert_eq!(oracle, 0.33125);
    assert_eq!(knn_overlap_score(&matrix(&a), &matrix(&b), 10).unwrap(), oracle);
}

#[test]
fn audit_histogram_is_consistent() {
    let mut r = rng(5);
    let a = matrix(&random_rows(&mut r, 40, 6));
    let b = matrix(&random_rows(&mut r, 40, 3));
    let audit = knn_audit(&a, &b, 5, Execution::Sequential).unwrap();
    assert_eq!(audit.histogram.iter().sum::<usize>(), 40);
    let total: usize = audit.histogram.iter().enumerate().map(|(c, n)| c * n).sum();
    assert_eq!(audit.score, total as f64 / 200.0);
    assert_eq!(audit, knn_audit(&a, &b, 5, Execution::Parallel).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn score_invariants(seed in any::<u64>(), rows in 12usize..40, ha in 1usize..6, hb in 1usize..6, k in 1usize..10) {
        let mut r = rng(seed);
        let a = matrix(&random_rows(&mut r, rows, ha));
        let b = matrix(&random_rows(&mut r, rows, hb));
        let ab = knn_overlap_score(&a, &b, k).unwrap();
        let ba = knn_overlap_score(&b, &a, k).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(knn_overlap_score(&a, &a, k).unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&ab));
        let scaled = ab * (rows * k) as f64;
        prop_assert!((scaled - scaled.round()).abs() < 1e-9);
    }

    #[test]
    fn positive_row_scaling_keeps_neighbors(seed in any::<u64>(), row in 0usize..20, exp in -8i32..8) {
        let mut r = rng(seed);
        let base = matrix(&random_rows(&mut r, 20, 4));
        let mut scaled = base.clone();
        // powers of two keep the scaling exact in f32
        let factor = 2f32.powi(exp);
        scaled.map_row(row, |v| v * factor);
        let a = all_knn(&base, 5, true, Execution::Sequential).unwrap();
        let b = all_knn(&scaled, 5, true, Execution::Sequential).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(knn_overlap_score(&base, &scaled, 5).unwrap(), 1.0);
    }
}
