mod common;

use chainstack::metrics::*;
use common::oracles::{brute_force_gap, random_instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gap_matches_brute_force_on_200_instances() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, labels, k) = random_instance(&mut rng);
        let fast = global_average_precision(&pred, &labels, k).unwrap();
        let slow = brute_force_gap(&pred, &labels, k);
        assert!((fast - slow).abs() < 1e-9, "seed {seed}: {fast} vs {slow}");
    }
}

#[test]
fn worked_two_video_example() {
    // (v1,l1,0.9 ✓), (v2,l2,0.8 ✗), (v1,l2,0.7 ✓) with top_k = 1 for v2
    let pred = PredictionMatrix::new(2, 3, vec![0.0, 0.9, 0.7, 0.0, 0.0, 0.8]).unwrap();
    let labels = vec![vec![1, 2], vec![]];
    let gap = global_average_precision(&pred, &labels, 2).unwrap();
    let oracle = brute_force_gap(&pred, &labels, 2);
    assert!((gap - 5.0 / 6.0).abs() < 1e-12 && (oracle - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn unbounded_top_k_single_video_all_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let l = rng.random_range(1..15);
        let values: Vec<f64> = (0..l).map(|_| rng.random()).collect();
        let pred = PredictionMatrix::new(1, l, values).unwrap();
        let gap = global_average_precision(&pred, &[(0..l).collect()], usize::MAX).unwrap();
        assert!((gap - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn gap_invariant_under_monotone_transforms(seed in 0u64..10_000, c in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, labels, k) = random_instance(&mut rng);
        let base = global_average_precision(&pred, &labels, k).unwrap();
        let scaled = PredictionMatrix::new(pred.rows(), pred.num_labels(), pred.values().iter().map(|v| v * c).collect()).unwrap();
        let squared = PredictionMatrix::new(pred.rows(), pred.num_labels(), pred.values().iter().map(|v| v * v).collect()).unwrap();
        prop_assert!((global_average_precision(&scaled, &labels, k).unwrap() - base).abs() < 1e-12);
        prop_assert!((global_average_precision(&squared, &labels, k).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn perr_in_unit_interval(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, labels, _) = random_instance(&mut rng);
        let errs = perr_errors(&pred, &labels).unwrap();
        for (i, e) in errs.iter().enumerate() {
            match e {
                Some(e) => prop_assert!((0.0..=1.0).contains(e)),
                None => prop_assert!(labels[i].is_empty()),
            }
        }
    }
}

#[test]
fn perr_enumeration_oracle() {
    // g = 2, top-2 of the row is {0, 2}; exactly one in the label set
    let row = [0.7, 0.1, 0.6, 0.3];
    assert_eq!(perr(&row, &[0, 3]).unwrap(), 0.5);
    assert_eq!(perr(&row, &[2, 0]).unwrap(), 1.0);
    assert_eq!(perr(&row, &[1, 3]).unwrap(), 0.0);
}

#[test]
fn report_skips_unlabeled_examples_for_perr() {
    let pred = PredictionMatrix::new(3, 2, vec![0.9, 0.1, 0.2, 0.8, 0.5, 0.5]).unwrap();
    let r = evaluate(&pred, &[vec![0], vec![0], vec![]], 20).unwrap();
    assert_eq!(r.perr, 0.5);
    assert_eq!(r.hit_at_one, 0.5);
    assert_eq!((r.n_examples, r.n_positives), (3, 2));
    assert!(r.to_kv().contains("n_positives=2\n"));
}
