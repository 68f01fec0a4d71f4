mod common;

use std::collections::HashMap;

use common::labels::*;
use icsc_core::metrics::*;
use icsc_core::{rng_from_seed, Error};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_labels<R: Rng>(n: usize, k: u32, rng: &mut R) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

#[test]
fn scores_match_reference_on_random_pairs() {
    let mut rng = rng_from_seed(11);
    for case in 0..100 {
        let n = 100;
        let truth = random_labels(n, rng.random_range(1..=4), &mut rng);
        let pred = random_labels(n, rng.random_range(1..=5), &mut rng);
        let c = clustering_scores(&truth, &pred).unwrap();
        let (purity, nmi, f) = oracle_clustering(&truth, &pred);
        assert!((c.purity - purity).abs() < 1e-10, "case {case}");
        assert!((c.nmi - nmi).abs() < 1e-10, "case {case}");
        assert!((c.f_measure - f).abs() < 1e-10, "case {case}");

        let s = segmentation_scores(&truth, &pred).unwrap();
        let vi = entropy(&truth) + entropy(&pred) - 2.0 * mutual_info(&truth, &pred);
        assert!((s.vi - vi.max(0.0)).abs() < 1e-10, "case {case}");
        assert!((s.hamming - oracle_hamming(&truth, &pred)).abs() < 1e-10, "case {case}");
        assert!((s.gce - oracle_gce(&truth, &pred)).abs() < 1e-10, "case {case}");
    }
}

#[test]
fn identical_labelings() {
    let t = [4, 4, 1, 1, 1, 9];
    let c = clustering_scores(&t, &t).unwrap();
    assert_eq!((c.purity, c.nmi, c.f_measure), (1.0, 1.0, 1.0));
    let s = segmentation_scores(&t, &t).unwrap();
    assert_eq!((s.hamming, s.gce, s.vi), (0.0, 0.0, 0.0));
}

#[test]
fn one_cluster_over_two_equal_classes() {
    let c = clustering_scores(&[1, 1, 1, 2, 2, 2], &[0; 6]).unwrap();
    assert_eq!(c.purity, 0.5);
}

#[test]
fn renaming_absorbed_by_matching() {
    let truth = [0, 0, 1, 1, 1, 2, 2, 0];
    let pred: Vec<char> = truth.iter().map(|t| ['x', 'q', 'b'][*t]).collect();
    let s = segmentation_scores(&truth, &pred).unwrap();
    assert_eq!(s.hamming, 0.0);
}

#[test]
fn length_mismatch() {
    assert!(matches!(clustering_scores(&[1, 2], &[1]), Err(Error::LengthMismatch(2, 1))));
    assert!(matches!(segmentation_scores(&[1], &[1, 2]), Err(Error::LengthMismatch(1, 2))));
}

proptest! {
    #[test]
    fn refinements_have_zero_gce(truth in prop::collection::vec(0u32..4, 1..80), bits in prop::collection::vec(0u32..3, 80)) {
        // each predicted label lives inside one true label
        let pred: Vec<u32> = truth.iter().zip(&bits).map(|(t, b)| t * 3 + b).collect();
        prop_assert_eq!(segmentation_scores(&truth, &pred).unwrap().gce, 0.0);
        prop_assert_eq!(segmentation_scores(&pred, &truth).unwrap().gce, 0.0);
    }

    #[test]
    fn scores_are_bounded(a in prop::collection::vec(0u32..5, 1..60), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let b = random_labels(a.len(), 6, &mut rng);
        let c = clustering_scores(&a, &b).unwrap();
        for v in [c.purity, c.nmi, c.f_measure] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let s = segmentation_scores(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.hamming));
        prop_assert!((0.0..=1.0).contains(&s.gce));
        prop_assert!(s.vi >= 0.0);
    }

    #[test]
    fn vi_and_gce_are_symmetric(a in prop::collection::vec(0u32..4, 1..60), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let b = random_labels(a.len(), 4, &mut rng);
        let ab = segmentation_scores(&a, &b).unwrap();
        let ba = segmentation_scores(&b, &a).unwrap();
        prop_assert!((ab.vi - ba.vi).abs() < 1e-12);
        prop_assert!((ab.gce - ba.gce).abs() < 1e-12);
    }

    #[test]
    fn nmi_is_one_exactly_for_relabelings(a in prop::collection::vec(0u32..5, 2..60), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let labels = distinct(&a);
        let mut names: Vec<u32> = (100..100 + labels.len() as u32).collect();
        names.shuffle(&mut rng);
        let map: HashMap<u32, u32> = labels.iter().copied().zip(names).collect();
        let relabeled: Vec<u32> = a.iter().map(|x| map[x]).collect();
        prop_assert!((clustering_scores(&a, &relabeled).unwrap().nmi - 1.0).abs() < 1e-12);

        // move one point to another (possibly new) label
        let mut moved = a.clone();
        let i = rng.random_range(0..a.len());
        moved[i] = if rng.random_bool(0.5) { a[rng.random_range(0..a.len())] } else { 99 };
        let same = (0..a.len()).all(|x| (0..a.len()).all(|y| (a[x] == a[y]) == (moved[x] == moved[y])));
        let nmi = clustering_scores(&a, &moved).unwrap().nmi;
        prop_assert_eq!(same, (nmi - 1.0).abs() < 1e-9, "nmi {}", nmi);
    }
}
