//! Threshold selection against a full-sort oracle, plus invariances.

use dsd_core::pruning::{apply_mask, pruned_count, threshold};
use dsd_core::tensor::Tensor;
use proptest::prelude::*;

/// Keeps the first `N - floor(N s)` indices of a stable sort by descending
/// magnitude, so ties go to the lower index.
fn oracle(w: &[f64], sparsity: f64) -> Vec<bool> {
    let keep = w.len() - (w.len() as f64 * sparsity).floor() as usize;
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].abs().partial_cmp(&w[a].abs()).unwrap());
    let mut bits = vec![false; w.len()];
    for &i in &idx[..keep] {
        bits[i] = true;
    }
    bits
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(-10.0f64..10.0, 1..300),
        // Few distinct magnitudes and signs: heavy ties.
        prop::collection::vec((-3i32..=3).prop_map(|v| v as f64 * 0.5), 1..300),
    ]
}

fn sparsity() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![0.0, 0.1, 0.25, 0.3, 0.5, 0.8, 0.99])
}

proptest! {
    #[test]
    fn matches_sort_oracle(w in weights(), s in sparsity()) {
        let t = Tensor::vector(&w);
        let (lambda, mask) = threshold(&t, s, "l").unwrap();
        let expected = oracle(&w, s);
        prop_assert_eq!(mask.bits(), expected.as_slice());
        prop_assert_eq!(mask.pruned_count(), pruned_count(w.len(), s));
        let kept_min = w.iter().zip(mask.bits()).filter(|(_, &k)| k).map(|(v, _)| v.abs()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(lambda, kept_min);
        let pruned_max = w.iter().zip(mask.bits()).filter(|(_, &k)| !k).map(|(v, _)| v.abs()).fold(0.0, f64::max);
        prop_assert!(pruned_max <= lambda);
    }

    #[test]
    fn positive_scaling_preserves_mask(w in weights(), s in sparsity(), c in 0.01f64..100.0) {
        let (_, a) = threshold(&Tensor::vector(&w), s, "l").unwrap();
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let (_, b) = threshold(&Tensor::vector(&scaled), s, "l").unwrap();
        // Scaling can merge nearly-equal magnitudes; compare only when it did not.
        let distinct = |xs: &[f64]| {
            let mut m: Vec<f64> = xs.iter().map(|v| v.abs()).collect();
            m.sort_by(f64::total_cmp);
            m.windows(2).filter(|p| p[0] == p[1]).count()
        };
        prop_assume!(distinct(&w) == distinct(&scaled));
        prop_assert_eq!(a.bits(), b.bits());
    }

    #[test]
    fn permutation_permutes_mask(w in prop::collection::vec(-10.0f64..10.0, 1..200), s in sparsity(), rot in 0usize..200) {
        // Distinct magnitudes make the kept set independent of index order.
        let mut seen = std::collections::HashSet::new();
        prop_assume!(w.iter().all(|v| seen.insert(v.abs().to_bits())));
        let r = rot % w.len();
        let mut rotated = w.clone();
        rotated.rotate_left(r);
        let (_, a) = threshold(&Tensor::vector(&w), s, "l").unwrap();
        let (_, b) = threshold(&Tensor::vector(&rotated), s, "l").unwrap();
        let mut expected = a.bits().to_vec();
        expected.rotate_left(r);
        prop_assert_eq!(b.bits(), expected.as_slice());
    }

    #[test]
    fn masking_is_idempotent(w in weights(), s in sparsity()) {
        let t = Tensor::vector(&w);
        let (_, mask) = threshold(&t, s, "l").unwrap();
        let once = apply_mask(&t, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        prop_assert_eq!(once.data(), twice.data());
        for (v, &k) in once.data().iter().zip(mask.bits()) {
            if !k {
                prop_assert_eq!(v.to_bits(), 0.0f64.to_bits());
            }
        }
    }
}

#[test]
fn rejects_bad_sparsity() {
    let t = Tensor::vector(&[1.0, 2.0]);
    assert!(threshold(&t, 1.0, "l").is_err());
    assert!(threshold(&t, -0.1, "l").is_err());
    assert!(threshold(&t, f64::NAN, "l").is_err());
}
