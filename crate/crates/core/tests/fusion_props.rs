use std::collections::BTreeMap;

use proptest::prelude::*;
use vcolbert::fusion::{rank, rrf_fuse, sum_fuse, RankedList};

fn score_map() -> impl Strategy<Value = BTreeMap<String, f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..30)
        .prop_map(|v| v.into_iter().enumerate().map(|(i, s)| (format!("v{i:03}"), s)).collect())
}

fn ids(l: &RankedList) -> Vec<String> {
    l.ids().map(str::to_string).collect()
}

proptest! {
    #[test]
    fn rank_is_invariant_under_positive_affine_maps(
        m in score_map(), scale in 0.1f64..10.0, shift in -5.0f64..5.0,
    ) {
        // Quantize so that the affine image cannot merge or split ties.
        let m: BTreeMap<String, f64> = m.into_iter().map(|(k, v)| (k, (v * 4.0).round() / 4.0)).collect();
        let moved: BTreeMap<String, f64> = m.iter().map(|(k, v)| (k.clone(), v * scale + shift)).collect();
        let a = rank(m).unwrap();
        let b = rank(moved).unwrap();
        let scores: Vec<f64> = a.entries().iter().map(|e| e.1).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn rrf_depends_only_on_positions(m1 in score_map(), seed in any::<u64>()) {
        let r1 = rank(m1.clone()).unwrap();
        // Same order, different scores.
        let n = r1.len();
        let rescored = rank(r1.ids().enumerate().map(|(i, id)| (id.to_string(), (n - i) as f64 * 1e3 + (seed % 7) as f64))).unwrap();
        prop_assert_eq!(ids(&r1), ids(&rescored));
        let reversed = rank(m1.iter().map(|(k, v)| (k.clone(), -v))).unwrap();
        let a = rrf_fuse(&[r1, reversed.clone()], 60.0).unwrap();
        let b = rrf_fuse(&[rescored, reversed], 60.0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sum_fuse_equals_ranking_the_sum(f in score_map(), shift in 0.0f64..1.0) {
        let v: BTreeMap<String, f64> = f.iter().map(|(k, x)| (k.clone(), (x * 1.7 + shift).sin())).collect();
        let total: BTreeMap<String, f64> = f.iter().map(|(k, x)| (k.clone(), x + v[k])).collect();
        prop_assert_eq!(sum_fuse(&[f, v]).unwrap(), rank(total).unwrap());
    }
}
