mod common;

use common::{accuracy, naive_ranks, random_pair};
use proptest::prelude::*;
use tilerobust_core::metrics::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ranks_match_naive_enumeration(seed in any::<u64>(), n in 8usize..=64, d in 2usize..=16) {
        let (a, b) = random_pair(seed, n, d);
        let oracle = naive_ranks(&a, &b);
        let fast = pair_ranks(&a, &b).unwrap();
        let profiled = pair_ranks_profiled(
            &WithinSlideProfile::build(&a).unwrap(),
            &WithinSlideProfile::build(&b).unwrap(),
        ).unwrap();
        for i in 0..n {
            prop_assert_eq!(fast.a_to_b[i] as usize, oracle.a_to_b[i]);
            prop_assert_eq!(fast.b_to_a[i] as usize, oracle.b_to_a[i]);
            prop_assert_eq!(profiled.a_to_b[i] as usize, oracle.a_to_b[i]);
            prop_assert_eq!(profiled.b_to_a[i] as usize, oracle.b_to_a[i]);
            prop_assert_eq!(fast.matched[i], oracle.matched[i]);
        }
        let i = (seed % n as u64) as usize;
        prop_assert_eq!(matched_rank(i, &a, &b).unwrap(), oracle.a_to_b[i]);
        prop_assert_eq!(matched_rank(i, &b, &a).unwrap(), oracle.b_to_a[i]);
        let m = top_k_accuracy(&a, &b, &[1, 5, 10]).unwrap();
        for k in [1, 5, 10] {
            let ab = accuracy(&oracle.a_to_b, k);
            let ba = accuracy(&oracle.b_to_a, k);
            prop_assert_eq!(m.directed_a_to_b[&k], ab);
            prop_assert_eq!(m.directed_b_to_a[&k], ba);
            prop_assert_eq!(m.topk_accuracy[&k], (ab + ba) / 2.0);
            prop_assert_eq!(top_k_accuracy_directed(&a, &b, k).unwrap(), ab);
        }
    }

    #[test]
    fn swapping_slides_swaps_directions(seed in any::<u64>(), n in 8usize..=32, d in 2usize..=8) {
        let (a, b) = random_pair(seed, n, d);
        let ab = top_k_accuracy(&a, &b, &[1, 3]).unwrap();
        let ba = top_k_accuracy(&b, &a, &[1, 3]).unwrap();
        prop_assert_eq!(&ab.directed_a_to_b, &ba.directed_b_to_a);
        prop_assert_eq!(&ab.topk_accuracy, &ba.topk_accuracy);
        prop_assert!((ab.mean_cosine - ba.mean_cosine).abs() < 1e-12);
    }

    #[test]
    fn accuracy_is_monotone_in_k(seed in any::<u64>(), n in 8usize..=32, d in 2usize..=8) {
        let (a, b) = random_pair(seed, n, d);
        let ks: Vec<usize> = (1..=2 * n).collect();
        let m = top_k_accuracy(&a, &b, &ks).unwrap();
        for w in ks.windows(2) {
            prop_assert!(m.topk_accuracy[&w[0]] <= m.topk_accuracy[&w[1]]);
        }
        prop_assert_eq!(m.topk_accuracy[&(2 * n - 1)], 1.0);
    }
}

#[test]
fn identical_slides_score_one() {
    let (a, _) = random_pair(5, 40, 12);
    let m = top_k_accuracy(&a, &a.clone(), &[1, 10]).unwrap();
    assert!((m.mean_cosine - 1.0).abs() < 1e-12);
    let oracle = naive_ranks(&a, &a);
    assert_eq!(m.topk_accuracy[&10], accuracy(&oracle.a_to_b, 10));
}
