use proptest::prelude::*;
use wcl_core::combinatorics::*;

#[test]
fn pairing_counts_and_self_validation() {
    for n in 0..=5 {
        let ps = enumerate_pairings(n).unwrap();
        assert_eq!(ps.len() as u64, double_factorial_odd(n));
        for p in &ps {
            assert!(p.is_canonical());
            let mut seen = vec![false; 2 * n];
            for (a, b) in p.pairs() {
                assert!(a < b);
                seen[a] = true;
                seen[b] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }
}

#[test]
fn partial_pairings_follow_involution_recurrence() {
    let counts: Vec<u64> = (0..=8).map(|n| enumerate_partial_pairings(n).unwrap().len() as u64).collect();
    assert_eq!(&counts[..6], &[1, 1, 2, 4, 10, 26]);
    for n in 2..=8 {
        assert_eq!(counts[n], counts[n - 1] + (n as u64 - 1) * counts[n - 2]);
    }
    for pp in enumerate_partial_pairings(6).unwrap() {
        assert!(pp.is_canonical());
        let signs = pp.compatible_signs();
        for (a, b) in pp.pairs() {
            assert!(a < b);
            assert!(signs[a].is_some() && signs[b].is_some() && signs[a] != signs[b]);
        }
        for u in pp.unpaired() {
            assert!(signs[u].is_none());
        }
    }
}

proptest! {
    #[test]
    fn simplex_weights_sum_to_volume(n in 1usize..=4, a in -3.0..3.0f64, len in 0.01..4.0f64, extra in 0usize..5) {
        // The collapsed product rule integrates constants exactly once 2p - 1 >= n - 1.
        let p = n.div_ceil(2) + extra;
        let b = a + len;
        let rule = simplex_quadrature(n, a, b, p).unwrap();
        let volume = len.powi(n as i32) / (1..=n).map(|k| k as f64).product::<f64>();
        let sum: f64 = rule.weights.iter().sum();
        prop_assert!((sum - volume).abs() <= 1e-12 * volume.max(1.0));
        for x in &rule.nodes {
            prop_assert!(x.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(x[0] >= a && x[n - 1] <= b);
        }
    }
}
