//! Linear-chain CRF against exhaustive enumeration.

mod common;

use common::{crf_instance, random_emissions, random_scores};
use hme_core::crf::CrfScores;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn partition_and_viterbi_match_enumeration() {
    for n in 1..=6 {
        for t in 1..=5 {
            for seed in 0..20 {
                crf_instance(seed, n, t).unwrap();
            }
        }
    }
}

#[test]
fn all_zero_scores_decode_to_tag_zero() {
    let s = CrfScores::zeros(4);
    let (path, score) = s.viterbi(&[0.0; 20]);
    assert_eq!(path, vec![0; 5]);
    assert_eq!(score, 0.0);
}

#[test]
fn marginals_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_scores(&mut rng, 4, false, true);
    let em = random_emissions(&mut rng, 5, 4, false);
    let m = s.marginals(&em);
    for row in m.unary.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!((m.pairwise.iter().sum::<f64>() - 4.0).abs() < 1e-10);
}

proptest! {
    #[test]
    fn nll_is_nonnegative(seed in 0u64..10_000, n in 1usize..6, t in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_scores(&mut rng, t, false, false);
        let em = random_emissions(&mut rng, n, t, false);
        let path: Vec<usize> = (0..n).map(|i| (seed as usize + i) % t).collect();
        prop_assert!(s.log_partition(&em) - s.path_score(&em, &path) >= -1e-12);
    }

    #[test]
    fn per_position_emission_shift_keeps_the_best_path(seed in 0u64..10_000, n in 1usize..6, t in 1usize..5, c in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_scores(&mut rng, t, false, false);
        let em = random_emissions(&mut rng, n, t, false);
        let i = seed as usize % n;
        let mut shifted = em.clone();
        for v in &mut shifted[i * t..(i + 1) * t] {
            *v += c;
        }
        prop_assert_eq!(s.viterbi(&em).0, s.viterbi(&shifted).0);
        let gap = s.log_partition(&shifted) - s.log_partition(&em);
        prop_assert!((gap - c).abs() < 1e-9);
    }
}
