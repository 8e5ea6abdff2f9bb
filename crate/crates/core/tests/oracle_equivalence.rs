mod oracles;

use oracles::*;
use plink_core::bits::BitString;
use plink_core::cascade::{reconcile, CascadeConfig};
use plink_core::privamp::{toeplitz_hash, PaSeed};
use plink_core::timing::find_coincidences;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fast_pairs(a: &[plink_core::photonsim::TimeTag], b: &[plink_core::photonsim::TimeTag], off: i64, w: u64) -> Vec<(u32, u32)> {
    find_coincidences(a, b, off, w)
        .iter()
        .map(|p| (p.a_index, p.b_index))
        .collect()
}

#[test]
fn matcher_equals_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..200 {
        let max = if k % 20 == 0 { 10_000 } else { 1_000 };
        let (a, b, off, w) = matcher_instance(&mut rng, max);
        assert_eq!(fast_pairs(&a, &b, off, w), brute_force_coincidences(&a, &b, off, w), "instance {k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matcher_pairs_are_disjoint_and_in_window(
        mut ta in proptest::collection::vec(0u64..2000, 0..80),
        mut tb in proptest::collection::vec(0u64..2000, 0..80),
        off in -20i64..20,
        w in 0u64..10,
    ) {
        ta.sort_unstable();
        tb.sort_unstable();
        let a: Vec<_> = ta.iter().map(|&t| plink_core::photonsim::TimeTag::new(0, t + 100)).collect();
        let b: Vec<_> = tb.iter().map(|&t| plink_core::photonsim::TimeTag::new(1, t + 100)).collect();
        let pairs = find_coincidences(&a, &b, off, w);
        let mut seen_a = std::collections::HashSet::new();
        let mut last_b = None;
        for p in &pairs {
            prop_assert!(p.delta_ticks.unsigned_abs() <= w);
            prop_assert!(seen_a.insert(p.a_index));
            prop_assert!(last_b.map_or(true, |l| p.b_index > l));
            last_b = Some(p.b_index);
        }
        prop_assert_eq!(pairs.iter().map(|p| (p.a_index, p.b_index)).collect::<Vec<_>>(),
            brute_force_coincidences(&a, &b, off, w));
    }

    #[test]
    fn toeplitz_matches_naive_small(n in 1usize..300, frac in 0.0f64..1.0, s: u64) {
        let m = ((n as f64 * frac) as usize).max(1).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let x = BitString::random(n, &mut rng);
        let seed = PaSeed::random(n, m, &mut rng);
        prop_assert_eq!(toeplitz_hash(&x, &seed, m).unwrap(), naive_toeplitz(&x, &seed.bits, m));
    }
}

#[test]
fn toeplitz_matches_naive_large() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (n, m) in [(4096, 1300), (33_333, 4001), (100_000, 1500)] {
        let x = BitString::random(n, &mut rng);
        let seed = PaSeed::random(n, m, &mut rng);
        assert_eq!(toeplitz_hash(&x, &seed, m).unwrap(), naive_toeplitz(&x, &seed.bits, m), "n={n}");
    }
}

#[test]
fn toeplitz_collisions_are_two_universal() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, m) = (64, 16);
    let x = BitString::random(n, &mut rng);
    let mut y = x.clone();
    y.flip(5);
    y.flip(40);
    let diff = x.xor(&y);
    let draws = 1_000_000u32;
    let mut collisions = 0u32;
    for _ in 0..draws {
        let seed = PaSeed::random(n, m, &mut rng);
        // linearity: h(x) = h(y) iff h(x ^ y) = 0
        if toeplitz_hash(&diff, &seed, m).unwrap().count_ones() == 0 {
            collisions += 1;
        }
    }
    let expected = draws as f64 / 65536.0;
    assert!((collisions as f64 - expected).abs() < 3.0 * expected.sqrt(), "{collisions} vs {expected}");
}

#[test]
fn cascade_corrects_planted_blocks() {
    let cfg = CascadeConfig::default();
    let mut estimates = Vec::new();
    for t in 0..100u64 {
        let (a, b, errors) = planted_errors(4096, 0.063, 500 + t);
        let (ra, rb) = reconcile(&a, &b, &cfg, 0.063, t).unwrap();
        assert!(ra.verified && rb.verified);
        assert_eq!(ra.corrected_bits, rb.corrected_bits, "trial {t}");
        assert_eq!(rb.corrected_bits, a);
        assert_eq!(rb.corrected_error_count, errors);
        assert_eq!(ra.leaked_bits, rb.leaked_bits);
        estimates.push(rb.qber_estimate);
    }
    assert!((mean(&estimates) - 0.063).abs() < 0.01);
}

#[test]
fn cascade_converges_at_high_qber() {
    let cfg = CascadeConfig::default();
    for t in 0..10u64 {
        let (a, b, _) = planted_errors(8192, 0.11, 90 + t);
        let (_, rb) = reconcile(&a, &b, &cfg, 0.11, t).unwrap();
        assert_eq!(rb.corrected_bits, a);
    }
}
