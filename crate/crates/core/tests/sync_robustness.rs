use plink_core::config::RunConfig;
use plink_core::photonsim::TimeTag;
use plink_core::scenario::Scenario;
use plink_core::timing::{estimate_offset, SyncParams, TimingError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario(offset: i64, seed: u64, block_s: f64) -> Scenario {
    let mut cfg = RunConfig::default();
    cfg.protocol.block_s = block_s;
    cfg.clock.offset_ticks = offset;
    cfg.seed = seed;
    Scenario::new(&cfg).unwrap()
}

#[test]
fn random_offsets_recovered_within_two_ticks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for seed in 0..12 {
        let offset = rng.gen_range(-8_000_000_000i64..=8_000_000_000);
        let sc = scenario(offset, seed, 6.0);
        // later block so a negative offset does not clip Alice's stream
        let b = sc.block(1).unwrap();
        let est = estimate_offset(&b.alice, &b.bob, &SyncParams::default()).unwrap();
        let err = (est.offset_ticks - sc.true_offset_ticks()).abs();
        assert!(err <= 2, "seed {seed}: offset {offset} off by {err}");
    }
}

#[test]
fn pair_free_streams_fail_to_sync() {
    let mut cfg = RunConfig::default();
    cfg.protocol.block_s = 5.0;
    cfg.source.generated_pair_rate_hz = 0.0;
    cfg.detectors.alice.dark_rate_hz = 10_000.0;
    cfg.detectors.bob.dark_rate_hz = 60_000.0;
    let b = Scenario::new(&cfg).unwrap().block(0).unwrap();
    let r = estimate_offset(&b.alice, &b.bob, &SyncParams::default());
    assert!(matches!(r, Err(TimingError::SyncFailed(_))), "{r:?}");

    // Default dark rates: sparse streams whose overlap, and so the expected
    // correlation, changes with the lag.
    for seed in 0..5 {
        let mut cfg = RunConfig::default();
        cfg.protocol.block_s = 5.0;
        cfg.source.generated_pair_rate_hz = 0.0;
        cfg.seed = seed;
        let b = Scenario::new(&cfg).unwrap().block(0).unwrap();
        let r = estimate_offset(&b.alice, &b.bob, &SyncParams::default());
        assert!(matches!(r, Err(TimingError::SyncFailed(_))), "seed {seed}: {r:?}");
    }

    // independent uniform streams at preset singles rates
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut uniform = |n: usize| {
        let mut v: Vec<TimeTag> = (0..n)
            .map(|_| TimeTag::new(rng.gen_range(0..4), rng.gen_range(0..40_000_000_000)))
            .collect();
        v.sort_unstable();
        v
    };
    let (a, b) = (uniform(200_000), uniform(1_200_000));
    assert!(matches!(
        estimate_offset(&a, &b, &SyncParams::default()),
        Err(TimingError::SyncFailed(_))
    ));
    assert!(estimate_offset(&[], &b, &SyncParams::default()).is_err());
}
