//! Statistical simulator of the entangled-pair source, fiber and detectors.
//!
//! Emission is a homogeneous Poisson process. Independent Bernoulli loss on
//! each arm thins it into three independent Poisson processes (both arms
//! detected, Alice only, Bob only), which are sampled directly instead of
//! drawing every emitted pair.

use crate::channel::{self, db_to_linear, FiberConfig, LcvrStack};
use crate::qstate::{Basis, PolarizationUnitary, QstateError, Side, TwoQubitPolarizationState};
use crate::timing::ClockModel;
use nalgebra::Matrix4;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

/// Timetagger resolution.
pub const TICK_PS: f64 = 125.0;
pub const TICKS_PER_SECOND: u64 = 8_000_000_000;
pub const MAX_TICKS: u64 = (1 << 62) - 1;

/// Link visibility of the default setup. With the 0.98 source visibility
/// and the accidental background it puts the sifted QBER near 5.5 %, where
/// CASCADE's measured leakage leaves about 106 bits/s.
pub const REFERENCE_LINK_VISIBILITY: f64 = 0.925;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid source config: {0}")]
    InvalidSource(String),
    #[error("invalid detector config: {0}")]
    InvalidDetector(String),
    #[error(transparent)]
    State(#[from] QstateError),
    #[error(transparent)]
    Channel(#[from] channel::ChannelError),
}

/// A detection: channel (0=H, 1=V, 2=D, 3=A) and time in 125-ps ticks,
/// packed as `ticks << 2 | channel`. Ordering is by ticks, then channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeTag(u64);

impl TimeTag {
    pub fn new(channel: u8, ticks: u64) -> Self {
        assert!(channel < 4, "channel {channel} out of range");
        assert!(ticks <= MAX_TICKS, "ticks overflow 62 bits");
        Self(ticks << 2 | channel as u64)
    }

    pub fn from_raw(raw: u64) -> Self {
        Self(raw)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn channel(self) -> u8 {
        (self.0 & 3) as u8
    }

    pub fn ticks(self) -> u64 {
        self.0 >> 2
    }

    /// Same time with the channel bits cleared.
    pub fn time_only(self) -> Self {
        Self(self.0 & !3)
    }
}

pub fn is_sorted(tags: &[TimeTag]) -> bool {
    tags.windows(2).all(|w| w[0] <= w[1])
}

pub fn channel_for(basis: Basis, bit: bool) -> u8 {
    match basis {
        Basis::HV => bit as u8,
        Basis::DA => 2 + bit as u8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateOverride {
    pub re: [[f64; 4]; 4],
    pub im: [[f64; 4]; 4],
}

impl StateOverride {
    pub fn to_state(&self) -> Result<TwoQubitPolarizationState, QstateError> {
        let m = Matrix4::from_fn(|i, j| Complex64::new(self.re[i][j], self.im[i][j]));
        TwoQubitPolarizationState::from_matrix(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Pairs generated per second at the crystal.
    pub generated_pair_rate_hz: f64,
    pub visibility: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateOverride>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            generated_pair_rate_hz: REFERENCE_PRESET.pair_rate_hz,
            visibility: 0.98,
            state: None,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.generated_pair_rate_hz >= 0.0) || !self.generated_pair_rate_hz.is_finite() {
            return Err(SimError::InvalidSource("generated_pair_rate_hz must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(SimError::InvalidSource("visibility must be in [0, 1]".into()));
        }
        if let Some(s) = &self.state {
            s.to_state()?;
        }
        Ok(())
    }

    pub fn base_state(&self) -> Result<TwoQubitPolarizationState, QstateError> {
        match &self.state {
            Some(s) => s.to_state(),
            None => TwoQubitPolarizationState::werner(self.visibility),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Dark counts per second on each of the four detectors.
    pub dark_rate_hz: f64,
    pub jitter_sigma_ps: f64,
    pub dead_time_ns: f64,
    /// Optical coupling loss in front of the detectors (analyzer, compensation), dB ≤ 0.
    pub coupling_db: f64,
}

impl DetectorConfig {
    pub fn reference_alice() -> Self {
        Self {
            efficiency: 0.1,
            dark_rate_hz: 3000.0,
            jitter_sigma_ps: 570.0,
            dead_time_ns: 1000.0,
            coupling_db: REFERENCE_PRESET.coupling_db_alice,
        }
    }

    pub fn reference_bob() -> Self {
        Self {
            coupling_db: REFERENCE_PRESET.coupling_db_bob,
            ..Self::reference_alice()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidDetector(m.to_string()));
        if !(0.0..=1.0).contains(&self.efficiency) {
            return bad("efficiency must be in [0, 1]");
        }
        if !(self.dark_rate_hz >= 0.0) || !(self.jitter_sigma_ps >= 0.0) || !(self.dead_time_ns >= 0.0) {
            return bad("rates and times must be >= 0");
        }
        if !(self.coupling_db <= 0.0) {
            return bad("coupling_db must be <= 0");
        }
        Ok(())
    }

    fn transmission(&self) -> f64 {
        db_to_linear(self.coupling_db) * self.efficiency
    }
}

/// Arm transmissions: Alice sees the fiber, Bob a short patch cord.
pub fn arm_transmissions(fiber: &FiberConfig, det_a: &DetectorConfig, det_b: &DetectorConfig) -> (f64, f64) {
    (fiber.transmission() * det_a.transmission(), det_b.transmission())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub source: SourceConfig,
    pub fiber: FiberConfig,
    pub drift_u: PolarizationUnitary,
    pub lcvr: LcvrStack,
    pub det_a: DetectorConfig,
    pub det_b: DetectorConfig,
    pub clock: ClockModel,
}

impl SimParams {
    /// State reaching the analyzers: source state, link depolarization, then
    /// fiber rotation and compensation on Alice's photon.
    pub fn effective_state(&self) -> Result<TwoQubitPolarizationState, SimError> {
        let s = self.source.base_state()?.depolarize(self.fiber.link_visibility)?;
        let u = channel::lcvr_unitary(&self.lcvr).then_after(&self.drift_u);
        Ok(s.apply_local(&u, Side::Alice))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub index: u32,
    pub start_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimBlock {
    pub spec: BlockSpec,
    pub seed: u64,
    pub alice: Vec<TimeTag>,
    pub bob: Vec<TimeTag>,
    /// (Alice index, Bob index) of genuine pairs, in Bob order.
    pub truth: Vec<(u32, u32)>,
}

/// Derives the per-block RNG seed.
pub fn block_seed(seed: u64, index: u32) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const NO_PAIR: u32 = u32::MAX;

struct Event {
    tag: u64,
    pair: u32,
}

fn sample_bit(rng: &mut ChaCha8Rng, p0: f64) -> bool {
    rng.gen::<f64>() >= p0
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        0
    } else {
        Poisson::new(mean).expect("positive mean").sample(rng) as u64
    }
}

/// Simulates one block of detections for both sides.
pub fn generate_block(params: &SimParams, spec: BlockSpec, seed: u64) -> Result<SimBlock, SimError> {
    params.source.validate()?;
    params.det_a.validate()?;
    params.det_b.validate()?;
    let state = params.effective_state()?;
    let mut rng = ChaCha8Rng::seed_from_u64(block_seed(seed, spec.index));

    let (ta, tb) = arm_transmissions(&params.fiber, &params.det_a, &params.det_b);
    let rate = params.source.generated_pair_rate_hz;
    let dur = spec.duration_s;
    let dur_ps = dur * 1e12;
    let start_ps = spec.start_s * 1e12;
    let delay_ticks = (channel::propagation_delay(&params.fiber) / TICK_PS).round();
    let delay_ps = delay_ticks * TICK_PS;

    let tables: [[[[f64; 2]; 2]; 2]; 2] = {
        let mut t = [[[[0.0; 2]; 2]; 2]; 2];
        for (i, ba) in Basis::ALL.iter().enumerate() {
            for (j, bb) in Basis::ALL.iter().enumerate() {
                t[i][j] = state.outcome_table(*ba, *bb);
            }
        }
        t
    };
    let jitter_a = Normal::new(0.0, params.det_a.jitter_sigma_ps).expect("finite jitter");
    let jitter_b = Normal::new(0.0, params.det_b.jitter_sigma_ps).expect("finite jitter");

    let quantize = |ps: f64| -> Option<u64> {
        let t = (ps / TICK_PS).floor();
        (t >= 0.0 && t <= MAX_TICKS as f64).then_some(t as u64)
    };
    let alice_time = |true_ps: f64| quantize(params.clock.local_ps(true_ps));

    let mut alice: Vec<Event> = Vec::new();
    let mut bob: Vec<Event> = Vec::new();

    // both arms detected
    let n_pairs = poisson_count(&mut rng, rate * ta * tb * dur);
    let mut next_pair = 0u32;
    for _ in 0..n_pairs {
        let t = start_ps + rng.gen::<f64>() * dur_ps;
        let ia = rng.gen_range(0..2usize);
        let ib = rng.gen_range(0..2usize);
        let tab = &tables[ia][ib];
        let u = rng.gen::<f64>();
        let (bit_a, bit_b) = if u < tab[0][0] {
            (false, false)
        } else if u < tab[0][0] + tab[0][1] {
            (false, true)
        } else if u < tab[0][0] + tab[0][1] + tab[1][0] {
            (true, false)
        } else {
            (true, true)
        };
        let a_ps = t + delay_ps + jitter_a.sample(&mut rng);
        let b_ps = t + jitter_b.sample(&mut rng);
        let pair = next_pair;
        next_pair += 1;
        if let Some(ticks) = alice_time(a_ps) {
            alice.push(Event {
                tag: TimeTag::new(channel_for(Basis::ALL[ia], bit_a), ticks).raw(),
                pair,
            });
        }
        if let Some(ticks) = quantize(b_ps) {
            bob.push(Event {
                tag: TimeTag::new(channel_for(Basis::ALL[ib], bit_b), ticks).raw(),
                pair,
            });
        }
    }

    // Alice only; Bob's basis is irrelevant to her marginal
    let n = poisson_count(&mut rng, rate * ta * (1.0 - tb) * dur);
    for _ in 0..n {
        let t = start_ps + rng.gen::<f64>() * dur_ps;
        let ia = rng.gen_range(0..2usize);
        let p0 = tables[ia][0][0][0] + tables[ia][0][0][1];
        let bit = sample_bit(&mut rng, p0);
        if let Some(ticks) = alice_time(t + delay_ps + jitter_a.sample(&mut rng)) {
            alice.push(Event {
                tag: TimeTag::new(channel_for(Basis::ALL[ia], bit), ticks).raw(),
                pair: NO_PAIR,
            });
        }
    }

    // Bob only
    let n = poisson_count(&mut rng, rate * tb * (1.0 - ta) * dur);
    for _ in 0..n {
        let t = start_ps + rng.gen::<f64>() * dur_ps;
        let ib = rng.gen_range(0..2usize);
        let p0 = tables[0][ib][0][0] + tables[0][ib][1][0];
        let bit = sample_bit(&mut rng, p0);
        if let Some(ticks) = quantize(t + jitter_b.sample(&mut rng)) {
            bob.push(Event {
                tag: TimeTag::new(channel_for(Basis::ALL[ib], bit), ticks).raw(),
                pair: NO_PAIR,
            });
        }
    }

    // dark counts, uniform over the four detectors of each side
    let n = poisson_count(&mut rng, 4.0 * params.det_a.dark_rate_hz * dur);
    for _ in 0..n {
        let t = start_ps + rng.gen::<f64>() * dur_ps;
        let ch = rng.gen_range(0..4u8);
        if let Some(ticks) = alice_time(t + delay_ps) {
            alice.push(Event {
                tag: TimeTag::new(ch, ticks).raw(),
                pair: NO_PAIR,
            });
        }
    }
    let n = poisson_count(&mut rng, 4.0 * params.det_b.dark_rate_hz * dur);
    for _ in 0..n {
        let t = start_ps + rng.gen::<f64>() * dur_ps;
        let ch = rng.gen_range(0..4u8);
        if let Some(ticks) = quantize(t) {
            bob.push(Event {
                tag: TimeTag::new(ch, ticks).raw(),
                pair: NO_PAIR,
            });
        }
    }

    let (alice, a_pairs) = finish_stream(alice, params.det_a.dead_time_ns, next_pair as usize);
    let (bob, b_pairs) = finish_stream(bob, params.det_b.dead_time_ns, next_pair as usize);
    let mut truth: Vec<(u32, u32)> = a_pairs
        .iter()
        .zip(&b_pairs)
        .filter(|(a, b)| **a != NO_PAIR && **b != NO_PAIR)
        .map(|(a, b)| (*a, *b))
        .collect();
    truth.sort_unstable_by_key(|&(_, b)| b);

    Ok(SimBlock {
        spec,
        seed,
        alice,
        bob,
        truth,
    })
}

/// Sorts, applies non-paralyzable dead time per channel, and returns the
/// surviving tags plus, per pair id, the tag index (or `NO_PAIR`).
fn finish_stream(mut events: Vec<Event>, dead_time_ns: f64, n_pairs: usize) -> (Vec<TimeTag>, Vec<u32>) {
    events.sort_unstable_by_key(|e| (e.tag, e.pair));
    let dead_ticks = (dead_time_ns * 1e3 / TICK_PS).round() as u64;
    let mut last: [Option<u64>; 4] = [None; 4];
    let mut tags = Vec::with_capacity(events.len());
    let mut pair_index = vec![NO_PAIR; n_pairs];
    for e in events {
        let tag = TimeTag::from_raw(e.tag);
        let ch = tag.channel() as usize;
        if let Some(prev) = last[ch] {
            if tag.ticks() - prev < dead_ticks {
                continue;
            }
        }
        last[ch] = Some(tag.ticks());
        if e.pair != NO_PAIR {
            pair_index[e.pair as usize] = tags.len() as u32;
        }
        tags.push(tag);
    }
    (tags, pair_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateExpectations {
    pub singles_a: f64,
    pub singles_b: f64,
    /// Genuine pairs detected on both sides, any time difference.
    pub coincidences: f64,
    /// Genuine pairs inside the window plus accidentals.
    pub coincidences_in_window: f64,
    pub accidentals: f64,
    /// Half of the windowed coincidences.
    pub sifted: f64,
}

/// Live fraction of a detector seeing `rate` under non-paralyzable dead time.
fn live_fraction(rate: f64, dead_time_s: f64) -> f64 {
    1.0 / (1.0 + rate * dead_time_s)
}

/// Fraction of genuine pairs whose quantized delta falls within a full
/// acceptance width of `window_ns`.
pub fn window_capture(det_a: &DetectorConfig, det_b: &DetectorConfig, window_ns: f64) -> f64 {
    let var = det_a.jitter_sigma_ps.powi(2) + det_b.jitter_sigma_ps.powi(2) + TICK_PS * TICK_PS / 6.0;
    let half = window_ns * 1e3 / 2.0;
    erf(half / (2.0 * var).sqrt())
}

/// Full acceptance width of a ±`window_ticks` coincidence window, in ns.
pub fn acceptance_width_ns(window_ticks: u64) -> f64 {
    (2 * window_ticks + 1) as f64 * TICK_PS * 1e-3
}

/// Closed-form detection rates.
///
/// Dead time enters through the per-detector live fraction, with the side's
/// singles shared equally among its four detectors.
pub fn rate_expectations(
    source: &SourceConfig,
    fiber: &FiberConfig,
    det_a: &DetectorConfig,
    det_b: &DetectorConfig,
    window_ns: f64,
) -> RateExpectations {
    let (ta, tb) = arm_transmissions(fiber, det_a, det_b);
    let r = source.generated_pair_rate_hz;
    let raw_a = r * ta + 4.0 * det_a.dark_rate_hz;
    let raw_b = r * tb + 4.0 * det_b.dark_rate_hz;
    let live_a = live_fraction(raw_a / 4.0, det_a.dead_time_ns * 1e-9);
    let live_b = live_fraction(raw_b / 4.0, det_b.dead_time_ns * 1e-9);
    let singles_a = raw_a * live_a;
    let singles_b = raw_b * live_b;
    let coincidences = r * ta * tb * live_a * live_b;
    let accidentals = singles_a * singles_b * window_ns * 1e-9;
    let in_window = coincidences * window_capture(det_a, det_b, window_ns) + accidentals;
    RateExpectations {
        singles_a,
        singles_b,
        coincidences,
        coincidences_in_window: in_window,
        accidentals,
        sifted: in_window / 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub singles_a: f64,
    pub singles_b: f64,
    pub coincidences_in_window: f64,
    pub window_ticks: u64,
}

/// Observed rates of the deployed-fiber run.
pub const REFERENCE_TARGETS: CalibrationTargets = CalibrationTargets {
    singles_a: 40_699.0,
    singles_b: 242_125.0,
    coincidences_in_window: 670.0,
    window_ticks: 4,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub pair_rate_hz: f64,
    pub coupling_db_alice: f64,
    pub coupling_db_bob: f64,
}

/// Frozen output of `calibrate(REFERENCE_TARGETS, ...)` for the default detectors
/// and fiber; a unit test keeps the two in sync.
pub const REFERENCE_PRESET: Calibration = Calibration {
    pair_rate_hz: 5_188_373.0,
    coupling_db_alice: -5.5088,
    coupling_db_bob: -3.2458,
};

/// Solves the rate equations for the generated pair rate and each side's
/// coupling loss, given everything else in the detector and fiber configs.
pub fn calibrate(
    targets: &CalibrationTargets,
    fiber: &FiberConfig,
    det_a: &DetectorConfig,
    det_b: &DetectorConfig,
) -> Result<Calibration, SimError> {
    let window_ns = acceptance_width_ns(targets.window_ticks);
    // invert the dead-time saturation: s = x / (1 + x τ / 4)
    let unsaturate = |s: f64, d: &DetectorConfig| s / (1.0 - s * d.dead_time_ns * 1e-9 / 4.0);
    let raw_a = unsaturate(targets.singles_a, det_a);
    let raw_b = unsaturate(targets.singles_b, det_b);
    let pairs_a = raw_a - 4.0 * det_a.dark_rate_hz;
    let pairs_b = raw_b - 4.0 * det_b.dark_rate_hz;
    if !(pairs_a > 0.0 && pairs_b > 0.0) {
        return Err(SimError::InvalidSource("singles targets below dark-count floor".into()));
    }
    let live_a = live_fraction(raw_a / 4.0, det_a.dead_time_ns * 1e-9);
    let live_b = live_fraction(raw_b / 4.0, det_b.dead_time_ns * 1e-9);
    let acc = targets.singles_a * targets.singles_b * window_ns * 1e-9;
    let genuine = (targets.coincidences_in_window - acc)
        / (window_capture(det_a, det_b, window_ns) * live_a * live_b);
    if !(genuine > 0.0) {
        return Err(SimError::InvalidSource("coincidence target below accidental floor".into()));
    }
    let pair_rate = pairs_a * pairs_b / genuine;
    let ta = genuine / pairs_b;
    let tb = genuine / pairs_a;
    let coupling_a = channel::linear_to_db(ta / (fiber.transmission() * det_a.efficiency));
    let coupling_b = channel::linear_to_db(tb / det_b.efficiency);
    Ok(Calibration {
        pair_rate_hz: pair_rate,
        coupling_db_alice: coupling_a,
        coupling_db_bob: coupling_b,
    })
}
