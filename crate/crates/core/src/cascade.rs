//! CASCADE error reconciliation with a BICONF tail.
//!
//! Bob (the corrector) asks Alice (the responder) for parities of index
//! ranges and fixes his key to match hers. Every query names a *layout*, a
//! sequence of key positions both sides derive from the shared seed, and a
//! half-open range within it, so Alice needs no knowledge of block sizes.
//!
//! Structure: `passes` CASCADE passes with the block size doubling each
//! pass and a seeded shuffle before every pass but the first; every
//! corrected bit cascades back into all earlier passes. BICONF then checks
//! random half-subsets until `biconf_iterations` consecutive rounds agree,
//! bisecting any subset that disagrees.
//!
//! Queries are batched: all top-level parities of a pass go in one round
//! trip, and binary searches over disjoint blocks of one pass advance
//! together, one level per round trip.

use crate::bits::BitString;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CascadeError {
    #[error("keys must have equal length >= {min}, got {a} and {b}")]
    BadLength { a: usize, b: usize, min: usize },
    #[error("block parities already agree")]
    ParitiesEqual,
    #[error("malformed parity query {0:?}")]
    BadQuery(ParityQuery),
    #[error("expected {expected} parity answers, got {got}")]
    AnswerCount { expected: usize, got: usize },
    #[error("reconciliation failed: digests differ after correction")]
    DigestMismatch,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid cascade config: {0}")]
    InvalidConfig(String),
}

pub const MIN_KEY_LEN: usize = 64;
pub const MIN_BLOCK: usize = 8;
pub const MAX_BLOCK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    pub passes: u32,
    pub biconf_iterations: u32,
    /// QBER assumed for the first block, before any estimate exists.
    pub qber_prior: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            passes: 4,
            biconf_iterations: 10,
            qber_prior: 0.06,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.passes < 2 || self.passes > 32 {
            return Err(CascadeError::InvalidConfig("passes must be in [2, 32]".into()));
        }
        if !(0.0..=0.5).contains(&self.qber_prior) {
            return Err(CascadeError::InvalidConfig("qber_prior must be in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// First-pass block size: clamp(round(0.73 / Q), 8, 2^16).
pub fn initial_block_size(qber_ref: f64) -> usize {
    if qber_ref <= 0.0 {
        return MAX_BLOCK;
    }
    ((0.73 / qber_ref).round() as usize).clamp(MIN_BLOCK, MAX_BLOCK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Pass(u8),
    Biconf(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParityQuery {
    pub layout: Layout,
    pub start: u32,
    pub end: u32,
}

/// Position sequences shared by both sides.
#[derive(Debug, Clone)]
pub struct Layouts {
    n: usize,
    seed: u64,
    cache: HashMap<Layout, Vec<u32>>,
}

impl Layouts {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            cache: HashMap::new(),
        }
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(crate::photonsim::block_seed(self.seed, 0) ^ salt.wrapping_mul(0xa076_1d64_78bd_642f))
    }

    pub fn positions(&mut self, layout: Layout) -> &[u32] {
        if !self.cache.contains_key(&layout) {
            let seq: Vec<u32> = match layout {
                Layout::Pass(0) => (0..self.n as u32).collect(),
                Layout::Pass(p) => {
                    let mut v: Vec<u32> = (0..self.n as u32).collect();
                    v.shuffle(&mut self.rng(p as u64));
                    v
                }
                Layout::Biconf(r) => {
                    let mut rng = self.rng(0x1_0000_0000 + r as u64);
                    (0..self.n as u32).filter(|_| rng.gen::<bool>()).collect()
                }
            };
            self.cache.insert(layout, seq);
        }
        &self.cache[&layout]
    }
}

fn range_parity(key: &BitString, positions: &[u32]) -> bool {
    key.parity_of(positions)
}

/// Alice's side: answers parity queries over her key and counts disclosures.
#[derive(Debug, Clone)]
pub struct ParityResponder {
    key: BitString,
    layouts: Layouts,
    leaked: usize,
}

impl ParityResponder {
    pub fn new(key: BitString, seed: u64) -> Self {
        let n = key.len();
        Self {
            key,
            layouts: Layouts::new(n, seed),
            leaked: 0,
        }
    }

    pub fn answer(&mut self, queries: &[ParityQuery]) -> Result<Vec<bool>, CascadeError> {
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            if let Layout::Pass(p) = q.layout {
                if p >= 32 {
                    return Err(CascadeError::BadQuery(*q));
                }
            }
            let pos = self.layouts.positions(q.layout);
            if q.start >= q.end || q.end as usize > pos.len() {
                return Err(CascadeError::BadQuery(*q));
            }
            out.push(range_parity(&self.key, &pos[q.start as usize..q.end as usize]));
        }
        self.leaked += out.len();
        Ok(out)
    }

    pub fn leaked(&self) -> usize {
        self.leaked
    }

    pub fn key(&self) -> &BitString {
        &self.key
    }

    pub fn into_key(self) -> BitString {
        self.key
    }
}

/// A lock-step parity exchange with the responder.
pub trait ParityChannel {
    fn exchange(&mut self, queries: &[ParityQuery]) -> Result<Vec<bool>, CascadeError>;
}

impl ParityChannel for ParityResponder {
    fn exchange(&mut self, queries: &[ParityQuery]) -> Result<Vec<bool>, CascadeError> {
        self.answer(queries)
    }
}

fn split(start: u32, end: u32) -> u32 {
    start + (end - start).div_ceil(2)
}

/// Bisects a block whose parity differs from the remote one, exchanging one
/// parity per level. Returns the index within `positions` of the differing
/// bit; discloses ⌈log2 len⌉ parities for power-of-two lengths and never more.
pub fn binary_locate<C: ParityChannel>(
    key: &BitString,
    layout: Layout,
    positions: &[u32],
    remote_parity: bool,
    channel: &mut C,
) -> Result<usize, CascadeError> {
    if range_parity(key, positions) == remote_parity {
        return Err(CascadeError::ParitiesEqual);
    }
    let (mut start, mut end) = (0u32, positions.len() as u32);
    while end - start > 1 {
        let mid = split(start, end);
        let remote = channel.exchange(&[ParityQuery { layout, start, end: mid }])?;
        if remote.len() != 1 {
            return Err(CascadeError::AnswerCount {
                expected: 1,
                got: remote.len(),
            });
        }
        if range_parity(key, &positions[start as usize..mid as usize]) != remote[0] {
            end = mid;
        } else {
            start = mid;
        }
    }
    Ok(start as usize)
}

#[derive(Debug, Clone, Copy)]
struct Search {
    layout: Layout,
    start: u32,
    end: u32,
}

#[derive(Debug, Clone)]
enum Phase {
    Top(u8),
    Binary(Vec<Search>),
    Biconf(u32),
    Done,
}

/// What the corrector wants next.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Ask(Vec<ParityQuery>),
    Done,
}

/// Bob's side of the reconciliation as a resumable state machine.
#[derive(Debug, Clone)]
pub struct Corrector {
    key: BitString,
    cfg: CascadeConfig,
    layouts: Layouts,
    block_sizes: Vec<usize>,
    /// Per processed pass and block: own parity XOR Alice's.
    odd: Vec<Vec<bool>>,
    /// Per pass: key position → index in that pass's layout.
    inverse: Vec<Vec<u32>>,
    phase: Phase,
    pending: Vec<ParityQuery>,
    leaked: usize,
    corrected: usize,
    biconf_round: u32,
    biconf_streak: u32,
}

impl Corrector {
    pub fn new(key: BitString, cfg: &CascadeConfig, qber_ref: f64, seed: u64) -> Result<Self, CascadeError> {
        cfg.validate()?;
        let n = key.len();
        if n < MIN_KEY_LEN {
            return Err(CascadeError::BadLength {
                a: n,
                b: n,
                min: MIN_KEY_LEN,
            });
        }
        let k1 = initial_block_size(qber_ref);
        let block_sizes = (0..cfg.passes)
            .map(|p| k1.saturating_mul(1usize << p.min(30)).min(n))
            .collect();
        let mut c = Self {
            key,
            cfg: cfg.clone(),
            layouts: Layouts::new(n, seed),
            block_sizes,
            odd: Vec::new(),
            inverse: Vec::new(),
            phase: Phase::Done,
            pending: Vec::new(),
            leaked: 0,
            corrected: 0,
            biconf_round: 0,
            biconf_streak: 0,
        };
        c.enter_top(0);
        Ok(c)
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    /// Queries to send, or `Done`.
    pub fn step(&self) -> Step {
        match self.phase {
            Phase::Done => Step::Done,
            _ => Step::Ask(self.pending.clone()),
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase, Phase::Done)
    }

    pub fn absorb(&mut self, answers: &[bool]) -> Result<(), CascadeError> {
        if answers.len() != self.pending.len() {
            return Err(CascadeError::AnswerCount {
                expected: self.pending.len(),
                got: answers.len(),
            });
        }
        self.leaked += answers.len();
        match std::mem::replace(&mut self.phase, Phase::Done) {
            Phase::Done => Ok(()),
            Phase::Top(p) => {
                let size = self.block_sizes[p as usize];
                let pos = self.layouts.positions(Layout::Pass(p)).to_vec();
                let odd = pos
                    .chunks(size)
                    .zip(answers)
                    .map(|(chunk, &remote)| range_parity(&self.key, chunk) != remote)
                    .collect();
                let mut inv = vec![0u32; pos.len()];
                for (i, &x) in pos.iter().enumerate() {
                    inv[x as usize] = i as u32;
                }
                self.odd.push(odd);
                self.inverse.push(inv);
                self.advance();
                Ok(())
            }
            Phase::Binary(mut searches) => {
                let mut active = 0;
                for s in searches.iter_mut().filter(|s| s.end - s.start > 1) {
                    let mid = split(s.start, s.end);
                    let pos = self.layouts.positions(s.layout);
                    let own = range_parity(&self.key, &pos[s.start as usize..mid as usize]);
                    if own != answers[active] {
                        s.end = mid;
                    } else {
                        s.start = mid;
                    }
                    active += 1;
                }
                self.continue_binary(searches);
                Ok(())
            }
            Phase::Biconf(r) => {
                let pos = self.layouts.positions(Layout::Biconf(r));
                let own = range_parity(&self.key, pos);
                let len = pos.len() as u32;
                self.biconf_round += 1;
                if own == answers[0] {
                    self.biconf_streak += 1;
                    self.advance();
                } else {
                    self.biconf_streak = 0;
                    self.continue_binary(vec![Search {
                        layout: Layout::Biconf(r),
                        start: 0,
                        end: len,
                    }]);
                }
                Ok(())
            }
        }
    }

    fn enter_top(&mut self, p: u8) {
        let size = self.block_sizes[p as usize] as u32;
        let n = self.key.len() as u32;
        self.pending = (0..n.div_ceil(size))
            .map(|b| ParityQuery {
                layout: Layout::Pass(p),
                start: b * size,
                end: ((b + 1) * size).min(n),
            })
            .collect();
        self.phase = Phase::Top(p);
    }

    fn continue_binary(&mut self, mut searches: Vec<Search>) {
        // resolve finished searches, then query the first half of the rest
        searches.retain(|s| {
            if s.end - s.start == 1 {
                let pos = self.layouts.positions(s.layout)[s.start as usize];
                self.fix(pos);
                false
            } else {
                true
            }
        });
        if searches.is_empty() {
            self.advance();
            return;
        }
        self.pending = searches
            .iter()
            .map(|s| ParityQuery {
                layout: s.layout,
                start: s.start,
                end: split(s.start, s.end),
            })
            .collect();
        self.phase = Phase::Binary(searches);
    }

    fn fix(&mut self, position: u32) {
        self.key.flip(position as usize);
        self.corrected += 1;
        for (p, odd) in self.odd.iter_mut().enumerate() {
            let block = self.inverse[p][position as usize] as usize / self.block_sizes[p];
            odd[block] = !odd[block];
        }
    }

    fn advance(&mut self) {
        // smallest blocks first: earlier passes have smaller blocks
        if let Some(p) = self.odd.iter().position(|o| o.iter().any(|&x| x)) {
            let size = self.block_sizes[p] as u32;
            let n = self.key.len() as u32;
            let searches = self.odd[p]
                .iter()
                .enumerate()
                .filter(|(_, &x)| x)
                .map(|(b, _)| Search {
                    layout: Layout::Pass(p as u8),
                    start: b as u32 * size,
                    end: ((b as u32 + 1) * size).min(n),
                })
                .collect();
            self.continue_binary(searches);
            return;
        }
        let done_passes = self.odd.len();
        if done_passes < self.cfg.passes as usize {
            self.enter_top(done_passes as u8);
            return;
        }
        while self.biconf_streak < self.cfg.biconf_iterations {
            let r = self.biconf_round;
            let len = self.layouts.positions(Layout::Biconf(r)).len() as u32;
            if len == 0 {
                self.biconf_round += 1;
                self.biconf_streak += 1;
                continue;
            }
            self.pending = vec![ParityQuery {
                layout: Layout::Biconf(r),
                start: 0,
                end: len,
            }];
            self.phase = Phase::Biconf(r);
            return;
        }
        self.pending.clear();
        self.phase = Phase::Done;
    }

    pub fn leaked(&self) -> usize {
        self.leaked
    }

    pub fn corrected(&self) -> usize {
        self.corrected
    }

    pub fn key(&self) -> &BitString {
        &self.key
    }

    pub fn finish(self) -> ReconciliationResult {
        let n = self.key.len();
        ReconciliationResult {
            qber_estimate: self.corrected as f64 / n as f64,
            corrected_error_count: self.corrected,
            leaked_bits: self.leaked,
            corrected_bits: self.key,
            verified: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconciliationResult {
    pub corrected_bits: BitString,
    pub leaked_bits: usize,
    pub corrected_error_count: usize,
    pub qber_estimate: f64,
    pub verified: bool,
}

/// Runs the corrector to completion over `channel`.
pub fn reconcile_with<C: ParityChannel>(
    key: BitString,
    cfg: &CascadeConfig,
    qber_ref: f64,
    seed: u64,
    channel: &mut C,
) -> Result<ReconciliationResult, CascadeError> {
    let mut c = Corrector::new(key, cfg, qber_ref, seed)?;
    while let Step::Ask(q) = c.step() {
        let answers = channel.exchange(&q)?;
        c.absorb(&answers)?;
    }
    Ok(c.finish())
}

/// In-process reconciliation of Alice's and Bob's keys, returning each
/// side's result; Bob's key is corrected towards Alice's.
pub fn reconcile(
    key_a: &BitString,
    key_b: &BitString,
    cfg: &CascadeConfig,
    qber_ref: f64,
    seed: u64,
) -> Result<(ReconciliationResult, ReconciliationResult), CascadeError> {
    if key_a.len() != key_b.len() || key_a.len() < MIN_KEY_LEN {
        return Err(CascadeError::BadLength {
            a: key_a.len(),
            b: key_b.len(),
            min: MIN_KEY_LEN,
        });
    }
    let mut responder = ParityResponder::new(key_a.clone(), seed);
    let mut bob = reconcile_with(key_b.clone(), cfg, qber_ref, seed, &mut responder)?;
    let verified = responder.key().digest64() == bob.corrected_bits.digest64();
    if !verified {
        return Err(CascadeError::DigestMismatch);
    }
    bob.verified = true;
    let alice = ReconciliationResult {
        corrected_bits: responder.key().clone(),
        leaked_bits: responder.leaked(),
        corrected_error_count: bob.corrected_error_count,
        qber_estimate: bob.qber_estimate,
        verified,
    };
    Ok((alice, bob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privamp::h2;

    fn planted(n: usize, q: f64, seed: u64) -> (BitString, BitString, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = BitString::random(n, &mut rng);
        let mut b = a.clone();
        let mut errs = 0;
        for i in 0..n {
            if rng.gen::<f64>() < q {
                b.flip(i);
                errs += 1;
            }
        }
        (a, b, errs)
    }

    #[test]
    fn block_size_rule() {
        assert_eq!(initial_block_size(0.06), 12);
        assert_eq!(initial_block_size(0.5), 8);
        assert_eq!(initial_block_size(1e-9), MAX_BLOCK);
        assert_eq!(initial_block_size(0.0), MAX_BLOCK);
    }

    #[test]
    fn error_free_leaks_only_top_parities() {
        let (a, _, _) = planted(1000, 0.0, 1);
        let cfg = CascadeConfig::default();
        let (ra, rb) = reconcile(&a, &a, &cfg, 0.06, 3).unwrap();
        assert_eq!(rb.corrected_error_count, 0);
        let k1 = initial_block_size(0.06);
        let tops: usize = (0..cfg.passes).map(|p| 1000usize.div_ceil((k1 << p).min(1000))).sum();
        assert_eq!(rb.leaked_bits, tops + cfg.biconf_iterations as usize);
        assert_eq!(ra.leaked_bits, rb.leaked_bits);
        assert!(ra.verified && rb.verified);
    }

    #[test]
    fn single_error_one_descent() {
        let (a, mut b, _) = planted(1024, 0.0, 2);
        b.flip(700);
        let cfg = CascadeConfig::default();
        // qber_ref chosen so k1 = 512
        let q = 0.73 / 512.0;
        assert_eq!(initial_block_size(q), 512);
        let (_, rb) = reconcile(&a, &b, &cfg, q, 4).unwrap();
        assert_eq!(rb.corrected_error_count, 1);
        let tops = 2 + 1 + 1 + 1;
        assert_eq!(rb.leaked_bits, tops + 9 + cfg.biconf_iterations as usize);
        assert_eq!(rb.corrected_bits, a);
    }

    #[test]
    fn binary_locate_examples() {
        let a = BitString::zeros(8);
        let mut b = a.clone();
        b.flip(5);
        let positions: Vec<u32> = (0..8).collect();
        let mut alice = ParityResponder::new(a.clone(), 0);
        let idx = binary_locate(&b, Layout::Pass(0), &positions, false, &mut alice).unwrap();
        assert_eq!(idx, 5);
        assert_eq!(alice.leaked(), 3);

        let one = BitString::from_bools(&[true]);
        let mut alice = ParityResponder::new(BitString::zeros(1), 0);
        assert_eq!(binary_locate(&one, Layout::Pass(0), &[0], false, &mut alice), Ok(0));
        assert_eq!(alice.leaked(), 0);

        let mut alice = ParityResponder::new(a.clone(), 0);
        assert_eq!(
            binary_locate(&a, Layout::Pass(0), &positions, false, &mut alice),
            Err(CascadeError::ParitiesEqual)
        );
    }

    #[test]
    fn binary_locate_exhaustive() {
        for len in 2..=64usize {
            let a = BitString::zeros(len);
            let positions: Vec<u32> = (0..len as u32).collect();
            let bound = (len as f64).log2().ceil() as usize;
            for e in 0..len {
                let mut b = a.clone();
                b.flip(e);
                let mut alice = ParityResponder::new(a.clone(), 0);
                let idx = binary_locate(&b, Layout::Pass(0), &positions, false, &mut alice).unwrap();
                assert_eq!(idx, e);
                assert!(alice.leaked() <= bound);
                if len.is_power_of_two() {
                    assert_eq!(alice.leaked(), bound);
                }
            }
        }
    }

    #[test]
    fn shuffles_are_shared() {
        let mut x = Layouts::new(500, 99);
        let mut y = Layouts::new(500, 99);
        for l in [Layout::Pass(1), Layout::Pass(3), Layout::Biconf(0), Layout::Biconf(7)] {
            assert_eq!(x.positions(l), y.positions(l));
        }
        let mut z = Layouts::new(500, 100);
        assert_ne!(x.positions(Layout::Pass(1)), z.positions(Layout::Pass(1)));
        let mut p = x.positions(Layout::Pass(2)).to_vec();
        p.sort_unstable();
        assert_eq!(p, (0..500).collect::<Vec<_>>());
    }

    #[test]
    fn corrects_planted_errors_both_sides_identical() {
        let cfg = CascadeConfig::default();
        let mut est = 0.0;
        for t in 0..20u64 {
            let (a, b, errs) = planted(4096, 0.063, 1000 + t);
            let (ra, rb) = reconcile(&a, &b, &cfg, 0.063, t).unwrap();
            assert_eq!(ra.corrected_bits, rb.corrected_bits);
            assert_eq!(rb.corrected_bits, a);
            assert_eq!(rb.corrected_error_count, errs);
            assert_eq!(ra.leaked_bits, rb.leaked_bits);
            est += rb.qber_estimate;
        }
        assert!((est / 20.0 - 0.063).abs() < 0.01);
    }

    #[test]
    fn efficiency_within_bound() {
        let cfg = CascadeConfig::default();
        for q in [0.02, 0.05, 0.063, 0.10] {
            let mut ratio = 0.0;
            for t in 0..20u64 {
                let (a, b, _) = planted(8192, q, 50 + t);
                let (_, rb) = reconcile(&a, &b, &cfg, q, t).unwrap();
                ratio += rb.leaked_bits as f64 / (8192.0 * h2(q).unwrap());
            }
            ratio /= 20.0;
            assert!(ratio <= 1.45, "q={q}: {ratio}");
        }
    }

    #[test]
    fn rejects_short_or_unequal() {
        let cfg = CascadeConfig::default();
        assert!(matches!(
            reconcile(&BitString::zeros(10), &BitString::zeros(10), &cfg, 0.05, 0),
            Err(CascadeError::BadLength { .. })
        ));
        assert!(reconcile(&BitString::zeros(100), &BitString::zeros(101), &cfg, 0.05, 0).is_err());
        let bad = CascadeConfig {
            passes: 1,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn responder_rejects_bad_ranges() {
        let mut r = ParityResponder::new(BitString::zeros(100), 0);
        let q = ParityQuery {
            layout: Layout::Pass(0),
            start: 50,
            end: 101,
        };
        assert_eq!(r.answer(&[q]), Err(CascadeError::BadQuery(q)));
        assert_eq!(r.leaked(), 0);
    }
}
