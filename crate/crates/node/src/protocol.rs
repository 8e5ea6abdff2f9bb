//! Lock-step per-block protocol between Alice and Bob.
//!
//! ```text
//! Alice                                Bob
//!   TIMETAGS (times only)      ──▶
//!                              ◀──     SYNC_RESULT (offset, matched indices, cascade seed)
//!   BASIS_REVEAL               ──▶
//!                              ◀──     BASIS_REVEAL
//!                              ◀──     PARITY queries      ┐ until the
//!   PARITY answers             ──▶                         ┘ corrector is done
//!                              ◀──     KEY_DIGEST reconciled
//!   KEY_DIGEST reconciled      ──▶
//!                              ◀──     PA_SEED
//!                              ◀──     KEY_DIGEST final
//!   KEY_DIGEST final           ──▶
//!                              ◀──     KEY_DIGEST committed
//! ```
//!
//! Either side may answer with BLOCK_ABORT where it would otherwise reply.
//! Bob writes his key before sending the commit; Alice holds hers as pending
//! until the commit arrives, and settles it against Bob's HELLO after a
//! reconnect so the key files never diverge.

use crate::error::NodeError;
use crate::output::Outputs;
use crate::source::TagSource;
use crate::status::SharedStatus;
use crate::transport::Transport;
use plink_core::bits::BitString;
use plink_core::cascade::{Corrector, ParityResponder, Step};
use plink_core::config::RunConfig;
use plink_core::metrics::{BlockPipelineState, Stage};
use plink_core::photonsim::{block_seed, TimeTag};
use plink_core::privamp::{secure_length, seed_len, toeplitz_hash, PaSeed};
use plink_core::sifting::{matching_positions, sifted_bits, BasisReveal};
use plink_core::timing::{accidental_estimate, estimate_offset, find_coincidences, optimize_window};
use plink_core::wire::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use tokio::io::{AsyncRead, AsyncWrite};
use tracing::{debug, info, warn};

pub const CHANNEL_MAP: [u8; 4] = [0, 1, 2, 3];
const BOB_RNG_SALT: u64 = 0xb0b5_eed5_0000_0001;

/// Test hooks.
#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// Fraction of Bob's sifted bits flipped before reconciliation.
    pub flip_sifted_fraction: f64,
}

enum Msg {
    Frame(Frame),
    Abort(BlockAbort),
}

/// One side of the link.
pub struct Peer {
    pub role: Role,
    pub cfg: Arc<RunConfig>,
    source: Arc<dyn TagSource>,
    pub out: Outputs,
    pub faults: Faults,
    qber_ref: f64,
    next_block: u32,
    pending: Option<(BlockPipelineState, KeyRecord)>,
    status: Option<SharedStatus>,
    /// Sifted and reconciled keys, kept only for transcript audits.
    pub captured_secrets: Option<Vec<BitString>>,
}

fn join_err(e: tokio::task::JoinError) -> NodeError {
    NodeError::Output(format!("worker task failed: {e}"))
}

impl Peer {
    pub fn new(role: Role, cfg: Arc<RunConfig>, source: Arc<dyn TagSource>, out: Outputs) -> Self {
        let qber_ref = cfg.protocol.cascade.qber_prior;
        Self {
            role,
            cfg,
            source,
            out,
            faults: Faults::default(),
            qber_ref,
            next_block: 0,
            pending: None,
            status: None,
            captured_secrets: None,
        }
    }

    pub fn with_status(mut self, status: SharedStatus) -> Self {
        self.status = Some(status);
        self
    }

    pub fn next_block(&self) -> u32 {
        self.next_block
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Gives up on a key still awaiting Bob's commit.
    pub fn abandon_pending(&mut self) -> Result<(), NodeError> {
        match self.pending.take() {
            Some((mut st, _)) => {
                st.metrics.stage = Stage::Aborted;
                st.set_final_bits(0);
                self.finish_block(st)
            }
            None => Ok(()),
        }
    }

    fn hello(&self) -> Hello {
        Hello {
            role: self.role,
            block_s: self.cfg.protocol.block_s,
            window_ticks: self.cfg.protocol.window_ticks,
            channel_map: CHANNEL_MAP,
            config_digest: self.cfg.peer_digest(),
            next_block_id: self.next_block,
            last_committed: self.out.last_committed(),
        }
    }

    /// Exchanges HELLO and returns the agreed first block.
    pub async fn handshake<S>(&mut self, t: &mut Transport<S>) -> Result<u32, NodeError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send,
    {
        let mine = self.hello();
        t.send(Frame::new(MsgType::Hello, 0, mine.encode())).await?;
        let f = t.recv().await?;
        if f.msg_type != MsgType::Hello {
            return Err(NodeError::Handshake(format!("expected HELLO, got {:?}", f.msg_type)));
        }
        let theirs = Hello::decode(&f.payload).map_err(|e| NodeError::Handshake(e.to_string()))?;
        let mismatch = |what: &str| Err(NodeError::Handshake(format!("{what} differs from peer")));
        if theirs.role == mine.role {
            return Err(NodeError::Handshake(format!("both peers claim role {:?}", mine.role)));
        }
        if theirs.block_s != mine.block_s {
            return mismatch("block duration");
        }
        if theirs.window_ticks != mine.window_ticks {
            return mismatch("coincidence window");
        }
        if theirs.channel_map != mine.channel_map {
            return mismatch("channel map");
        }
        if theirs.config_digest != mine.config_digest {
            return mismatch("run configuration");
        }
        if let Some((mut st, rec)) = self.pending.take() {
            if theirs.last_committed == Some(rec.block_id) {
                self.out.commit_key(&rec)?;
                info!(block = rec.block_id, "pending key committed after reconnect");
            } else {
                st.metrics.stage = Stage::Aborted;
                st.set_final_bits(0);
            }
            self.finish_block(st)?;
        }
        let start = mine.next_block_id.max(theirs.next_block_id);
        // Blocks the peer already gave up on count as aborted here too.
        for id in mine.next_block_id..start {
            let d = self.cfg.protocol.block_s;
            let mut st = BlockPipelineState::new(id, id as f64 * d, d);
            st.advance(Stage::Aborted).ok();
            self.finish_block(st)?;
        }
        self.next_block = start;
        Ok(start)
    }

    /// Handshake, then blocks until `total_blocks` is reached.
    pub async fn session<S>(&mut self, t: &mut Transport<S>, total_blocks: Option<u32>) -> Result<(), NodeError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send,
    {
        let mut next = self.handshake(t).await?;
        while total_blocks.map_or(true, |n| next < n) {
            self.run_block(t, next).await?;
            next += 1;
        }
        Ok(())
    }

    pub async fn run_block<S>(&mut self, t: &mut Transport<S>, block_id: u32) -> Result<(), NodeError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send,
    {
        self.next_block = block_id + 1;
        if let Some(s) = &self.status {
            s.write().unwrap().current_block = Some(block_id);
        }
        let source = self.source.clone();
        let role = self.role;
        let (spec, tags) = tokio::task::spawn_blocking(move || source.block(role, block_id))
            .await
            .map_err(join_err)??;
        let mut st = BlockPipelineState::new(block_id, spec.start_s, spec.duration_s);
        let r = match self.role {
            Role::Alice => self.alice_block(t, &mut st, tags).await,
            Role::Bob => self.bob_block(t, &mut st, tags).await,
        };
        match r {
            Ok(()) => self.finish_block(st),
            Err(e) => {
                warn!(block = block_id, role = ?self.role, error = %e, "block interrupted");
                let held = self.pending.as_ref().is_some_and(|(_, k)| k.block_id == block_id);
                if !held {
                    st.advance(Stage::Aborted).ok();
                    self.finish_block(st)?;
                }
                Err(e)
            }
        }
    }

    fn finish_block(&mut self, st: BlockPipelineState) -> Result<(), NodeError> {
        debug!(block = st.block_id, role = ?self.role, stage = ?st.stage(), bits = st.metrics.final_bits, "block finished");
        if let Some(s) = &self.status {
            s.write().unwrap().record(&st.metrics);
        }
        self.out.log_block(&st)
    }

    fn abort_local(st: &mut BlockPipelineState, why: &str) -> Result<(), NodeError> {
        debug!(block = st.block_id, why, "block aborted");
        st.advance(Stage::Aborted)
            .map_err(|e| NodeError::protocol(e.to_string()))
    }

    async fn send_abort<S>(t: &mut Transport<S>, st: &mut BlockPipelineState, reason: AbortReason, detail: String) -> Result<(), NodeError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send,
    {
        t.send(Frame::new(MsgType::BlockAbort, st.block_id, BlockAbort { reason, detail: detail.clone() }.encode()))
            .await?;
        Self::abort_local(st, &detail)
    }

    async fn recv_for<S>(t: &mut Transport<S>, block_id: u32, want: &[MsgType]) -> Result<Msg, NodeError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send,
    {
        let f = t.recv().await?;
        if f.block_id != block_id {
            return Err(NodeError::protocol(format!(
                "{:?} for block {} while in block {block_id}",
                f.msg_type, f.block_id
            )));
        }
        if f.msg_type == MsgType::BlockAbort {
            return Ok(Msg::Abort(BlockAbort::decode(&f.payload)?));
        }
        if !want.contains(&f.msg_type) {
            return Err(NodeError::protocol(format!("unexpected {:?}, wanted {want:?}", f.msg_type)));
        }
        Ok(Msg::Frame(f))
    }

    fn capture(&mut self, bits: &BitString) {
        if let Some(c) = &mut self.captured_secrets {
            c.push(bits.clone());
        }
    }

    fn adv(st: &mut BlockPipelineState, to: Stage) -> Result<(), NodeError> {
        st.advance(to).map_err(|e| NodeError::protocol(e.to_string()))
    }

    async fn alice_block<S>(&mut self, t: &mut Transport<S>, st: &mut BlockPipelineState, tags: Vec<TimeTag>) -> Result<(), NodeError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send,
    {
        let id = st.block_id;
        st.metrics.singles_a = tags.len() as u64;
        let times: Vec<TimeTag> = tags.iter().map(|t| t.time_only()).collect();
        t.send(Frame::new(MsgType::Timetags, id, encode_timetags(&times))).await?;
        drop(times);

        Self::adv(st, Stage::Syncing)?;
        let sr = match Self::recv_for(t, id, &[MsgType::SyncResult]).await? {
            Msg::Abort(a) => return Self::abort_local(st, &a.detail),
            Msg::Frame(f) => SyncResult::decode(&f.payload)?,
        };
        st.metrics.singles_b = sr.singles_b;
        st.metrics.coincidences = sr.a_indices.len() as u64;
        st.metrics.accidental_estimate = sr.accidental_estimate;
        let mut seen = vec![false; tags.len()];
        for &i in &sr.a_indices {
            match seen.get_mut(i as usize) {
                Some(s) if !*s => *s = true,
                _ => return Err(NodeError::protocol(format!("bad matched index {i}"))),
            }
        }

        Self::adv(st, Stage::Sifting)?;
        let mine: Vec<TimeTag> = sr.a_indices.iter().map(|&i| tags[i as usize]).collect();
        drop(tags);
        let my_bases = BasisReveal::from_tags(&mine).map_err(|e| NodeError::protocol(e.to_string()))?;
        t.send(Frame::new(MsgType::BasisReveal, id, encode_bases(&my_bases.to_bits())))
            .await?;
        let theirs = match Self::recv_for(t, id, &[MsgType::BasisReveal]).await? {
            Msg::Abort(a) => return Self::abort_local(st, &a.detail),
            Msg::Frame(f) => BasisReveal::from_bits(&decode_bases(&f.payload)?),
        };
        let keep = matching_positions(&my_bases, &theirs).map_err(|e| NodeError::protocol(e.to_string()))?;
        let key = sifted_bits(&mine, &keep).map_err(|e| NodeError::protocol(e.to_string()))?;
        st.metrics.sifted = key.len() as u64;
        if key.len() < self.cfg.protocol.min_sifted {
            return Self::abort_local(st, "too few sifted bits");
        }
        self.capture(&key);

        Self::adv(st, Stage::Reconciling)?;
        let mut resp = ParityResponder::new(key, sr.cascade_seed);
        loop {
            match Self::recv_for(t, id, &[MsgType::Parity, MsgType::KeyDigest]).await? {
                Msg::Abort(a) => return Self::abort_local(st, &a.detail),
                Msg::Frame(f) if f.msg_type == MsgType::Parity => match ParityMsg::decode(&f.payload)? {
                    ParityMsg::Queries(qs) => {
                        let answers = resp.answer(&qs).map_err(|e| NodeError::protocol(e.to_string()))?;
                        let bits: BitString = answers.into_iter().collect();
                        t.send(Frame::new(MsgType::Parity, id, ParityMsg::Answers(bits).encode()))
                            .await?;
                    }
                    ParityMsg::Answers(_) => return Err(NodeError::protocol("Alice received parity answers")),
                },
                Msg::Frame(f) => {
                    let d = KeyDigest::decode(&f.payload)?;
                    if d.stage != DigestStage::Reconciled {
                        return Err(NodeError::protocol("expected reconciled digest"));
                    }
                    let own = resp.key().digest64();
                    if d.digest != own {
                        let detail = "reconciled digests differ".to_string();
                        return Self::send_abort(t, st, AbortReason::ReconciliationFailed, detail).await;
                    }
                    t.send(Frame::new(
                        MsgType::KeyDigest,
                        id,
                        KeyDigest {
                            stage: DigestStage::Reconciled,
                            digest: own,
                        }
                        .encode(),
                    ))
                    .await?;
                    break;
                }
            }
        }
        st.metrics.leaked = resp.leaked() as u64;

        Self::adv(st, Stage::Amplifying)?;
        let pa = match Self::recv_for(t, id, &[MsgType::PaSeed]).await? {
            Msg::Abort(a) => return Self::abort_local(st, &a.detail),
            Msg::Frame(f) => PaSeedMsg::decode(&f.payload)?,
        };
        let n = resp.key().len();
        let expect_m = secure_length(n, pa.qber, resp.leaked(), self.cfg.protocol.pa.margin_bits);
        if pa.sifted_len as usize != n
            || pa.leaked_bits as usize != resp.leaked()
            || pa.final_len as usize != expect_m
            || pa.seed.len() != seed_len(n, expect_m)
            || !(0.0..=0.5).contains(&pa.qber)
        {
            let detail = format!(
                "PA parameters disagree: n {} / {n}, leaked {} / {}, m {} / {expect_m}",
                pa.sifted_len,
                pa.leaked_bits,
                resp.leaked(),
                pa.final_len
            );
            return Self::send_abort(t, st, AbortReason::ProtocolError, detail).await;
        }
        st.metrics.qber = pa.qber;
        self.capture(resp.key());
        let m = expect_m;
        if m == 0 {
            st.set_final_bits(0);
            return Self::adv(st, Stage::Done);
        }
        let final_key = toeplitz_hash(resp.key(), &PaSeed { bits: pa.seed }, m).map_err(|e| NodeError::protocol(e.to_string()))?;
        self.capture(&final_key);
        let own = final_key.digest64();
        match Self::recv_for(t, id, &[MsgType::KeyDigest]).await? {
            Msg::Abort(a) => return Self::abort_local(st, &a.detail),
            Msg::Frame(f) => {
                let d = KeyDigest::decode(&f.payload)?;
                if d.stage != DigestStage::Final || d.digest != own {
                    return Self::send_abort(t, st, AbortReason::DigestMismatch, "final digests differ".into()).await;
                }
            }
        }
        t.send(Frame::new(
            MsgType::KeyDigest,
            id,
            KeyDigest {
                stage: DigestStage::Final,
                digest: own,
            }
            .encode(),
        ))
        .await?;

        st.set_final_bits(m as u64);
        let rec = KeyRecord {
            block_id: id,
            key: final_key,
        };
        let mut held = st.clone();
        held.advance(Stage::Done).ok();
        self.pending = Some((held, rec));
        match Self::recv_for(t, id, &[MsgType::KeyDigest]).await? {
            Msg::Abort(a) => {
                self.pending = None;
                Self::abort_local(st, &a.detail)
            }
            Msg::Frame(f) => {
                let d = KeyDigest::decode(&f.payload)?;
                if d.stage != DigestStage::Committed || d.digest != own {
                    return Err(NodeError::protocol("bad commit"));
                }
                let (_, rec) = self.pending.take().expect("pending set above");
                self.out.commit_key(&rec)?;
                Self::adv(st, Stage::Done)
            }
        }
    }

    async fn bob_block<S>(&mut self, t: &mut Transport<S>, st: &mut BlockPipelineState, tags: Vec<TimeTag>) -> Result<(), NodeError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send,
    {
        let id = st.block_id;
        st.metrics.singles_b = tags.len() as u64;
        let alice = match Self::recv_for(t, id, &[MsgType::Timetags]).await? {
            Msg::Abort(a) => return Self::abort_local(st, &a.detail),
            Msg::Frame(f) => decode_timetags(&f.payload)?,
        };
        st.metrics.singles_a = alice.len() as u64;

        Self::adv(st, Stage::Syncing)?;
        let cfg = self.cfg.clone();
        let qber_ref = self.qber_ref;
        let work = tokio::task::spawn_blocking(move || {
            let p = &cfg.protocol;
            let sync = estimate_offset(&alice, &tags, &p.sync)?;
            let window = if p.optimize_window {
                optimize_window(&alice, &tags, sync.offset_ticks, &p.candidate_windows, qber_ref)?.window_ticks
            } else {
                p.window_ticks
            };
            let pairs = find_coincidences(&alice, &tags, sync.offset_ticks, window);
            let acc = accidental_estimate(&alice, &tags, sync.offset_ticks, window);
            Ok::<_, plink_core::timing::TimingError>((sync, window, pairs, acc))
        })
        .await
        .map_err(join_err)?;
        let (sync, window, pairs, acc) = match work {
            Ok(w) => w,
            Err(e) => return Self::send_abort(t, st, AbortReason::SyncFailed, e.to_string()).await,
        };
        debug!(block = id, offset = sync.offset_ticks, window, pairs = pairs.len(), "synchronized");
        st.metrics.coincidences = pairs.len() as u64;
        st.metrics.accidental_estimate = acc;

        let mut rng = ChaCha8Rng::seed_from_u64(block_seed(self.cfg.seed ^ BOB_RNG_SALT, id));
        let cascade_seed: u64 = rng.gen();
        let sr = SyncResult {
            offset_ticks: sync.offset_ticks,
            window_ticks: window,
            cascade_seed,
            singles_b: st.metrics.singles_b,
            accidental_estimate: acc,
            a_indices: pairs.iter().map(|p| p.a_index).collect(),
        };
        t.send(Frame::new(MsgType::SyncResult, id, sr.encode())).await?;

        Self::adv(st, Stage::Sifting)?;
        let b_tags: Vec<TimeTag> = pairs.iter().map(|p| p.b_tag).collect();
        let mine = BasisReveal::from_tags(&b_tags).map_err(|e| NodeError::protocol(e.to_string()))?;
        let theirs = match Self::recv_for(t, id, &[MsgType::BasisReveal]).await? {
            Msg::Abort(a) => return Self::abort_local(st, &a.detail),
            Msg::Frame(f) => BasisReveal::from_bits(&decode_bases(&f.payload)?),
        };
        if theirs.bases.len() != b_tags.len() {
            return Err(NodeError::protocol("basis reveal length differs from coincidences"));
        }
        t.send(Frame::new(MsgType::BasisReveal, id, encode_bases(&mine.to_bits())))
            .await?;
        let keep = matching_positions(&theirs, &mine).map_err(|e| NodeError::protocol(e.to_string()))?;
        let mut key = sifted_bits(&b_tags, &keep).map_err(|e| NodeError::protocol(e.to_string()))?;
        st.metrics.sifted = key.len() as u64;
        if key.len() < self.cfg.protocol.min_sifted {
            return Self::abort_local(st, "too few sifted bits");
        }
        if self.faults.flip_sifted_fraction > 0.0 {
            for i in 0..key.len() {
                if rng.gen::<f64>() < self.faults.flip_sifted_fraction {
                    key.flip(i);
                }
            }
        }
        self.capture(&key);

        Self::adv(st, Stage::Reconciling)?;
        let mut c = Corrector::new(key, &self.cfg.protocol.cascade, self.qber_ref, cascade_seed)
            .map_err(|e| NodeError::protocol(e.to_string()))?;
        while let Step::Ask(qs) = c.step() {
            let n = qs.len();
            t.send(Frame::new(MsgType::Parity, id, ParityMsg::Queries(qs).encode()))
                .await?;
            let answers = match Self::recv_for(t, id, &[MsgType::Parity]).await? {
                Msg::Abort(a) => return Self::abort_local(st, &a.detail),
                Msg::Frame(f) => match ParityMsg::decode(&f.payload)? {
                    ParityMsg::Answers(b) if b.len() == n => b.to_bools(),
                    _ => return Err(NodeError::protocol("bad parity answers")),
                },
            };
            c.absorb(&answers).map_err(|e| NodeError::protocol(e.to_string()))?;
        }
        let res = c.finish();
        let own = res.corrected_bits.digest64();
        t.send(Frame::new(
            MsgType::KeyDigest,
            id,
            KeyDigest {
                stage: DigestStage::Reconciled,
                digest: own,
            }
            .encode(),
        ))
        .await?;
        match Self::recv_for(t, id, &[MsgType::KeyDigest]).await? {
            Msg::Abort(a) => return Self::abort_local(st, &a.detail),
            Msg::Frame(f) => {
                let d = KeyDigest::decode(&f.payload)?;
                if d.stage != DigestStage::Reconciled || d.digest != own {
                    return Err(NodeError::protocol("peer confirmed a different reconciled digest"));
                }
            }
        }
        let n = res.corrected_bits.len();
        st.metrics.leaked = res.leaked_bits as u64;
        st.metrics.qber = res.qber_estimate;
        self.qber_ref = res.qber_estimate;
        self.capture(&res.corrected_bits);

        Self::adv(st, Stage::Amplifying)?;
        let m = secure_length(n, res.qber_estimate, res.leaked_bits, self.cfg.protocol.pa.margin_bits);
        let seed = PaSeed::random(n, m, &mut rng);
        let pa = PaSeedMsg {
            sifted_len: n as u32,
            final_len: m as u32,
            qber: res.qber_estimate,
            leaked_bits: res.leaked_bits as u32,
            seed: seed.bits.clone(),
        };
        t.send(Frame::new(MsgType::PaSeed, id, pa.encode())).await?;
        if m == 0 {
            st.set_final_bits(0);
            return Self::adv(st, Stage::Done);
        }
        let final_key = toeplitz_hash(&res.corrected_bits, &seed, m).map_err(|e| NodeError::protocol(e.to_string()))?;
        self.capture(&final_key);
        let own = final_key.digest64();
        let digest = |stage| KeyDigest { stage, digest: own }.encode();
        t.send(Frame::new(MsgType::KeyDigest, id, digest(DigestStage::Final))).await?;
        match Self::recv_for(t, id, &[MsgType::KeyDigest]).await? {
            Msg::Abort(a) => return Self::abort_local(st, &a.detail),
            Msg::Frame(f) => {
                let d = KeyDigest::decode(&f.payload)?;
                if d.stage != DigestStage::Final || d.digest != own {
                    return Self::send_abort(t, st, AbortReason::DigestMismatch, "final digests differ".into()).await;
                }
            }
        }
        self.out.commit_key(&KeyRecord {
            block_id: id,
            key: final_key,
        })?;
        st.set_final_bits(m as u64);
        t.send(Frame::new(MsgType::KeyDigest, id, digest(DigestStage::Committed))).await?;
        Self::adv(st, Stage::Done)
    }
}
