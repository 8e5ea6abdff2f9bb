//! Framed peer protocol, timetag dump files and key files.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! 0..4   magic "PLNK"
//! 4      version
//! 5      type
//! 6..10  block_id u32
//! 10..14 payload_len u32
//! 14..   payload
//! ```

use crate::bits::BitString;
use crate::cascade::{Layout, ParityQuery};
use crate::photonsim::TimeTag;
use std::io::{self, Read, Write};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PLNK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const MAX_PAYLOAD: u32 = 512 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(u32),
    #[error("malformed {kind} payload: {detail}")]
    Malformed { kind: &'static str, detail: String },
    #[error("unexpected message {got:?} (expected {expected})")]
    Unexpected { got: MsgType, expected: &'static str },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    Timetags = 1,
    SyncResult = 2,
    BasisReveal = 3,
    Parity = 4,
    PaSeed = 5,
    KeyDigest = 6,
    BlockAbort = 7,
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;
    fn try_from(v: u8) -> Result<Self, WireError> {
        use MsgType::*;
        Ok(match v {
            0 => Hello,
            1 => Timetags,
            2 => SyncResult,
            3 => BasisReveal,
            4 => Parity,
            5 => PaSeed,
            6 => KeyDigest,
            7 => BlockAbort,
            t => return Err(WireError::UnknownType(t)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub block_id: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: MsgType,
    pub block_id: u32,
    pub payload_len: u32,
}

impl Header {
    pub fn parse(b: &[u8; HEADER_LEN]) -> Result<Self, WireError> {
        let magic: [u8; 4] = b[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if b[4] != VERSION {
            return Err(WireError::BadVersion(b[4]));
        }
        let msg_type = MsgType::try_from(b[5])?;
        let block_id = u32::from_le_bytes(b[6..10].try_into().unwrap());
        let payload_len = u32::from_le_bytes(b[10..14].try_into().unwrap());
        if payload_len > MAX_PAYLOAD {
            return Err(WireError::TooLarge(payload_len));
        }
        Ok(Self {
            msg_type,
            block_id,
            payload_len,
        })
    }
}

impl Frame {
    pub fn new(msg_type: MsgType, block_id: u32, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            block_id,
            payload,
        }
    }

    pub fn header_bytes(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = VERSION;
        h[5] = self.msg_type as u8;
        h[6..10].copy_from_slice(&self.block_id.to_le_bytes());
        h[10..14].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(HEADER_LEN + self.payload.len());
        v.extend_from_slice(&self.header_bytes());
        v.extend_from_slice(&self.payload);
        v
    }

    /// Decodes one frame from the front of `buf`, returning it and the bytes
    /// consumed, or `None` if `buf` holds less than a whole frame.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, WireError> {
        if buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let h = Header::parse(buf[..HEADER_LEN].try_into().unwrap())?;
        let total = HEADER_LEN + h.payload_len as usize;
        if buf.len() < total {
            return Ok(None);
        }
        Ok(Some((
            Frame::new(h.msg_type, h.block_id, buf[HEADER_LEN..total].to_vec()),
            total,
        )))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.header_bytes())?;
        w.write_all(&self.payload)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame, WireError> {
        let mut h = [0u8; HEADER_LEN];
        r.read_exact(&mut h)?;
        let h = Header::parse(&h)?;
        let mut payload = vec![0u8; h.payload_len as usize];
        r.read_exact(&mut payload)?;
        Ok(Frame::new(h.msg_type, h.block_id, payload))
    }
}

/// Little-endian cursor over a payload.
struct Reader<'a> {
    buf: &'a [u8],
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], kind: &'static str) -> Self {
        Self { buf, kind }
    }

    fn err(&self, detail: impl Into<String>) -> WireError {
        WireError::Malformed {
            kind: self.kind,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(self.err(format!("truncated: need {n} more bytes, have {}", self.buf.len())));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bits(&mut self) -> Result<BitString, WireError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.div_ceil(8))?;
        BitString::from_bytes(bytes, n).ok_or_else(|| self.err("bit string length"))
    }

    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(self.err(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

fn put_bits(out: &mut Vec<u8>, bits: &BitString) {
    out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
    out.extend_from_slice(&bits.to_bytes());
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Alice = 0,
    Bob = 1,
}

/// Session parameters both peers must agree on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hello {
    pub role: Role,
    pub block_s: f64,
    pub window_ticks: u64,
    pub channel_map: [u8; 4],
    /// Digest of the settings that must match beyond the above.
    pub config_digest: u64,
    pub next_block_id: u32,
    /// Highest block whose key this side has written, if any.
    pub last_committed: Option<u32>,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        let mut v = vec![self.role as u8];
        v.extend_from_slice(&self.block_s.to_le_bytes());
        v.extend_from_slice(&self.window_ticks.to_le_bytes());
        v.extend_from_slice(&self.channel_map);
        v.extend_from_slice(&self.config_digest.to_le_bytes());
        v.extend_from_slice(&self.next_block_id.to_le_bytes());
        v.extend_from_slice(&self.last_committed.unwrap_or(u32::MAX).to_le_bytes());
        v
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "HELLO");
        let role = match r.u8()? {
            0 => Role::Alice,
            1 => Role::Bob,
            x => return Err(r.err(format!("role {x}"))),
        };
        let h = Self {
            role,
            block_s: r.f64()?,
            window_ticks: r.u64()?,
            channel_map: r.take(4)?.try_into().unwrap(),
            config_digest: r.u64()?,
            next_block_id: r.u32()?,
            last_committed: Some(r.u32()?).filter(|&b| b != u32::MAX),
        };
        r.finish()?;
        Ok(h)
    }
}

/// TIMETAGS payload: raw 64-bit records, ascending.
pub fn encode_timetags(tags: &[TimeTag]) -> Vec<u8> {
    let mut v = Vec::with_capacity(tags.len() * 8);
    for t in tags {
        v.extend_from_slice(&t.raw().to_le_bytes());
    }
    v
}

pub fn decode_timetags(p: &[u8]) -> Result<Vec<TimeTag>, WireError> {
    let bad = |d: &str| WireError::Malformed {
        kind: "TIMETAGS",
        detail: d.into(),
    };
    if p.len() % 8 != 0 {
        return Err(bad("length not a multiple of 8"));
    }
    let tags: Vec<TimeTag> = p
        .chunks_exact(8)
        .map(|c| TimeTag::from_raw(u64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if !crate::photonsim::is_sorted(&tags) {
        return Err(bad("records not sorted"));
    }
    Ok(tags)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncResult {
    pub offset_ticks: i64,
    pub window_ticks: u64,
    pub cascade_seed: u64,
    pub singles_b: u64,
    pub accidental_estimate: f64,
    /// Alice tag index of each coincidence, in coincidence order.
    pub a_indices: Vec<u32>,
}

impl SyncResult {
    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(44 + 4 * self.a_indices.len());
        v.extend_from_slice(&self.offset_ticks.to_le_bytes());
        v.extend_from_slice(&self.window_ticks.to_le_bytes());
        v.extend_from_slice(&self.cascade_seed.to_le_bytes());
        v.extend_from_slice(&self.singles_b.to_le_bytes());
        v.extend_from_slice(&self.accidental_estimate.to_le_bytes());
        v.extend_from_slice(&(self.a_indices.len() as u32).to_le_bytes());
        for i in &self.a_indices {
            v.extend_from_slice(&i.to_le_bytes());
        }
        v
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "SYNC_RESULT");
        let offset_ticks = r.i64()?;
        let window_ticks = r.u64()?;
        let cascade_seed = r.u64()?;
        let singles_b = r.u64()?;
        let accidental_estimate = r.f64()?;
        let n = r.u32()? as usize;
        let raw = r.take(n * 4)?;
        r.finish()?;
        Ok(Self {
            offset_ticks,
            window_ticks,
            cascade_seed,
            singles_b,
            accidental_estimate,
            a_indices: raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }
}

/// BASIS_REVEAL payload: bit count then packed bases, DA = 1.
pub fn encode_bases(bases: &BitString) -> Vec<u8> {
    let mut v = Vec::new();
    put_bits(&mut v, bases);
    v
}

pub fn decode_bases(p: &[u8]) -> Result<BitString, WireError> {
    let mut r = Reader::new(p, "BASIS_REVEAL");
    let b = r.bits()?;
    r.finish()?;
    Ok(b)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParityMsg {
    Queries(Vec<ParityQuery>),
    Answers(BitString),
}

impl ParityMsg {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            ParityMsg::Queries(qs) => {
                let mut v = Vec::with_capacity(5 + 13 * qs.len());
                v.push(0);
                v.extend_from_slice(&(qs.len() as u32).to_le_bytes());
                for q in qs {
                    let (tag, idx) = match q.layout {
                        Layout::Pass(p) => (0u8, p as u32),
                        Layout::Biconf(r) => (1u8, r),
                    };
                    v.push(tag);
                    v.extend_from_slice(&idx.to_le_bytes());
                    v.extend_from_slice(&q.start.to_le_bytes());
                    v.extend_from_slice(&q.end.to_le_bytes());
                }
                v
            }
            ParityMsg::Answers(bits) => {
                let mut v = vec![1];
                put_bits(&mut v, bits);
                v
            }
        }
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "PARITY");
        let msg = match r.u8()? {
            0 => {
                let n = r.u32()? as usize;
                if n > p.len() / 13 {
                    return Err(r.err("query count exceeds payload"));
                }
                let mut qs = Vec::with_capacity(n);
                for _ in 0..n {
                    let tag = r.u8()?;
                    let idx = r.u32()?;
                    let layout = match tag {
                        0 if idx < 256 => Layout::Pass(idx as u8),
                        1 => Layout::Biconf(idx),
                        _ => return Err(r.err(format!("layout {tag}/{idx}"))),
                    };
                    qs.push(ParityQuery {
                        layout,
                        start: r.u32()?,
                        end: r.u32()?,
                    });
                }
                ParityMsg::Queries(qs)
            }
            1 => ParityMsg::Answers(r.bits()?),
            k => return Err(r.err(format!("kind {k}"))),
        };
        r.finish()?;
        Ok(msg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaSeedMsg {
    pub sifted_len: u32,
    pub final_len: u32,
    pub qber: f64,
    pub leaked_bits: u32,
    pub seed: BitString,
}

impl PaSeedMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.sifted_len.to_le_bytes());
        v.extend_from_slice(&self.final_len.to_le_bytes());
        v.extend_from_slice(&self.qber.to_le_bytes());
        v.extend_from_slice(&self.leaked_bits.to_le_bytes());
        put_bits(&mut v, &self.seed);
        v
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "PA_SEED");
        let m = Self {
            sifted_len: r.u32()?,
            final_len: r.u32()?,
            qber: r.f64()?,
            leaked_bits: r.u32()?,
            seed: r.bits()?,
        };
        r.finish()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DigestStage {
    Reconciled = 0,
    Final = 1,
    /// Sent by Bob once his key record is written.
    Committed = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyDigest {
    pub stage: DigestStage,
    pub digest: u64,
}

impl KeyDigest {
    pub fn encode(&self) -> Vec<u8> {
        let mut v = vec![self.stage as u8];
        v.extend_from_slice(&self.digest.to_le_bytes());
        v
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "KEY_DIGEST");
        let stage = match r.u8()? {
            0 => DigestStage::Reconciled,
            1 => DigestStage::Final,
            2 => DigestStage::Committed,
            s => return Err(r.err(format!("stage {s}"))),
        };
        let d = Self {
            stage,
            digest: r.u64()?,
        };
        r.finish()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortReason {
    SyncFailed = 1,
    TooFewSifted = 2,
    ReconciliationFailed = 3,
    DigestMismatch = 4,
    ProtocolError = 5,
    Shutdown = 6,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockAbort {
    pub reason: AbortReason,
    pub detail: String,
}

impl BlockAbort {
    pub fn encode(&self) -> Vec<u8> {
        let mut v = vec![self.reason as u8];
        v.extend_from_slice(self.detail.as_bytes());
        v
    }

    pub fn decode(p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(p, "BLOCK_ABORT");
        use AbortReason::*;
        let reason = match r.u8()? {
            1 => SyncFailed,
            2 => TooFewSifted,
            3 => ReconciliationFailed,
            4 => DigestMismatch,
            5 => ProtocolError,
            6 => Shutdown,
            x => return Err(r.err(format!("reason {x}"))),
        };
        Ok(Self {
            reason,
            detail: String::from_utf8_lossy(r.buf).into_owned(),
        })
    }
}

/// Raw timetag dump: consecutive little-endian u64 records.
pub fn write_timetags<W: Write>(w: &mut W, tags: &[TimeTag]) -> io::Result<()> {
    w.write_all(&encode_timetags(tags))
}

pub fn read_timetags<R: Read>(r: &mut R) -> Result<Vec<TimeTag>, WireError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_timetags(&buf)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRecord {
    pub block_id: u32,
    pub key: BitString,
}

/// Key file record: block_id u32, m u32, ⌈m/8⌉ key bytes LSB-first.
pub fn write_key_record<W: Write>(w: &mut W, rec: &KeyRecord) -> io::Result<()> {
    w.write_all(&rec.block_id.to_le_bytes())?;
    w.write_all(&(rec.key.len() as u32).to_le_bytes())?;
    w.write_all(&rec.key.to_bytes())
}

pub fn read_key_file<R: Read>(r: &mut R) -> Result<Vec<KeyRecord>, WireError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut rd = Reader::new(&buf, "key file");
    let mut out = Vec::new();
    while !rd.buf.is_empty() {
        let block_id = rd.u32()?;
        let m = rd.u32()? as usize;
        let bytes = rd.take(m.div_ceil(8))?;
        let key = BitString::from_bytes(bytes, m).ok_or_else(|| rd.err("bit string length"))?;
        out.push(KeyRecord { block_id, key });
    }
    Ok(out)
}
