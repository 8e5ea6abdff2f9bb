//! Structural check that a recorded transcript carries no key material.

use crate::transport::Direction;
use plink_core::bits::BitString;
use plink_core::wire::*;
use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub frames: usize,
    pub bytes: usize,
    pub by_type: HashMap<String, usize>,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.violations.is_empty()
    }
}

const WINDOW: usize = 8;

/// Every 64-bit window of each secret, at all eight bit alignments.
fn secret_windows(secrets: &[BitString]) -> HashSet<[u8; WINDOW]> {
    let mut set = HashSet::new();
    for s in secrets {
        for shift in 0..8.min(s.len()) {
            let tail: BitString = s.iter().skip(shift).collect();
            let bytes = tail.to_bytes();
            let full = tail.len() / 8;
            for w in bytes[..full].windows(WINDOW) {
                set.insert(w.try_into().unwrap());
            }
        }
    }
    set
}

/// Decodes every frame by type, checks that TIMETAGS carry no channel bits,
/// and searches all payloads for any 64-bit run of any secret.
pub fn audit_transcript(frames: &[(Direction, Frame)], secrets: &[BitString]) -> AuditReport {
    let windows = secret_windows(secrets);
    let mut r = AuditReport::default();
    let bad = |r: &mut AuditReport, i: usize, f: &Frame, what: String| {
        r.violations
            .push(format!("frame {i} ({:?}, block {}): {what}", f.msg_type, f.block_id))
    };
    for (i, (_, f)) in frames.iter().enumerate() {
        r.frames += 1;
        r.bytes += HEADER_LEN + f.payload.len();
        *r.by_type.entry(format!("{:?}", f.msg_type)).or_default() += 1;
        let p = &f.payload;
        let decoded = match f.msg_type {
            MsgType::Hello => Hello::decode(p).map(|_| ()),
            MsgType::Timetags => decode_timetags(p).map(|tags| {
                if let Some(t) = tags.iter().find(|t| t.channel() != 0) {
                    bad(&mut r, i, f, format!("time tag {:#x} carries channel bits", t.raw()));
                }
            }),
            MsgType::SyncResult => SyncResult::decode(p).map(|_| ()),
            MsgType::BasisReveal => decode_bases(p).map(|_| ()),
            MsgType::Parity => ParityMsg::decode(p).map(|_| ()),
            MsgType::PaSeed => PaSeedMsg::decode(p).map(|_| ()),
            MsgType::KeyDigest => KeyDigest::decode(p).map(|_| ()),
            MsgType::BlockAbort => BlockAbort::decode(p).map(|_| ()),
        };
        if let Err(e) = decoded {
            bad(&mut r, i, f, format!("does not decode: {e}"));
        }
        if !windows.is_empty() {
            if let Some(at) = p.windows(WINDOW).position(|w| windows.contains(w)) {
                bad(&mut r, i, f, format!("payload bytes {at}..{} match secret bits", at + WINDOW));
            }
        }
    }
    r
}
