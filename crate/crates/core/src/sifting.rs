//! Decoding detections into basis/bit values and BBM92 basis sifting.

use crate::bits::BitString;
use crate::photonsim::TimeTag;
use crate::qstate::Basis;
use crate::timing::CoincidencePair;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SiftError {
    #[error("invalid detector channel {0}")]
    InvalidChannel(u8),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDetection {
    pub basis: Basis,
    /// H and D decode to 0, V and A to 1.
    pub bit: bool,
    pub ticks: u64,
}

pub fn decode_channel(channel: u8) -> Result<(Basis, bool), SiftError> {
    match channel {
        0 => Ok((Basis::HV, false)),
        1 => Ok((Basis::HV, true)),
        2 => Ok((Basis::DA, false)),
        3 => Ok((Basis::DA, true)),
        c => Err(SiftError::InvalidChannel(c)),
    }
}

pub fn decode(tag: TimeTag) -> Result<RawDetection, SiftError> {
    let (basis, bit) = decode_channel(tag.channel())?;
    Ok(RawDetection {
        basis,
        bit,
        ticks: tag.ticks(),
    })
}

/// One side's public basis announcement, one entry per coincidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisReveal {
    pub bases: Vec<Basis>,
}

impl BasisReveal {
    pub fn from_tags<'a>(tags: impl IntoIterator<Item = &'a TimeTag>) -> Result<Self, SiftError> {
        let bases = tags
            .into_iter()
            .map(|t| decode(*t).map(|d| d.basis))
            .collect::<Result<_, _>>()?;
        Ok(Self { bases })
    }

    /// DA = 1, LSB-first.
    pub fn to_bits(&self) -> BitString {
        self.bases.iter().map(|b| *b == Basis::DA).collect()
    }

    pub fn from_bits(bits: &BitString) -> Self {
        Self {
            bases: bits.iter().map(|b| if b { Basis::DA } else { Basis::HV }).collect(),
        }
    }
}

/// Positions where both announcements agree.
pub fn matching_positions(a: &BasisReveal, b: &BasisReveal) -> Result<Vec<u32>, SiftError> {
    if a.bases.len() != b.bases.len() {
        return Err(SiftError::LengthMismatch(a.bases.len(), b.bases.len()));
    }
    Ok(a
        .bases
        .iter()
        .zip(&b.bases)
        .enumerate()
        .filter(|(_, (x, y))| x == y)
        .map(|(i, _)| i as u32)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct BlockMeta {
    pub block_id: u32,
    pub start_ticks: u64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftedBlock {
    pub meta: BlockMeta,
    pub bits: BitString,
    /// Coincidence indices kept, ascending.
    pub pair_indices: Vec<u32>,
    pub coincidences: usize,
}

impl SiftedBlock {
    pub fn basis_matches(&self) -> usize {
        self.pair_indices.len()
    }
}

/// Keeps the bits at `positions` of one side's decoded coincidences.
pub fn sifted_bits<'a>(
    tags: impl IntoIterator<Item = &'a TimeTag>,
    positions: &[u32],
) -> Result<BitString, SiftError> {
    let decoded: Vec<RawDetection> = tags.into_iter().map(|t| decode(*t)).collect::<Result<_, _>>()?;
    positions
        .iter()
        .map(|&p| {
            decoded
                .get(p as usize)
                .map(|d| d.bit)
                .ok_or(SiftError::LengthMismatch(p as usize, decoded.len()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftTranscript {
    pub alice: BasisReveal,
    pub bob: BasisReveal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sifted {
    pub alice: SiftedBlock,
    pub bob: SiftedBlock,
    pub transcript: SiftTranscript,
}

/// Basis reconciliation over a list of coincidences.
pub fn sift(pairs: &[CoincidencePair], meta: BlockMeta) -> Result<Sifted, SiftError> {
    let alice = BasisReveal::from_tags(pairs.iter().map(|p| &p.a_tag))?;
    let bob = BasisReveal::from_tags(pairs.iter().map(|p| &p.b_tag))?;
    let keep = matching_positions(&alice, &bob)?;
    let a_bits = sifted_bits(pairs.iter().map(|p| &p.a_tag), &keep)?;
    let b_bits = sifted_bits(pairs.iter().map(|p| &p.b_tag), &keep)?;
    let block = |bits| SiftedBlock {
        meta,
        bits,
        pair_indices: keep.clone(),
        coincidences: pairs.len(),
    };
    Ok(Sifted {
        alice: block(a_bits),
        bob: block(b_bits),
        transcript: SiftTranscript { alice, bob },
    })
}

/// Hamming distance over length. Test oracle; the protocol learns its QBER
/// from reconciliation.
pub fn measured_qber(a: &BitString, b: &BitString) -> Result<f64, SiftError> {
    if a.len() != b.len() {
        return Err(SiftError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.hamming_distance(b) as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(ca: u8, cb: u8, t: u64) -> CoincidencePair {
        CoincidencePair {
            a_index: t as u32,
            b_index: t as u32,
            a_tag: TimeTag::new(ca, t),
            b_tag: TimeTag::new(cb, t),
            delta_ticks: 0,
        }
    }

    #[test]
    fn decode_map() {
        assert_eq!(decode_channel(0), Ok((Basis::HV, false)));
        assert_eq!(decode_channel(1), Ok((Basis::HV, true)));
        assert_eq!(decode_channel(2), Ok((Basis::DA, false)));
        assert_eq!(decode_channel(3), Ok((Basis::DA, true)));
        assert_eq!(decode_channel(4), Err(SiftError::InvalidChannel(4)));
        let all: std::collections::HashSet<_> = (0..4).map(|c| decode_channel(c).unwrap()).collect();
        assert_eq!(all.len(), 4);
        let d = decode(TimeTag::new(3, 77)).unwrap();
        assert_eq!((d.basis, d.bit, d.ticks), (Basis::DA, true, 77));
    }

    #[test]
    fn same_basis_keeps_everything() {
        let pairs: Vec<_> = (0..10).map(|i| pair((i % 2) as u8, (i % 2) as u8, i)).collect();
        let s = sift(&pairs, BlockMeta::default()).unwrap();
        assert_eq!(s.alice.basis_matches(), 10);
        assert_eq!(s.alice.bits, s.bob.bits);
        assert_eq!(measured_qber(&s.alice.bits, &s.bob.bits), Ok(0.0));
    }

    #[test]
    fn random_bases_keep_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let pairs: Vec<_> = (0..n).map(|i| pair(rng.gen_range(0..4), rng.gen_range(0..4), i)).collect();
        let s = sift(&pairs, BlockMeta::default()).unwrap();
        let k = s.alice.basis_matches() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((k - n as f64 / 2.0).abs() < 3.0 * sigma, "{k}");
        assert_eq!(s.alice.pair_indices, s.bob.pair_indices);
        assert_eq!(s.alice.bits.len(), s.bob.bits.len());
    }

    #[test]
    fn transcript_holds_bases_only() {
        // the reveal of bits {H, V} on the same basis is indistinguishable
        let a = sift(&[pair(0, 0, 1)], BlockMeta::default()).unwrap();
        let b = sift(&[pair(1, 1, 1)], BlockMeta::default()).unwrap();
        assert_eq!(a.transcript, b.transcript);
        assert_ne!(a.alice.bits, b.alice.bits);
    }

    #[test]
    fn qber_extremes_and_mismatch() {
        let a = BitString::from_bools(&[true, false, true]);
        let b = BitString::from_bools(&[false, true, false]);
        assert_eq!(measured_qber(&a, &b), Ok(1.0));
        assert!(measured_qber(&a, &BitString::zeros(2)).is_err());
    }

    #[test]
    fn basis_bits_round_trip() {
        let r = BasisReveal {
            bases: vec![Basis::HV, Basis::DA, Basis::DA],
        };
        assert_eq!(BasisReveal::from_bits(&r.to_bits()), r);
    }
}
