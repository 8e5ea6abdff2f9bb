//! Secure key length and Toeplitz-hash privacy amplification.

use crate::bits::BitString;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PrivampError {
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("seed has {got} bits, need n + m - 1 = {expected}")]
    SeedLength { expected: usize, got: usize },
    #[error("output length {m} exceeds input length {n}")]
    OutputTooLong { n: usize, m: usize },
}

/// Binary Shannon entropy in bits.
pub fn h2(x: f64) -> Result<f64, PrivampError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(PrivampError::ProbabilityOutOfRange(x));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

/// Asymptotic extractable length: ⌊n(1 − h2(Q)) − leaked − margin⌋, clamped at 0.
pub fn secure_length(n: usize, qber: f64, leaked_bits: usize, margin_bits: usize) -> usize {
    let q = qber.clamp(0.0, 0.5);
    let h = h2(q).expect("clamped");
    let m = (n as f64 * (1.0 - h) - leaked_bits as f64 - margin_bits as f64).floor();
    if m <= 0.0 {
        0
    } else {
        (m as usize).min(n)
    }
}

/// The n + m − 1 bits defining a Toeplitz matrix: `T[i][j] = bits[i − j + n − 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaSeed {
    pub bits: BitString,
}

impl PaSeed {
    pub fn random<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Self {
        Self {
            bits: BitString::random(seed_len(n, m), rng),
        }
    }
}

pub fn seed_len(n: usize, m: usize) -> usize {
    if m == 0 {
        0
    } else {
        n + m - 1
    }
}

/// y = T·x over GF(2), m output bits, word-parallel.
///
/// With x′ the reversal of x, y_i = parity(seed[i .. i + n] AND x′), so each
/// output bit is a popcount over a shifted window of the seed.
pub fn toeplitz_hash(bits: &BitString, seed: &PaSeed, m: usize) -> Result<BitString, PrivampError> {
    let n = bits.len();
    if m > n {
        return Err(PrivampError::OutputTooLong { n, m });
    }
    if seed.bits.len() != seed_len(n, m) {
        return Err(PrivampError::SeedLength {
            expected: seed_len(n, m),
            got: seed.bits.len(),
        });
    }
    let xr = bits.reversed();
    let xw = xr.words();
    let mut out = BitString::zeros(m);
    for i in 0..m {
        let mut acc = 0u64;
        for (w, x) in xw.iter().enumerate() {
            acc ^= seed.bits.window_word(i + 64 * w) & x;
        }
        if acc.count_ones() % 2 == 1 {
            out.set(i, true);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecretBlock {
    pub block_id: u32,
    #[serde(skip)]
    pub key_bits: BitString,
    pub qber_used: f64,
    pub leaked_bits_used: usize,
    pub length: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Bit-by-bit matrix-vector product straight from the definition.
    fn naive(x: &[bool], seed: &[bool], m: usize) -> Vec<bool> {
        let n = x.len();
        (0..m)
            .map(|i| (0..n).fold(false, |acc, j| acc ^ (seed[i + n - 1 - j] & x[j])))
            .collect()
    }

    #[test]
    fn h2_values() {
        assert_eq!(h2(0.5), Ok(1.0));
        assert_eq!(h2(0.0), Ok(0.0));
        assert_eq!(h2(1.0), Ok(0.0));
        let v = h2(0.063).unwrap();
        // -0.063 log2 0.063 - 0.937 log2 0.937
        assert!((v - 0.339_25).abs() < 1e-4, "{v}");
        assert!(h2(1.1).is_err());
        assert!(h2(-0.01).is_err());
    }

    #[test]
    fn secure_length_examples() {
        let n = 8500;
        let leak = (n as f64 * 1.2 * h2(0.063).unwrap()).round() as usize;
        let m = secure_length(n, 0.063, leak, 64);
        assert!((2000..2300).contains(&m), "{m}");

        // idealized leakage n·h2(Q): 340/s sifted gives ≈109.5 bits/s
        let ideal = (n as f64 * h2(0.063).unwrap()).round() as usize;
        let rate = secure_length(n, 0.063, ideal, 0) as f64 / 25.0;
        assert!((rate - 109.5).abs() < 1.0, "{rate}");

        let n = 10_000;
        let leak = (n as f64 * h2(0.11).unwrap()).round() as usize;
        assert_eq!(secure_length(n, 0.11, leak, 64), 0);
        assert_eq!(secure_length(100, 0.3, 0, 0), 11);
    }

    #[test]
    fn secure_length_monotone() {
        let mut prev = usize::MAX;
        for k in 0..=50 {
            let m = secure_length(5000, k as f64 / 100.0, 300, 64);
            assert!(m <= prev);
            prev = m;
        }
        let mut prev = usize::MAX;
        for leak in (0..5000).step_by(97) {
            let m = secure_length(5000, 0.05, leak, 64);
            assert!(m <= prev);
            prev = m;
        }
    }

    #[test]
    fn toeplitz_hand_example() {
        let seed = PaSeed {
            bits: BitString::from_bools(&[true, false, true, true, false]),
        };
        let x = BitString::from_bools(&[true, false, true, true]);
        let y = toeplitz_hash(&x, &seed, 2).unwrap();
        assert_eq!(y.to_bools(), vec![false, true]);
    }

    #[test]
    fn toeplitz_errors_and_empty() {
        let x = BitString::zeros(10);
        let y = toeplitz_hash(&x, &PaSeed { bits: BitString::zeros(0) }, 0).unwrap();
        assert!(y.is_empty());
        assert_eq!(
            toeplitz_hash(&x, &PaSeed { bits: BitString::zeros(12) }, 4),
            Err(PrivampError::SeedLength { expected: 13, got: 12 })
        );
        assert!(toeplitz_hash(&x, &PaSeed { bits: BitString::zeros(20) }, 11).is_err());
    }

    #[test]
    fn toeplitz_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, m) in &[(1usize, 1usize), (63, 17), (64, 64), (65, 3), (200, 130), (1000, 999)] {
            let x = BitString::random(n, &mut rng);
            let seed = PaSeed::random(n, m, &mut rng);
            let fast = toeplitz_hash(&x, &seed, m).unwrap();
            assert_eq!(fast.to_bools(), naive(&x.to_bools(), &seed.bits.to_bools(), m), "n={n} m={m}");
        }
    }

    #[test]
    fn toeplitz_linear_exhaustive_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=10usize {
            let m = (n + 1) / 2;
            let seed = PaSeed::random(n, m, &mut rng);
            let h = |v: u32| {
                let x = BitString::from_bools(&(0..n).map(|i| v >> i & 1 == 1).collect::<Vec<_>>());
                toeplitz_hash(&x, &seed, m).unwrap()
            };
            for a in 0..(1u32 << n) {
                for b in [0u32, 1, a / 2 + 1, (1u32 << n) - 1] {
                    let b = b & ((1u32 << n) - 1);
                    assert_eq!(h(a ^ b), h(a).xor(&h(b)));
                }
            }
        }
    }

    #[test]
    fn toeplitz_linear_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, m) = (4096, 1000);
        let seed = PaSeed::random(n, m, &mut rng);
        let x = BitString::random(n, &mut rng);
        let y = BitString::random(n, &mut rng);
        let hx = toeplitz_hash(&x, &seed, m).unwrap();
        let hy = toeplitz_hash(&y, &seed, m).unwrap();
        assert_eq!(toeplitz_hash(&x.xor(&y), &seed, m).unwrap(), hx.xor(&hy));
    }
}
