//! Slow reference implementations and instance generators shared by the
//! integration and acceptance suites.
#![allow(dead_code)]

use plink_core::bits::BitString;
use plink_core::photonsim::TimeTag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Greedy matcher by exhaustive scan: each Bob tag, in order, takes the
/// nearest unused Alice tag within the window, lowest index on ties.
pub fn brute_force_coincidences(a: &[TimeTag], b: &[TimeTag], offset: i64, window: u64) -> Vec<(u32, u32)> {
    let mut used = vec![false; a.len()];
    let mut out = Vec::new();
    for (j, tb) in b.iter().enumerate() {
        let mut best: Option<(i64, usize)> = None;
        for (i, ta) in a.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = (tb.ticks() as i64 - (ta.ticks() as i64 - offset)).abs();
            if d <= window as i64 && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        if let Some((_, i)) = best {
            used[i] = true;
            out.push((i as u32, j as u32));
        }
    }
    out
}

/// Two sorted streams with clustered events so that windows overlap,
/// collide and tie. Total size at most `max_total`.
pub fn matcher_instance(rng: &mut ChaCha8Rng, max_total: usize) -> (Vec<TimeTag>, Vec<TimeTag>, i64, u64) {
    let n_a = rng.gen_range(0..=max_total / 2);
    let n_b = rng.gen_range(0..=max_total / 2);
    matcher_instance_sized(rng, n_a, n_b)
}

/// As [`matcher_instance`] with exactly `n_a` and `n_b` tags.
pub fn matcher_instance_sized(rng: &mut ChaCha8Rng, n_a: usize, n_b: usize) -> (Vec<TimeTag>, Vec<TimeTag>, i64, u64) {
    let span = rng.gen_range(1..=(8 * (n_a + n_b) as u64).max(16));
    let offset = rng.gen_range(-50i64..=50);
    let window = rng.gen_range(0..=12u64);
    let mut a: Vec<TimeTag> = (0..n_a)
        .map(|_| TimeTag::new(rng.gen_range(0..4), rng.gen_range(0..span) + 100))
        .collect();
    let mut b: Vec<TimeTag> = (0..n_b)
        .map(|_| TimeTag::new(rng.gen_range(0..4), rng.gen_range(0..span) + 100))
        .collect();
    a.sort_unstable();
    b.sort_unstable();
    (a, b, offset, window)
}

/// `T·x` over GF(2) straight from `T[i][j] = seed[i - j + n - 1]`.
pub fn naive_toeplitz(x: &BitString, seed: &BitString, m: usize) -> BitString {
    let n = x.len();
    let xs = x.to_bools();
    let ss = seed.to_bools();
    (0..m)
        .map(|i| (0..n).fold(false, |acc, j| acc ^ (ss[i + n - 1 - j] & xs[j])))
        .collect()
}

/// A random key and a copy with each bit flipped with probability `q`.
pub fn planted_errors(n: usize, q: f64, seed: u64) -> (BitString, BitString, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = BitString::random(n, &mut rng);
    let mut b = a.clone();
    let mut errors = 0;
    for i in 0..n {
        if rng.gen::<f64>() < q {
            b.flip(i);
            errors += 1;
        }
    }
    (a, b, errors)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
