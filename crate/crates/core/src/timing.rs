//! Clock-offset recovery, coincidence matching and coincidence-peak analysis.
//!
//! Sign convention: a genuine pair satisfies `t_a - offset ≈ t_b`, i.e. the
//! offset is Alice's clock reading minus Bob's for the same photon pair,
//! fiber delay included. Pair deltas are `t_b - (t_a - offset)`.

use crate::photonsim::{TimeTag, TICK_PS};
use crate::privamp::h2;
use statrs::function::gamma::gamma_lr;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TimingError {
    #[error("sync failed: {0}")]
    SyncFailed(String),
    #[error("histogram has no peak above background")]
    NoPeak,
    #[error("no candidate windows given")]
    NoCandidates,
    #[error("invalid clock model: {0}")]
    InvalidClock(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ClockModel {
    pub offset_ticks: i64,
    pub drift_ppm: f64,
}

impl ClockModel {
    pub fn validate(&self) -> Result<(), TimingError> {
        if !(self.drift_ppm.abs() < 100.0) {
            return Err(TimingError::InvalidClock(format!(
                "|drift_ppm| must be < 100, got {}",
                self.drift_ppm
            )));
        }
        Ok(())
    }

    /// Maps a reference time (ps) to this clock's reading (ps).
    pub fn local_ps(&self, true_ps: f64) -> f64 {
        true_ps * (1.0 + self.drift_ppm * 1e-6) + self.offset_ticks as f64 * TICK_PS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidencePair {
    pub a_index: u32,
    pub b_index: u32,
    pub a_tag: TimeTag,
    pub b_tag: TimeTag,
    pub delta_ticks: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncParams {
    /// Offsets in `[-span, span]` are searched.
    pub span_ticks: u64,
    pub coarse_bin_ticks: u64,
    /// Only Alice tags within this long of her first tag enter the correlation.
    pub analysis_ticks: u64,
}

impl Default for SyncParams {
    fn default() -> Self {
        Self {
            span_ticks: 8_000_000_000,
            coarse_bin_ticks: 16_000,
            analysis_ticks: 32_000_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncEstimate {
    pub offset_ticks: i64,
    /// Coarse peak height over the histogram mean, in units of √mean.
    pub coarse_significance: f64,
    pub fine_significance: f64,
}

/// Half-width of the boxcar used to locate the fine peak.
const FINE_SMOOTH_HALF: usize = 8;
/// Half-width, in coarse bins, of the neighbourhood giving the background.
const BG_HALF: usize = 256;
/// Half-width of the centroid region around the fine peak.
const FINE_CENTROID_HALF: i64 = 32;
const PEAK_SIGMAS: f64 = 5.0;
/// Largest accepted chance of the coarse peak being background.
const MAX_CHANCE_PEAK: f64 = 1e-2;

/// Recovers the clock offset between two tag streams from the pair correlation.
///
/// Coarse stage: FFT cross-correlation of binned counts over the whole search
/// span, processed in segments of Alice's stream. Fine stage: 1-tick
/// histogram of pair time differences within ±2 coarse bins of the peak,
/// whose background-subtracted centroid is the estimate.
pub fn estimate_offset(
    tags_a: &[TimeTag],
    tags_b: &[TimeTag],
    params: &SyncParams,
) -> Result<SyncEstimate, TimingError> {
    if tags_a.is_empty() || tags_b.is_empty() {
        return Err(TimingError::SyncFailed("empty stream".into()));
    }
    let a0 = tags_a[0].ticks();
    let a_end = tags_a.partition_point(|t| t.ticks() - a0 < params.analysis_ticks.max(1));
    let tags_a = &tags_a[..a_end];

    let bin = params.coarse_bin_ticks.max(1) as i64;
    let span_bins = (params.span_ticks as i64 + bin - 1) / bin;
    let corr = coarse_correlation(tags_a, tags_b, bin, span_bins);

    // adjacent-bin sums so a peak straddling a bin edge is not split
    let pair_sums: Vec<f64> = corr.windows(2).map(|w| w[0] + w[1]).collect();
    // The expected count per lag follows the overlap of the two streams, so
    // each lag is judged against its own neighbourhood.
    let bg = local_background(&pair_sums, BG_HALF, 2);
    let (k_star, _) = argmax(
        &pair_sums
            .iter()
            .zip(&bg)
            .map(|(&x, &m)| significance(x, m))
            .collect::<Vec<_>>(),
    );
    let (peak, mean) = (pair_sums[k_star], bg[k_star]);
    let coarse_sig = significance(peak, mean);
    let chance = chance_of_max(peak, mean, pair_sums.len());
    if coarse_sig < PEAK_SIGMAS || chance > MAX_CHANCE_PEAK {
        return Err(TimingError::SyncFailed(format!(
            "no coarse correlation peak (peak {peak}, mean {mean:.1}, chance {chance:.2e})"
        )));
    }
    let lag = k_star as i64 - span_bins;

    // fine scan: Δ = t_a - t_b in [lo, hi)
    let lo = (lag - 2) * bin;
    let hi = (lag + 3) * bin;
    let width = (hi - lo) as usize;
    let mut fine = vec![0u32; width];
    let mut start = 0usize;
    for a in tags_a {
        let ta = a.ticks() as i64;
        // need t_b in (ta - hi, ta - lo]
        while start < tags_b.len() && (tags_b[start].ticks() as i64) <= ta - hi {
            start += 1;
        }
        let mut j = start;
        while j < tags_b.len() && (tags_b[j].ticks() as i64) <= ta - lo {
            let d = ta - tags_b[j].ticks() as i64;
            fine[(d - lo) as usize] += 1;
            j += 1;
        }
    }

    let smoothed = boxcar(&fine, FINE_SMOOTH_HALF);
    let (p, speak) = argmax(&smoothed);
    let smean = smoothed.iter().sum::<f64>() / smoothed.len() as f64;
    let fine_sig = significance(speak, smean);
    if fine_sig < PEAK_SIGMAS {
        return Err(TimingError::SyncFailed(format!(
            "no fine correlation peak (peak {speak}, mean {smean:.1})"
        )));
    }
    let bg = median_u32(&fine);
    let (mut num, mut den) = (0.0, 0.0);
    let from = (p as i64 - FINE_CENTROID_HALF).max(0) as usize;
    let to = ((p as i64 + FINE_CENTROID_HALF) as usize).min(width - 1);
    for (i, &c) in fine.iter().enumerate().take(to + 1).skip(from) {
        let w = c as f64 - bg;
        num += w * (lo + i as i64) as f64;
        den += w;
    }
    if den <= 0.0 {
        return Err(TimingError::SyncFailed("fine peak vanishes above background".into()));
    }
    Ok(SyncEstimate {
        offset_ticks: (num / den).round() as i64,
        coarse_significance: coarse_sig,
        fine_significance: fine_sig,
    })
}

/// Mean of `xs` over `[i - half, i + half]`, leaving out `[i - gap, i + gap]`.
fn local_background(xs: &[f64], half: usize, gap: usize) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(xs.len() + 1);
    prefix.push(0.0);
    for &x in xs {
        prefix.push(prefix.last().unwrap() + x);
    }
    let sum = |lo: usize, hi: usize| prefix[hi] - prefix[lo];
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            let glo = i.saturating_sub(gap).max(lo);
            let ghi = (i + gap + 1).min(hi);
            let n = (hi - lo) - (ghi - glo);
            if n == 0 {
                return 0.0;
            }
            (sum(lo, hi) - sum(glo, ghi)) / n as f64
        })
        .collect()
}

/// Bound on the chance that the largest of `n` Poisson(`mean`) bins reaches
/// `peak`. A 5-sigma test alone is fooled by sparse streams, where the
/// maximum over a million low-mean bins sits far out in the tail.
fn chance_of_max(peak: f64, mean: f64, n: usize) -> f64 {
    if peak <= 0.0 {
        return 1.0;
    }
    if mean <= 0.0 {
        return 0.0;
    }
    // P(X >= k) for X ~ Poisson(mean) is the regularized lower gamma P(k, mean).
    (n as f64 * gamma_lr(peak, mean)).min(1.0)
}

fn significance(peak: f64, mean: f64) -> f64 {
    if mean <= 0.0 {
        if peak > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        (peak - mean) / mean.sqrt()
    }
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
}

fn boxcar(xs: &[u32], half: usize) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(xs.len() + 1);
    prefix.push(0u64);
    for &x in xs {
        prefix.push(prefix.last().unwrap() + x as u64);
    }
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(xs.len());
            (prefix[hi] - prefix[lo]) as f64
        })
        .collect()
}

fn median_u32(xs: &[u32]) -> f64 {
    let mut v = xs.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable(mid);
    *m as f64
}

/// Correlation counts C[L + S] for lags L in [-S, S] coarse bins, where lag
/// L collects pairs with floor(t_a/bin) - floor(t_b/bin) = L.
fn coarse_correlation(tags_a: &[TimeTag], tags_b: &[TimeTag], bin: i64, span_bins: i64) -> Vec<f64> {
    let s = span_bins as usize;
    let seg = (2 * s + 1).max(1024).next_power_of_two();
    let size = 2 * seg;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    let origin = tags_a[0].ticks() as i64;
    let bin_of = |t: &TimeTag| (t.ticks() as i64 - origin).div_euclid(bin);
    let last_a = bin_of(tags_a.last().unwrap());

    let mut corr = vec![0.0; 2 * s + 1];
    let mut abuf = vec![Complex::new(0.0, 0.0); size];
    let mut bbuf = vec![Complex::new(0.0, 0.0); size];
    let mut a_idx = 0usize;
    let mut i0 = 0i64;
    while i0 <= last_a {
        abuf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
        bbuf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
        let mut any = false;
        while a_idx < tags_a.len() {
            let k = bin_of(&tags_a[a_idx]) - i0;
            if k >= seg as i64 {
                break;
            }
            abuf[k as usize].re += 1.0;
            any = true;
            a_idx += 1;
        }
        if any {
            let b_lo = origin + (i0 - span_bins) * bin;
            let b_hi = origin + (i0 + seg as i64 + span_bins) * bin;
            let from = tags_b.partition_point(|t| (t.ticks() as i64) < b_lo);
            for t in &tags_b[from..] {
                if t.ticks() as i64 >= b_hi {
                    break;
                }
                let y = bin_of(t) - (i0 - span_bins);
                bbuf[y as usize].re += 1.0;
            }
            fwd.process(&mut abuf);
            fwd.process(&mut bbuf);
            for (x, y) in abuf.iter_mut().zip(&bbuf) {
                *x = x.conj() * y;
            }
            inv.process(&mut abuf);
            // r[d] = Σ_x a[x]·b[x+d], lag L = S - d
            for d in 0..=2 * s {
                corr[2 * s - d] += (abuf[d].re / size as f64).round();
            }
        }
        i0 += seg as i64;
    }
    corr
}

/// Greedy nearest-neighbour matching in Bob-time order.
///
/// Each Bob tag, in stream order, takes the nearest still-unused Alice tag
/// with `|t_b - (t_a - offset)| <= window`; ties go to the lower Alice index.
pub fn find_coincidences(
    tags_a: &[TimeTag],
    tags_b: &[TimeTag],
    offset_ticks: i64,
    window_ticks: u64,
) -> Vec<CoincidencePair> {
    let w = window_ticks as i64;
    let mut used = vec![false; tags_a.len()];
    let mut out = Vec::new();
    let mut lo = 0usize;
    let adj = |i: usize| tags_a[i].ticks() as i64 - offset_ticks;
    for (bi, b) in tags_b.iter().enumerate() {
        let tb = b.ticks() as i64;
        while lo < tags_a.len() && adj(lo) < tb - w {
            lo += 1;
        }
        let mut best: Option<(i64, usize)> = None;
        let mut i = lo;
        while i < tags_a.len() && adj(i) <= tb + w {
            if !used[i] {
                let d = (tb - adj(i)).abs();
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
            i += 1;
        }
        if let Some((_, ai)) = best {
            used[ai] = true;
            out.push(CoincidencePair {
                a_index: ai as u32,
                b_index: bi as u32,
                a_tag: tags_a[ai],
                b_tag: *b,
                delta_ticks: tb - adj(ai),
            });
        }
    }
    out
}

/// Number of (a, b) pairs, not greedily matched, with `t_b - (t_a - offset)`
/// in `[lo, hi]`.
pub fn count_pairs_in_range(tags_a: &[TimeTag], tags_b: &[TimeTag], offset_ticks: i64, lo: i64, hi: i64) -> u64 {
    let mut count = 0u64;
    let mut start = 0usize;
    for a in tags_a {
        let base = a.ticks() as i64 - offset_ticks;
        while start < tags_b.len() && (tags_b[start].ticks() as i64) < base + lo {
            start += 1;
        }
        let mut j = start;
        while j < tags_b.len() && (tags_b[j].ticks() as i64) <= base + hi {
            count += 1;
            j += 1;
        }
    }
    count
}

/// Side lobes used for accidental estimation sit this far from the peak.
pub const SIDE_LOBE_CENTER_TICKS: i64 = 8_000;
pub const SIDE_LOBE_HALF_WIDTH_TICKS: i64 = 2_000;

/// Accidental pairs per tick of delta, measured in two side lobes far from the peak.
pub fn accidental_density(tags_a: &[TimeTag], tags_b: &[TimeTag], offset_ticks: i64) -> f64 {
    let (c, h) = (SIDE_LOBE_CENTER_TICKS, SIDE_LOBE_HALF_WIDTH_TICKS);
    let n = count_pairs_in_range(tags_a, tags_b, offset_ticks, c - h, c + h)
        + count_pairs_in_range(tags_a, tags_b, offset_ticks, -c - h, -c + h);
    n as f64 / (2 * (2 * h + 1)) as f64
}

/// Expected accidental coincidences for a window of `window_ticks`.
pub fn accidental_estimate(tags_a: &[TimeTag], tags_b: &[TimeTag], offset_ticks: i64, window_ticks: u64) -> f64 {
    accidental_density(tags_a, tags_b, offset_ticks) * (2 * window_ticks + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowChoice {
    pub window_ticks: u64,
    pub proxy: f64,
    /// Set when no candidate gave a positive secure-rate proxy.
    pub non_positive: bool,
    /// (window, coincidences, accidental estimate, proxy) per candidate.
    pub table: Vec<(u64, u64, f64, f64)>,
}

/// Picks the coincidence window maximizing C(w)·(1 − 2·h2(Q̂(w))), where
/// Q̂(w) = q0·(1 − f) + f/2 and f is the side-lobe accidental fraction.
pub fn optimize_window(
    tags_a: &[TimeTag],
    tags_b: &[TimeTag],
    offset_ticks: i64,
    candidate_windows: &[u64],
    intrinsic_qber: f64,
) -> Result<WindowChoice, TimingError> {
    if candidate_windows.is_empty() {
        return Err(TimingError::NoCandidates);
    }
    let mut cands = candidate_windows.to_vec();
    cands.sort_unstable();
    cands.dedup();
    let density = accidental_density(tags_a, tags_b, offset_ticks);
    let mut table = Vec::with_capacity(cands.len());
    let mut best: Option<(u64, f64)> = None;
    for &w in &cands {
        let c = find_coincidences(tags_a, tags_b, offset_ticks, w).len() as u64;
        let acc = density * (2 * w + 1) as f64;
        let proxy = if c == 0 {
            0.0
        } else {
            let f = (acc / c as f64).min(1.0);
            let q = (intrinsic_qber * (1.0 - f) + f / 2.0).clamp(0.0, 0.5);
            c as f64 * (1.0 - 2.0 * h2(q).expect("q in range"))
        };
        table.push((w, c, acc, proxy));
        if proxy > 0.0 && best.map_or(true, |(_, bp)| proxy > bp) {
            best = Some((w, proxy));
        }
    }
    Ok(match best {
        Some((w, p)) => WindowChoice {
            window_ticks: w,
            proxy: p,
            non_positive: false,
            table,
        },
        None => WindowChoice {
            window_ticks: cands[0],
            proxy: table[0].3,
            non_positive: true,
            table,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub bin_width_ticks: u64,
    /// Delta of the lower edge of bin 0.
    pub origin_ticks: i64,
    pub counts: Vec<u64>,
}

/// Histogram of `t_b - (t_a - offset)` over `[-half_range, half_range]`.
pub fn correlation_histogram(
    tags_a: &[TimeTag],
    tags_b: &[TimeTag],
    offset_ticks: i64,
    half_range_ticks: u64,
    bin_width_ticks: u64,
) -> CorrelationHistogram {
    let bw = bin_width_ticks.max(1) as i64;
    let h = half_range_ticks as i64;
    let nbins = ((2 * h + 1) + bw - 1) / bw;
    let mut counts = vec![0u64; nbins as usize];
    let mut start = 0usize;
    for a in tags_a {
        let base = a.ticks() as i64 - offset_ticks;
        while start < tags_b.len() && (tags_b[start].ticks() as i64) < base - h {
            start += 1;
        }
        let mut j = start;
        while j < tags_b.len() && (tags_b[j].ticks() as i64) <= base + h {
            let d = tags_b[j].ticks() as i64 - base;
            counts[((d + h) / bw) as usize] += 1;
            j += 1;
        }
    }
    CorrelationHistogram {
        bin_width_ticks: bw as u64,
        origin_ticks: -h,
        counts,
    }
}

impl CorrelationHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_start_ps,counts\n");
        for (i, c) in self.counts.iter().enumerate() {
            let start = (self.origin_ticks + (i as u64 * self.bin_width_ticks) as i64) as f64 * TICK_PS;
            let _ = writeln!(s, "{start},{c}");
        }
        s
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Full width at half maximum above the median background, in ps, with
/// linear interpolation between bins.
pub fn peak_fwhm(hist: &CorrelationHistogram) -> Result<f64, TimingError> {
    let c: Vec<f64> = hist.counts.iter().map(|&x| x as f64).collect();
    if c.is_empty() {
        return Err(TimingError::NoPeak);
    }
    let bg = {
        let mut v = c.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (p, max) = argmax(&c);
    if max - bg < PEAK_SIGMAS * bg.max(1.0).sqrt() {
        return Err(TimingError::NoPeak);
    }
    let half = bg + (max - bg) / 2.0;
    let mut i = p;
    while i > 0 && c[i - 1] >= half {
        i -= 1;
    }
    let left = if i == 0 {
        0.0
    } else {
        (i - 1) as f64 + (half - c[i - 1]) / (c[i] - c[i - 1])
    };
    let mut j = p;
    while j + 1 < c.len() && c[j + 1] >= half {
        j += 1;
    }
    let right = if j + 1 == c.len() {
        j as f64
    } else {
        j as f64 + (c[j] - half) / (c[j] - c[j + 1])
    };
    Ok((right - left) * hist.bin_width_ticks as f64 * TICK_PS)
}
