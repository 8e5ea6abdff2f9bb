//! Fiber channel: loss, delay, dispersion, slow polarization drift, and the
//! four-element liquid-crystal retarder stack that undoes the drift.

use crate::qstate::{Basis, PolarizationUnitary, Side, TwoQubitPolarizationState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use thiserror::Error;

pub const SPEED_OF_LIGHT_M_PER_S: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("invalid fiber config: {0}")]
    InvalidFiber(String),
    #[error("invalid drift model: {0}")]
    InvalidDrift(String),
    #[error("loss term {0} dB is positive")]
    PositiveLoss(f64),
    #[error("compensation did not converge: residual {residual:.3e} above floor {floor:.3e}")]
    NotConverged {
        best: LcvrStack,
        residual: f64,
        floor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberConfig {
    pub length_km: f64,
    /// Total channel loss, negative dB.
    pub loss_db: f64,
    pub group_index: f64,
    pub dispersion_ps_nm_km: f64,
    pub pmd_ps: f64,
    pub source_bandwidth_nm: f64,
    /// Two-photon visibility factor of the link. PMD and other depolarization
    /// that is not modeled dynamically is folded in here.
    pub link_visibility: f64,
}

impl Default for FiberConfig {
    fn default() -> Self {
        Self {
            length_km: 10.4,
            loss_db: -7.0,
            group_index: 1.468,
            dispersion_ps_nm_km: 0.0,
            pmd_ps: 0.1,
            source_bandwidth_nm: 50.0,
            link_visibility: crate::photonsim::REFERENCE_LINK_VISIBILITY,
        }
    }
}

impl FiberConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: &str| Err(ChannelError::InvalidFiber(m.to_string()));
        if !(self.length_km >= 0.0) {
            return bad("length_km must be non-negative");
        }
        if !(self.loss_db <= 0.0) {
            return bad("loss_db must be <= 0");
        }
        if !(self.group_index >= 1.0) {
            return bad("group_index must be >= 1");
        }
        if !(self.dispersion_ps_nm_km >= 0.0) || !(self.pmd_ps >= 0.0) {
            return bad("dispersion and pmd must be >= 0");
        }
        if !(self.source_bandwidth_nm >= 0.0) {
            return bad("source_bandwidth_nm must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.link_visibility) {
            return bad("link_visibility must be in [0, 1]");
        }
        Ok(())
    }

    pub fn transmission(&self) -> f64 {
        db_to_linear(self.loss_db)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Timing spread from chromatic dispersion: D × bandwidth × length, in ps.
pub fn dispersion_spread(cfg: &FiberConfig) -> f64 {
    cfg.dispersion_ps_nm_km * cfg.source_bandwidth_nm * cfg.length_km
}

/// Group delay through the fiber, in ps.
pub fn propagation_delay(cfg: &FiberConfig) -> f64 {
    cfg.length_km * 1e3 * cfg.group_index / SPEED_OF_LIGHT_M_PER_S * 1e12
}

/// Adds loss terms (each ≤ 0 dB).
pub fn loss_budget(channel_db: f64, coupling_db: f64, detection_db: f64) -> Result<f64, ChannelError> {
    for x in [channel_db, coupling_db, detection_db] {
        if x > 0.0 {
            return Err(ChannelError::PositiveLoss(x));
        }
    }
    Ok(channel_db + coupling_db + detection_db)
}

/// Slow fiber birefringence drift: three rotation angles, each a sinusoid
/// with a common period plus an independent random walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    pub period_h: f64,
    pub amplitude_rad: f64,
    pub walk_step_rad: f64,
    pub seed: u64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            period_h: 24.0,
            amplitude_rad: 1.2,
            walk_step_rad: 0.02,
            seed: 7,
        }
    }
}

/// Random-walk grid spacing in hours.
const WALK_GRID_H: f64 = 0.1;

impl DriftModel {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.period_h > 0.0) {
            return Err(ChannelError::InvalidDrift("period_h must be > 0".into()));
        }
        if !(self.amplitude_rad >= 0.0) || !(self.walk_step_rad >= 0.0) {
            return Err(ChannelError::InvalidDrift("amplitudes must be >= 0".into()));
        }
        Ok(())
    }

    fn phases(&self) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_d71f7);
        [rng.gen::<f64>() * TAU, rng.gen::<f64>() * TAU, rng.gen::<f64>() * TAU]
    }

    /// Brownian path on a fixed grid, linearly interpolated between nodes.
    fn walk(&self, axis: u64, t_h: f64) -> f64 {
        if self.walk_step_rad == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ axis);
        let sigma = self.walk_step_rad * WALK_GRID_H.sqrt();
        let steps = (t_h / WALK_GRID_H).floor() as u64;
        let mut w = 0.0;
        for _ in 0..steps {
            w += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let frac = t_h / WALK_GRID_H - steps as f64;
        w + frac * sigma * rng.sample::<f64, _>(StandardNormal)
    }

    pub fn angles(&self, t_h: f64) -> [f64; 3] {
        let phases = self.phases();
        let arg = TAU * t_h / self.period_h;
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.amplitude_rad * (arg + phases[k]).sin() + self.walk(k as u64, t_h);
        }
        out
    }
}

/// Fiber Jones matrix at `t_h` hours: retarder about H, then about D, then a
/// rotation, each driven by one drift angle.
pub fn fiber_unitary(drift: &DriftModel, t_h: f64) -> PolarizationUnitary {
    assert!(t_h >= 0.0, "negative elapsed time");
    let [a, b, g] = drift.angles(t_h);
    let r1 = PolarizationUnitary::retarder(0.0, a);
    let r2 = PolarizationUnitary::retarder(45.0, b);
    let r3 = PolarizationUnitary::rotator(g.to_degrees());
    r3.then_after(&r2).then_after(&r1)
}

pub const DEFAULT_LCVR_AXES_DEG: [f64; 4] = [0.0, 45.0, 0.0, 45.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LcvrStack {
    pub axes_deg: [f64; 4],
    pub retardances_rad: [f64; 4],
}

impl Default for LcvrStack {
    fn default() -> Self {
        Self::new(DEFAULT_LCVR_AXES_DEG, [0.0; 4])
    }
}

impl LcvrStack {
    pub fn new(axes_deg: [f64; 4], retardances_rad: [f64; 4]) -> Self {
        Self {
            axes_deg,
            retardances_rad: retardances_rad.map(|d| d.rem_euclid(TAU)),
        }
    }
}

/// Product of the four retarders, element 0 acting first.
pub fn lcvr_unitary(stack: &LcvrStack) -> PolarizationUnitary {
    stack
        .axes_deg
        .iter()
        .zip(&stack.retardances_rad)
        .fold(PolarizationUnitary::identity(), |acc, (&axis, &delta)| {
            PolarizationUnitary::retarder(axis, delta).then_after(&acc)
        })
}

/// QBER(HV) + QBER(DA) after the fiber and the stack act on Alice's photon.
pub fn compensation_objective(
    fiber_u: &PolarizationUnitary,
    stack: &LcvrStack,
    state: &TwoQubitPolarizationState,
) -> f64 {
    let u = lcvr_unitary(stack).then_after(fiber_u);
    let s = state.apply_local(&u, Side::Alice);
    s.qber_prediction(Basis::HV) + s.qber_prediction(Basis::DA)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compensation {
    pub stack: LcvrStack,
    pub objective: f64,
    /// Objective of the state with no fiber rotation at all.
    pub floor: f64,
    /// Objective with all retardances at zero.
    pub uncompensated: f64,
    pub evaluations: usize,
}

pub const COMPENSATION_SLACK: f64 = 1e-4;
const STARTS: usize = 8;
const EVALS_PER_START: usize = 2000;

fn start_points() -> Vec<[f64; 4]> {
    // Start 0 is the idle stack; the rest come from a Halton sequence.
    fn halton(mut i: usize, base: usize) -> f64 {
        let mut f = 1.0;
        let mut r = 0.0;
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    }
    let mut pts = vec![[0.0; 4]];
    for i in 1..STARTS {
        pts.push([2usize, 3, 5, 7].map(|b| halton(i, b) * TAU));
    }
    pts
}

/// Finds retardances that undo `fiber_u` for the given source state.
///
/// Multi-start Nelder–Mead; the best start wins, lowest start index on ties.
pub fn compensate(
    fiber_u: &PolarizationUnitary,
    axes_deg: [f64; 4],
    state: &TwoQubitPolarizationState,
) -> Result<Compensation, ChannelError> {
    let floor = state.qber_prediction(Basis::HV) + state.qber_prediction(Basis::DA);
    let objective = |x: &[f64; 4]| compensation_objective(fiber_u, &LcvrStack::new(axes_deg, *x), state);
    let uncompensated = objective(&[0.0; 4]);
    let mut evaluations = 1;
    if uncompensated <= floor + 1e-12 {
        return Ok(Compensation {
            stack: LcvrStack::new(axes_deg, [0.0; 4]),
            objective: uncompensated,
            floor,
            uncompensated,
            evaluations,
        });
    }

    let mut best: Option<([f64; 4], f64)> = None;
    for start in start_points() {
        let (x, fx, n) = nelder_mead(&objective, start, 0.6, EVALS_PER_START);
        evaluations += n;
        if best.as_ref().map_or(true, |(_, bf)| fx < *bf) {
            best = Some((x, fx));
        }
    }
    let (x, fx) = best.expect("at least one start");
    let stack = LcvrStack::new(axes_deg, x);
    if fx > floor + COMPENSATION_SLACK {
        return Err(ChannelError::NotConverged {
            best: stack,
            residual: fx,
            floor,
        });
    }
    Ok(Compensation {
        stack,
        objective: fx,
        floor,
        uncompensated,
        evaluations,
    })
}

/// Derivative-free simplex minimization in 4 dimensions.
fn nelder_mead<F: Fn(&[f64; 4]) -> f64>(
    f: &F,
    x0: [f64; 4],
    step: f64,
    max_evals: usize,
) -> ([f64; 4], f64, usize) {
    const N: usize = 4;
    let mut simplex: Vec<([f64; N], f64)> = Vec::with_capacity(N + 1);
    simplex.push((x0, f(&x0)));
    for i in 0..N {
        let mut x = x0;
        x[i] += step;
        simplex.push((x, f(&x)));
    }
    let mut evals = N + 1;

    let lerp = |a: &[f64; N], b: &[f64; N], t: f64| -> [f64; N] {
        let mut out = [0.0; N];
        for k in 0..N {
            out[k] = a[k] + t * (b[k] - a[k]);
        }
        out
    };

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[N].1 - simplex[0].1;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread < 1e-15 && diameter < 1e-8 {
            break;
        }
        let mut centroid = [0.0; N];
        for (x, _) in &simplex[..N] {
            for k in 0..N {
                centroid[k] += x[k] / N as f64;
            }
        }
        let worst = simplex[N];
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            evals += 1;
            simplex[N] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < worst.1 {
                let x = lerp(&centroid, &reflected, 0.5);
                (x, f(&x))
            } else {
                let x = lerp(&centroid, &worst.0, 0.5);
                (x, f(&x))
            };
            evals += 1;
            if fc < worst.1.min(fr) {
                simplex[N] = (contracted, fc);
            } else {
                // shrink toward the best vertex
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    v.0 = lerp(&best, &v.0, 0.5);
                    v.1 = f(&v.0);
                }
                evals += N;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    (simplex[0].0, simplex[0].1, evals)
}
