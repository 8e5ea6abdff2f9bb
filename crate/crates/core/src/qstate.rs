//! Two-qubit polarization states and local Jones-matrix operations.
//!
//! Conventions: basis order is HH, HV, VH, VV (Alice's qubit first). Linear
//! analyzer angles are in degrees with H = 0°, V = 90°, D = 45° and A = 135°.
//! The analyzer projector at angle θ is |θ⟩⟨θ| with |θ⟩ = cos θ |H⟩ + sin θ |V⟩.

use nalgebra::{Matrix2, Matrix4, Vector2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for algebraic identities (hermiticity, trace, unitarity).
pub const ALGEBRAIC_TOL: f64 = 1e-12;
/// Slack allowed on negative eigenvalues from the numerical eigensolver.
pub const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum QstateError {
    #[error("visibility {0} outside [0, 1]")]
    VisibilityOutOfRange(f64),
    #[error("matrix is not unitary (max |u u† - I| = {0:e})")]
    NotUnitary(f64),
    #[error("density matrix is not hermitian (max deviation {0:e})")]
    NotHermitian(f64),
    #[error("density matrix trace {0} is not 1")]
    BadTrace(f64),
    #[error("density matrix has negative eigenvalue {0:e}")]
    NotPositive(f64),
    #[error("analyzer angle {0} outside [0, 360)")]
    AngleOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    HV,
    DA,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::HV, Basis::DA];

    /// Analyzer angles for bit 0 and bit 1 in this basis.
    pub fn outcome_angles(self) -> [f64; 2] {
        match self {
            Basis::HV => [0.0, 90.0],
            Basis::DA => [45.0, 135.0],
        }
    }

    pub fn angle(self) -> f64 {
        self.outcome_angles()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Alice,
    Bob,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Analyzer {
    Basis(Basis),
    Angle(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSetting {
    pub analyzer: Analyzer,
    pub side: Side,
}

impl AnalyzerSetting {
    pub fn new(analyzer: Analyzer, side: Side) -> Result<Self, QstateError> {
        if let Analyzer::Angle(a) = analyzer {
            if !(0.0..360.0).contains(&a) {
                return Err(QstateError::AngleOutOfRange(a));
            }
        }
        Ok(Self { analyzer, side })
    }

    /// Angle of the bit-0 analyzer port.
    pub fn angle(&self) -> f64 {
        match self.analyzer {
            Analyzer::Basis(b) => b.angle(),
            Analyzer::Angle(a) => a,
        }
    }
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// A 2×2 unitary acting on one photon's polarization (a Jones matrix).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationUnitary(Matrix2<Complex64>);

impl PolarizationUnitary {
    pub fn new(u: Matrix2<Complex64>) -> Result<Self, QstateError> {
        let dev = unitarity_deviation(&u);
        if dev > ALGEBRAIC_TOL {
            return Err(QstateError::NotUnitary(dev));
        }
        Ok(Self(u))
    }

    pub fn identity() -> Self {
        Self(Matrix2::identity())
    }

    /// Polarization rotator turning linear polarization by `deg` (H → cos, sin).
    pub fn rotator(deg: f64) -> Self {
        let (s, co) = deg.to_radians().sin_cos();
        Self(Matrix2::new(c(co), c(-s), c(s), c(co)))
    }

    /// Linear retarder with fast axis at `axis_deg` and retardance `delta` radians,
    /// in the special-unitary form R(θ)·diag(e^{-iδ/2}, e^{iδ/2})·R(-θ).
    pub fn retarder(axis_deg: f64, delta: f64) -> Self {
        let r = Self::rotator(axis_deg).0;
        let d = Matrix2::new(
            Complex64::from_polar(1.0, -delta / 2.0),
            c(0.0),
            c(0.0),
            Complex64::from_polar(1.0, delta / 2.0),
        );
        Self(r * d * r.adjoint())
    }

    /// Haar-random element of SU(2).
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut q = [0.0f64; 4];
        for x in &mut q {
            *x = rng.sample(StandardNormal);
        }
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let [a, b, cc, d] = q.map(|x| x / norm);
        Self(Matrix2::new(
            Complex64::new(a, b),
            Complex64::new(cc, d),
            Complex64::new(-cc, d),
            Complex64::new(a, -b),
        ))
    }

    pub fn matrix(&self) -> &Matrix2<Complex64> {
        &self.0
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    /// `self · other`: apply `other` first.
    pub fn then_after(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    pub fn unitarity_deviation(&self) -> f64 {
        unitarity_deviation(&self.0)
    }

    /// Max entrywise distance after removing the global phase.
    pub fn distance_up_to_phase(&self, other: &Self) -> f64 {
        let overlap = (self.0.adjoint() * other.0).trace();
        let phase = if overlap.norm() > 0.0 {
            overlap / overlap.norm()
        } else {
            c(1.0)
        };
        (self.0 * phase - other.0).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

fn unitarity_deviation(u: &Matrix2<Complex64>) -> f64 {
    (u * u.adjoint() - Matrix2::identity())
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn projector(deg: f64) -> Matrix2<Complex64> {
    let (s, co) = deg.to_radians().sin_cos();
    let v = Vector2::new(c(co), c(s));
    v * v.adjoint()
}

/// Density matrix of a polarization-entangled photon pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoQubitPolarizationState(Matrix4<Complex64>);

impl TwoQubitPolarizationState {
    /// Validates hermiticity, unit trace and positivity.
    pub fn from_matrix(rho: Matrix4<Complex64>) -> Result<Self, QstateError> {
        let herm = (rho - rho.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if herm > ALGEBRAIC_TOL {
            return Err(QstateError::NotHermitian(herm));
        }
        let tr = rho.trace();
        if (tr - c(1.0)).norm() > ALGEBRAIC_TOL {
            return Err(QstateError::BadTrace(tr.re));
        }
        let min_eig = rho
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -EIGEN_TOL {
            return Err(QstateError::NotPositive(min_eig));
        }
        Ok(Self(rho))
    }

    /// (|HH⟩ + |VV⟩)/√2.
    pub fn phi_plus() -> Self {
        let mut rho = Matrix4::zeros();
        for &i in &[0, 3] {
            for &j in &[0, 3] {
                rho[(i, j)] = c(0.5);
            }
        }
        Self(rho)
    }

    pub fn maximally_mixed() -> Self {
        Self(Matrix4::identity() * c(0.25))
    }

    /// v·|Φ⁺⟩⟨Φ⁺| + (1 − v)·I/4.
    pub fn werner(v: f64) -> Result<Self, QstateError> {
        Self::phi_plus().depolarize(v)
    }

    /// Mixes with white noise: v·ρ + (1 − v)·I/4.
    pub fn depolarize(&self, v: f64) -> Result<Self, QstateError> {
        if !(0.0..=1.0).contains(&v) {
            return Err(QstateError::VisibilityOutOfRange(v));
        }
        Ok(Self(
            self.0 * c(v) + Self::maximally_mixed().0 * c(1.0 - v),
        ))
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Applies `u` to one photon: (u⊗I)ρ(u⊗I)† for Alice, (I⊗u)ρ(I⊗u)† for Bob.
    pub fn apply_local(&self, u: &PolarizationUnitary, side: Side) -> Self {
        let id = Matrix2::<Complex64>::identity();
        let full: Matrix4<Complex64> = match side {
            Side::Alice => u.0.kronecker(&id),
            Side::Bob => id.kronecker(&u.0),
        };
        Self(full * self.0 * full.adjoint())
    }

    /// Joint detection probability behind linear analyzers at the given angles.
    pub fn coincidence_prob(&self, angle_a: f64, angle_b: f64) -> f64 {
        let p: Matrix4<Complex64> = projector(angle_a).kronecker(&projector(angle_b));
        (p * self.0).trace().re.clamp(0.0, 1.0)
    }

    /// Outcome distribution `[bit_a][bit_b]` when Alice measures in `basis_a`
    /// and Bob in `basis_b`.
    pub fn outcome_table(&self, basis_a: Basis, basis_b: Basis) -> [[f64; 2]; 2] {
        let aa = basis_a.outcome_angles();
        let bb = basis_b.outcome_angles();
        let mut t = [[0.0; 2]; 2];
        for (i, &a) in aa.iter().enumerate() {
            for (j, &b) in bb.iter().enumerate() {
                t[i][j] = self.coincidence_prob(a, b);
            }
        }
        t
    }

    /// Probability that both sides decode different bits when both measure in `basis`.
    pub fn qber_prediction(&self, basis: Basis) -> f64 {
        let t = self.outcome_table(basis, basis);
        let same = t[0][0] + t[1][1];
        let diff = t[0][1] + t[1][0];
        if same + diff <= 0.0 {
            return 0.0;
        }
        (diff / (same + diff)).clamp(0.0, 1.0)
    }

    /// Fringe contrast with Alice fixed at the basis angle and Bob's analyzer swept.
    ///
    /// The joint probability is A + B·cos 2θ + C·sin 2θ in Bob's angle θ, so
    /// max and min are A ± √(B² + C²), read off three samples.
    pub fn visibility(&self, basis: Basis) -> f64 {
        let a_angle = basis.angle();
        let p0 = self.coincidence_prob(a_angle, 0.0);
        let p45 = self.coincidence_prob(a_angle, 45.0);
        let p90 = self.coincidence_prob(a_angle, 90.0);
        let mean = 0.5 * (p0 + p90);
        let b = 0.5 * (p0 - p90);
        let cc = p45 - mean;
        let amp = (b * b + cc * cc).sqrt();
        let (max, min) = (mean + amp, (mean - amp).max(0.0));
        if max + min <= 0.0 {
            0.0
        } else {
            (max - min) / (max + min)
        }
    }
}
