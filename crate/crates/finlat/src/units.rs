//! Lattice geometry, recoil unit system and the transverse-guide check.
//!
//! Physical constants are CODATA 2018 / SI-2019 exact values.

use crate::{FinlatError, Result};

/// Reduced Planck constant (J s), h / 2 pi with h exact.
pub const HBAR: f64 = 1.054_571_817_646_156_5e-34;
/// Atomic mass constant (kg).
pub const ATOMIC_MASS: f64 = 1.660_539_066_60e-27;
/// Mass of 87Rb (kg), 86.909180531 u.
pub const RB87_MASS: f64 = 86.909_180_531 * ATOMIC_MASS;

/// Two interfering Gaussian beams that generate the lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamPair {
    /// Beam wavelength lambda_b (m).
    pub wavelength: f64,
    /// Full angle between the beams (rad).
    pub full_angle: f64,
    /// Beam waist w_b (m).
    pub waist: f64,
}

/// Geometry of the finite standing-wave lattice
/// V(z) = -V0 exp(-2 z^2 / w_z^2) cos^2(k_lat z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeGeometry {
    /// Fringe period P (m).
    pub period: f64,
    /// Lattice wave number k_lat = pi / P (1/m).
    pub k_lat: f64,
    /// Axial envelope waist w_z (m).
    pub w_z: f64,
    /// Transverse envelope waist (m); known only for beam-derived geometries.
    pub w_perp: Option<f64>,
    /// Generating beams, when the geometry was built from a beam pair.
    pub beams: Option<BeamPair>,
}

/// Geometry from two beams crossing at `full_angle`:
/// k_lat = k_b sin(angle/2), w_z = w_b / cos(angle/2), w_perp = w_b / sin(angle/2).
pub fn lattice_from_beams(wavelength: f64, full_angle: f64, waist: f64) -> Result<LatticeGeometry> {
    if !(wavelength > 0.0) || !(waist > 0.0) {
        return Err(FinlatError::Config(
            "beam wavelength and waist must be positive".into(),
        ));
    }
    if !(full_angle > 0.0 && full_angle < std::f64::consts::PI) {
        return Err(FinlatError::Config(
            "beam angle must lie strictly between 0 and pi".into(),
        ));
    }
    let half = 0.5 * full_angle;
    let k_b = 2.0 * std::f64::consts::PI / wavelength;
    let k_lat = k_b * half.sin();
    Ok(LatticeGeometry {
        period: std::f64::consts::PI / k_lat,
        k_lat,
        w_z: waist / half.cos(),
        w_perp: Some(waist / half.sin()),
        beams: Some(BeamPair {
            wavelength,
            full_angle,
            waist,
        }),
    })
}

/// Geometry specified directly by fringe period and axial waist.
pub fn lattice_from_period(period: f64, w_z: f64) -> Result<LatticeGeometry> {
    if !(period > 0.0) || !(w_z > 0.0) {
        return Err(FinlatError::Config(
            "lattice period and waist must be positive".into(),
        ));
    }
    Ok(LatticeGeometry {
        period,
        k_lat: std::f64::consts::PI / period,
        w_z,
        w_perp: None,
        beams: None,
    })
}

/// Recoil scales of a lattice/atom pair: the unit system used internally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoilUnits {
    /// Atom mass (kg).
    pub mass: f64,
    /// Recoil momentum p_R = hbar k_lat (kg m/s).
    pub momentum: f64,
    /// Recoil energy E_R = p_R^2 / 2m (J).
    pub energy: f64,
    /// Recoil time t_R = hbar / E_R (s).
    pub time: f64,
    /// Recoil length 1 / k_lat (m).
    pub length: f64,
}

/// Recoil unit system for the given lattice wave number and atom mass.
pub fn recoil_units(k_lat: f64, mass: f64) -> Result<RecoilUnits> {
    if !(k_lat > 0.0) || !(mass > 0.0) {
        return Err(FinlatError::Config(
            "wave number and mass must be positive".into(),
        ));
    }
    let momentum = HBAR * k_lat;
    let energy = momentum * momentum / (2.0 * mass);
    Ok(RecoilUnits {
        mass,
        momentum,
        energy,
        time: HBAR / energy,
        length: 1.0 / k_lat,
    })
}

impl RecoilUnits {
    /// Recoil velocity p_R / m (m/s).
    pub fn velocity(&self) -> f64 {
        self.momentum / self.mass
    }

    /// Velocity of the internal unit system, length/time = p_R / 2m (m/s).
    ///
    /// A free particle with reduced momentum p moves at reduced speed 2p.
    pub fn reduced_velocity_unit(&self) -> f64 {
        self.length / self.time
    }

    /// Convert a time in seconds to reduced time.
    pub fn time_to_reduced(&self, seconds: f64) -> f64 {
        seconds / self.time
    }

    /// Convert a reduced time to seconds.
    pub fn time_from_reduced(&self, reduced: f64) -> f64 {
        reduced * self.time
    }

    /// Convert a length in metres to reduced length.
    pub fn length_to_reduced(&self, metres: f64) -> f64 {
        metres / self.length
    }

    /// Convert a reduced length to metres.
    pub fn length_from_reduced(&self, reduced: f64) -> f64 {
        reduced * self.length
    }
}

/// Harmonic transverse guide that freezes out radial motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransverseGuide {
    /// Guide depth V_g (J).
    pub depth: f64,
    /// Guide waist w_g (m).
    pub waist: f64,
    /// Radial trap frequency omega_ho = sqrt(4 V_g / (m w_g^2)) (rad/s).
    pub omega_ho: f64,
    /// Oscillator length a_ho = sqrt(hbar / (m omega_ho)) (m).
    pub a_ho: f64,
}

impl TransverseGuide {
    pub fn new(depth: f64, waist: f64, mass: f64) -> Result<Self> {
        if !(depth > 0.0) || !(waist > 0.0) || !(mass > 0.0) {
            return Err(FinlatError::Config(
                "guide depth, waist and mass must be positive".into(),
            ));
        }
        let omega_ho = (4.0 * depth / (mass * waist * waist)).sqrt();
        Ok(TransverseGuide {
            depth,
            waist,
            omega_ho,
            a_ho: (HBAR / (mass * omega_ho)).sqrt(),
        })
    }
}

/// Whether the dynamics stays one-dimensional: total energy below the first
/// radial excitation hbar omega_ho. Returns the verdict and the ratio
/// E / (hbar omega_ho) as margin (valid iff margin < 1).
pub fn validate_1d_regime(guide: &TransverseGuide, total_energy: f64) -> (bool, f64) {
    let margin = total_energy / (HBAR * guide.omega_ho);
    (margin < 1.0, margin)
}
