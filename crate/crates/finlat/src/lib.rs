//! Matter-wave dynamics in spatially finite, time-dependent optical lattices.
//!
//! A Gaussian-envelope standing-wave potential acts on slow atoms as a
//! band-gap mirror: wherever the atom's total energy falls inside a local
//! band gap the wave is evanescent, and a pair of such regions around the
//! envelope centre forms a cavity. This crate computes the local band
//! structure and complex dispersion of the envelope lattice, the resulting
//! momentum-dependent transmission, and the full time-dependent dynamics
//! (capture by ramping the depth, collapse and revival of the trapped
//! packet), plus the box-well analysis used to interpret revival times.
//!
//! All internal computation uses recoil units: lengths in 1/k_L, momenta in
//! p_R = hbar k_L, energies in E_R = p_R^2 / 2m, times in t_R = hbar / E_R.
//! In these units hbar = 1, the Schroedinger equation reads
//! i dpsi/dt = (-d^2/dz^2 + V) psi, a free particle with momentum p has
//! energy p^2 and velocity 2p. SI enters only at the I/O boundary through
//! [`units::RecoilUnits`].

pub mod bandmap;
pub mod bloch;
pub mod config;
pub mod output;
pub mod propagate;
pub mod revival;
pub mod runner;
pub mod transmission;
pub mod units;

use thiserror::Error;

/// Crate-wide error type. The CLI maps the variants onto distinct exit codes.
#[derive(Debug, Error)]
pub enum FinlatError {
    /// Invalid or inconsistent user input (config keys, parameter ranges).
    #[error("configuration: {0}")]
    Config(String),
    /// A numerical method failed to converge or an accuracy gate tripped.
    #[error("numerics: {0}")]
    Numerics(String),
    /// File-system I/O failed.
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FinlatError>;

impl FinlatError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            FinlatError::Config(_) => 2,
            FinlatError::Numerics(_) => 3,
            FinlatError::Io(_) => 4,
        }
    }
}
