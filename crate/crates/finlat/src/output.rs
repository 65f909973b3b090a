//! Deterministic artifact writers: CSV tables, matrix exports and the run
//! manifest. All floats are printed with `{:.12e}` so a fixed config and
//! build produce byte-identical files; nothing here records timestamps.

use crate::units::RecoilUnits;
use crate::{FinlatError, Result};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Canonical float formatting for data files.
pub fn fnum(x: f64) -> String {
    format!("{x:.12e}")
}

/// Write a CSV with a fixed header and pre-joined rows.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

/// Write a matrix as CSV: the first row carries the column coordinates, the
/// first column of every following row carries that row's coordinate.
pub fn write_matrix_csv(
    path: &Path,
    corner: &str,
    row_coords: &[f64],
    col_coords: &[f64],
    rows: &[Vec<f64>],
) -> Result<()> {
    if rows.len() != row_coords.len() || rows.iter().any(|r| r.len() != col_coords.len()) {
        return Err(FinlatError::Config(
            "matrix export: coordinate lengths do not match the data".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::from(corner);
    for c in col_coords {
        header.push(',');
        header.push_str(&fnum(*c));
    }
    writeln!(w, "{header}")?;
    for (rc, row) in row_coords.iter().zip(rows) {
        let mut line = fnum(*rc);
        for v in row {
            line.push(',');
            line.push_str(&fnum(*v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| FinlatError::Io(std::io::Error::other(e)))?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{text}")?;
    w.flush()?;
    Ok(())
}

/// Outcome of one convergence gate.
#[derive(Debug, Clone, Serialize)]
pub struct GateResult {
    pub name: String,
    pub pass: bool,
    /// The quantity the gate measured.
    pub measured: f64,
    /// The acceptance bound it was held against.
    pub bound: f64,
    pub detail: String,
}

/// SI values of the reduced units the run was computed in.
#[derive(Debug, Clone, Serialize)]
pub struct UnitTable {
    pub k_lat_per_m: f64,
    pub recoil_momentum_kg_m_per_s: f64,
    pub recoil_energy_j: f64,
    pub recoil_time_s: f64,
    pub length_unit_m: f64,
}

impl UnitTable {
    pub fn from_units(units: &RecoilUnits) -> Self {
        UnitTable {
            k_lat_per_m: 1.0 / units.length,
            recoil_momentum_kg_m_per_s: units.momentum,
            recoil_energy_j: units.energy,
            recoil_time_s: units.time,
            length_unit_m: units.length,
        }
    }
}

/// Per-run record of what was computed, from what, and how trustworthy the
/// stepper was: the effective config, derived units, convergence-gate
/// results and the files written.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub mode: String,
    pub code_version: String,
    pub inputs: serde_json::Value,
    pub units: UnitTable,
    pub gates: Vec<GateResult>,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_is_locale_free_and_round_trips() {
        for &x in &[0.0, 1.0, -2.4, 1.0 / 3.0, 6.25e-10, -1.7e300] {
            let s = fnum(x);
            assert!(!s.contains(' '));
            let back: f64 = s.parse().unwrap();
            let rel = if x == 0.0 {
                back.abs()
            } else {
                ((back - x) / x).abs()
            };
            assert!(rel < 1e-12, "{s} round-tripped to {back}");
        }
    }

    #[test]
    fn matrix_export_rejects_ragged_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let bad = write_matrix_csv(
            &path,
            "t\\z",
            &[0.0, 1.0],
            &[0.0, 1.0, 2.0],
            &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0]],
        );
        assert!(bad.is_err());
        write_matrix_csv(
            &path,
            "t\\z",
            &[0.0, 1.0],
            &[0.0, 1.0, 2.0],
            &[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("t\\z,"));
        assert_eq!(lines[1].split(',').count(), 4);
    }
}
