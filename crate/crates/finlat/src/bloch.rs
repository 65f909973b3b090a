//! Band structure of the infinite lattice V(z) = -V0 cos^2(z) in reduced
//! units, by two independent routes:
//!
//! * plane-wave diagonalization at real quasimomentum k, giving band
//!   energies E_n(k), group velocities and effective masses;
//! * the monodromy (transfer) matrix across one period at real energy E,
//!   giving the complex dispersion k(E) including the imaginary part inside
//!   gaps.
//!
//! Energies carry the -V0/2 offset of the cos^2 well, so a free particle
//! far outside the lattice envelope has E = p^2 on the same scale.

use nalgebra::DMatrix;

use crate::{FinlatError, Result};

/// Default plane-wave basis size (odd).
pub const DEFAULT_BASIS: usize = 31;
/// Basis growth per escalation step when checking truncation convergence.
const BASIS_STEP: usize = 4;
/// Largest basis tried before reporting a truncation error.
const BASIS_CAP: usize = 151;
/// Eigenvalue shift below which the truncation is considered converged (E_R).
const BASIS_TOL: f64 = 1e-10;

/// Default monodromy integration steps per lattice period. Ample for the
/// attenuation-rate values entering transmission integrals.
pub const MONODROMY_STEPS: usize = 1024;
/// Step count for band-edge refinement and determinant validation, where
/// absolute tolerances of 1e-10 are required up to E of a few tens of E_R.
pub const MONODROMY_STEPS_REFINE: usize = 4096;
/// |tr M|/2 within this of 1 counts as an allowed band (band edges included).
const EDGE_TOL: f64 = 1e-9;

/// Finite-difference step for dispersion derivatives (units of k_L).
const FD_STEP: f64 = 1e-3;
/// Curvature magnitude below which the effective mass is reported divergent.
const CURVATURE_MIN: f64 = 1e-4;

/// Fold a quasimomentum (units of k_L) into the reduced half-zone [0, 1]
/// using E(k) = E(-k) and periodicity in 2 k_L.
pub fn fold_k(k: f64) -> f64 {
    let r = k.abs() % 2.0;
    if r > 1.0 {
        2.0 - r
    } else {
        r
    }
}

/// Plane-wave Hamiltonian at quasimomentum `k` (units of k_L) for depth
/// `v0` (E_R): basis e^{i(k + 2n)z}, diagonal (k+2n)^2 - V0/2, first
/// off-diagonals -V0/4.
fn bloch_matrix(v0: f64, k: f64, basis: usize) -> DMatrix<f64> {
    let half = (basis / 2) as i64;
    let mut h = DMatrix::zeros(basis, basis);
    for (i, n) in (-half..=half).enumerate() {
        let kn = k + 2.0 * n as f64;
        h[(i, i)] = kn * kn - 0.5 * v0;
        if i + 1 < basis {
            h[(i, i + 1)] = -0.25 * v0;
            h[(i + 1, i)] = -0.25 * v0;
        }
    }
    h
}

/// Band energies at fixed quasimomentum from plane-wave diagonalization,
/// sorted ascending. `basis` must be odd.
pub fn diagonalize_bloch(v0: f64, k: f64, basis: usize) -> Vec<f64> {
    assert!(basis % 2 == 1, "plane-wave basis size must be odd");
    let mut ev: Vec<f64> = bloch_matrix(v0, fold_k(k), basis)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// First `n_bands` band energies at quasimomentum `k`, with the basis grown
/// in steps of 4 until the retained bands shift by less than 1e-10 E_R.
pub fn bloch_energies(v0: f64, k: f64, n_bands: usize) -> Result<Vec<f64>> {
    let mut basis = DEFAULT_BASIS.max(2 * n_bands + 1) | 1;
    let mut prev = diagonalize_bloch(v0, k, basis);
    while basis + BASIS_STEP <= BASIS_CAP {
        let next = diagonalize_bloch(v0, k, basis + BASIS_STEP);
        let shift = (0..n_bands)
            .map(|n| (next[n] - prev[n]).abs())
            .fold(0.0, f64::max);
        prev = next;
        if shift < BASIS_TOL {
            prev.truncate(n_bands);
            return Ok(prev);
        }
        basis += BASIS_STEP;
    }
    Err(FinlatError::Numerics(format!(
        "plane-wave truncation not converged at basis {BASIS_CAP} (depth {v0} E_R)"
    )))
}

/// Band energies E_n(k) of one depth on a uniform k grid over [0, k_L].
#[derive(Debug, Clone)]
pub struct BlochBands {
    /// Lattice depth (E_R).
    pub depth: f64,
    /// Quasimomentum grid (units of k_L), inclusive of both zone points.
    pub k_grid: Vec<f64>,
    /// energies[i][n] = E_n(k_grid[i]) in E_R.
    pub energies: Vec<Vec<f64>>,
    pub n_bands: usize,
}

impl BlochBands {
    pub fn compute(depth: f64, n_k: usize, n_bands: usize) -> Result<Self> {
        assert!(n_k >= 2);
        let k_grid: Vec<f64> = (0..n_k)
            .map(|i| i as f64 / (n_k - 1) as f64)
            .collect();
        let energies = k_grid
            .iter()
            .map(|&k| bloch_energies(depth, k, n_bands))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlochBands {
            depth,
            k_grid,
            energies,
            n_bands,
        })
    }

    /// Allowed energy interval of band `n`. Bands are monotonic across the
    /// half-zone, so the interval is spanned by the zone-point energies.
    pub fn allowed_interval(&self, n: usize) -> (f64, f64) {
        let at_zero = self.energies.first().unwrap()[n];
        let at_edge = self.energies.last().unwrap()[n];
        (at_zero.min(at_edge), at_zero.max(at_edge))
    }

    /// Gap between bands `n` and `n+1` as (lower edge, upper edge); the
    /// width is zero for a vanishing lattice.
    pub fn gap(&self, n: usize) -> (f64, f64) {
        (self.allowed_interval(n).1, self.allowed_interval(n + 1).0)
    }
}

/// One entry of the complex dispersion at fixed depth.
///
/// In an allowed band `re_k` is the real quasimomentum in [0, 1] (units of
/// k_L) and `im_k` = 0. Inside a gap `im_k` > 0 is the attenuation rate and
/// `re_k` is pinned to the branch: 0 at zone centre, 1 at zone edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexK {
    pub re_k: f64,
    pub im_k: f64,
}

impl ComplexK {
    pub fn in_gap(&self) -> bool {
        self.im_k > 0.0
    }
}

/// Monodromy-matrix integrator for one depth, reusable across energies.
///
/// Integrates u'' = (V(z) - E) u across one period [0, pi] with classic
/// fixed-step RK4; potential samples at the stage points are precomputed.
#[derive(Debug, Clone)]
pub struct MonodromyWorkspace {
    depth: f64,
    steps: usize,
    h: f64,
    /// V(z) at z = j h/2 for j = 0..=2*steps.
    v: Vec<f64>,
}

/// Monodromy trace and determinant at one energy.
#[derive(Debug, Clone, Copy)]
pub struct MonodromyData {
    pub trace: f64,
    pub det: f64,
}

impl MonodromyWorkspace {
    pub fn new(depth: f64, steps: usize) -> Self {
        assert!(steps >= 2);
        let h = std::f64::consts::PI / steps as f64;
        let v = (0..=2 * steps)
            .map(|j| {
                let c = (0.5 * h * j as f64).cos();
                -depth * c * c
            })
            .collect();
        MonodromyWorkspace { depth, steps, h, v }
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }

    /// Integrate both fundamental solutions across one period.
    pub fn integrate(&self, energy: f64) -> MonodromyData {
        // State (u1, u1', u2, u2') with u1(0)=1, u1'(0)=0, u2(0)=0, u2'(0)=1.
        let mut y = [1.0, 0.0, 0.0, 1.0];
        let h = self.h;
        let deriv = |c: f64, y: &[f64; 4]| [y[1], c * y[0], y[3], c * y[2]];
        for i in 0..self.steps {
            let c0 = self.v[2 * i] - energy;
            let c1 = self.v[2 * i + 1] - energy;
            let c2 = self.v[2 * i + 2] - energy;
            let k1 = deriv(c0, &y);
            let y2 = std::array::from_fn(|j| y[j] + 0.5 * h * k1[j]);
            let k2 = deriv(c1, &y2);
            let y3 = std::array::from_fn(|j| y[j] + 0.5 * h * k2[j]);
            let k3 = deriv(c1, &y3);
            let y4 = std::array::from_fn(|j| y[j] + h * k3[j]);
            let k4 = deriv(c2, &y4);
            for j in 0..4 {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
        }
        MonodromyData {
            trace: y[0] + y[3],
            det: y[0] * y[3] - y[1] * y[2],
        }
    }

    /// Complex quasimomentum at the given energy (units of k_L).
    pub fn complex_k(&self, energy: f64) -> ComplexK {
        let x = 0.5 * self.integrate(energy).trace;
        if x.abs() <= 1.0 + EDGE_TOL {
            ComplexK {
                re_k: x.clamp(-1.0, 1.0).acos() / std::f64::consts::PI,
                im_k: 0.0,
            }
        } else {
            ComplexK {
                re_k: if x > 0.0 { 0.0 } else { 1.0 },
                im_k: x.abs().acosh() / std::f64::consts::PI,
            }
        }
    }

    /// All band edges below `e_max`, found purely from the monodromy trace:
    /// roots of tr M = +-2 located by a dense scan with bisection, plus
    /// extremum refinement so that near-closed gaps are not skipped.
    pub fn band_edges(&self, e_max: f64) -> Vec<f64> {
        let e_min = -self.depth - 0.5;
        let step = 1e-3;
        let n = ((e_max - e_min) / step).ceil() as usize;
        let mut edges = Vec::new();
        let mut prev_e = e_min;
        let mut prev_t = self.integrate(prev_e).trace;
        let mut window = [(prev_e, prev_t); 3];
        for i in 1..=n {
            let e = e_min + i as f64 * step;
            let t = self.integrate(e).trace;
            for sign in [1.0, -1.0] {
                if (prev_t - 2.0 * sign) * (t - 2.0 * sign) < 0.0 {
                    edges.push(self.bisect_edge(prev_e, e, sign));
                }
            }
            window = [window[1], window[2], (e, t)];
            if i >= 2 {
                if let Some((lo, hi)) = self.straddling_extremum(window) {
                    edges.push(lo);
                    edges.push(hi);
                }
            }
            prev_e = e;
            prev_t = t;
        }
        edges.sort_by(f64::total_cmp);
        edges.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        edges
    }

    /// Refine a bracketed root of tr M - 2*sign by bisection.
    fn bisect_edge(&self, mut lo: f64, mut hi: f64, sign: f64) -> f64 {
        let f = |e: f64| self.integrate(e).trace - 2.0 * sign;
        let f_lo = f(lo);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if f(mid) * f_lo > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-11 {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Detect a gap narrower than the scan step: a local extremum of the
    /// trace that just pokes past +-2 between two same-side samples.
    fn straddling_extremum(&self, w: [(f64, f64); 3]) -> Option<(f64, f64)> {
        let [(e0, t0), (_, t1), (e2, t2)] = w;
        let sign = if t1 > 0.0 { 1.0 } else { -1.0 };
        let inside = |t: f64| t * sign < 2.0;
        if !(inside(t0) && inside(t1) && inside(t2)) {
            return None;
        }
        // Candidate only if the middle sample is an interior extremum
        // approaching the band-edge level.
        if !((t1 - t0) * sign > 0.0 && (t1 - t2) * sign > 0.0 && t1 * sign > 1.9) {
            return None;
        }
        // Golden-section maximize sign * trace over [e0, e2].
        let g = |e: f64| sign * self.integrate(e).trace;
        let (mut a, mut b) = (e0, e2);
        let phi = 0.5 * (5.0_f64.sqrt() - 1.0);
        let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
        let (mut gc, mut gd) = (g(c), g(d));
        for _ in 0..50 {
            if gc > gd {
                b = d;
                d = c;
                gd = gc;
                c = b - phi * (b - a);
                gc = g(c);
            } else {
                a = c;
                c = d;
                gc = gd;
                d = a + phi * (b - a);
                gd = g(d);
            }
        }
        let peak = 0.5 * (a + b);
        if g(peak) <= 2.0 {
            return None;
        }
        Some((
            self.bisect_edge(e0, peak, sign),
            self.bisect_edge(peak, e2, sign),
        ))
    }
}

/// Complex quasimomentum at one (depth, energy) point.
pub fn complex_k(depth: f64, energy: f64) -> ComplexK {
    MonodromyWorkspace::new(depth, MONODROMY_STEPS).complex_k(energy)
}

/// Complex dispersion of one depth sampled over an energy window.
#[derive(Debug, Clone)]
pub struct ComplexDispersion {
    pub depth: f64,
    pub energies: Vec<f64>,
    pub points: Vec<ComplexK>,
}

impl ComplexDispersion {
    pub fn compute(depth: f64, e_min: f64, e_max: f64, n: usize) -> Self {
        assert!(n >= 2 && e_max > e_min);
        let ws = MonodromyWorkspace::new(depth, MONODROMY_STEPS);
        let energies: Vec<f64> = (0..n)
            .map(|i| e_min + (e_max - e_min) * i as f64 / (n - 1) as f64)
            .collect();
        let points = energies.iter().map(|&e| ws.complex_k(e)).collect();
        ComplexDispersion {
            depth,
            energies,
            points,
        }
    }
}

/// d E_n/dk at `k` (energy E_R, k in k_L; velocity unit is p_R/2m), by
/// Richardson-extrapolated central differences on the band energies.
pub fn group_velocity(depth: f64, band: usize, k: f64) -> Result<f64> {
    let e = |kk: f64| -> Result<f64> { Ok(bloch_energies(depth, kk, band + 1)?[band]) };
    let diff = |h: f64| -> Result<f64> {
        // Signed sampling: fold_k maps k+h and k-h to the same point at the
        // zone boundaries, which correctly yields zero slope there.
        Ok((e(k + h)? - e(k - h)?) / (2.0 * h))
    };
    let d1 = diff(FD_STEP)?;
    let d2 = diff(0.5 * FD_STEP)?;
    Ok((4.0 * d2 - d1) / 3.0)
}

/// Effective mass m*/m at `k` from the band curvature,
/// m* = 2 / (d^2 E_n/dk^2) in reduced units. Near an inflection point the
/// curvature vanishes and the effective mass is reported as divergent.
pub fn effective_mass(depth: f64, band: usize, k: f64) -> Result<f64> {
    let e = |kk: f64| -> Result<f64> { Ok(bloch_energies(depth, kk, band + 1)?[band]) };
    let e0 = e(k)?;
    let second = |h: f64| -> Result<f64> { Ok((e(k + h)? - 2.0 * e0 + e(k - h)?) / (h * h)) };
    let d1 = second(FD_STEP)?;
    let d2 = second(0.5 * FD_STEP)?;
    let curv = (4.0 * d2 - d1) / 3.0;
    if curv.abs() < CURVATURE_MIN {
        return Err(FinlatError::Numerics(format!(
            "effective mass diverges: band {band} curvature {curv:.2e} at k = {k:.6} k_L"
        )));
    }
    Ok(2.0 / curv)
}

/// Containment slack for band-edge comparisons (E_R). Band edges from the
/// refined monodromy and from diagonalization agree far tighter than this.
const BAND_EDGE_SLACK: f64 = 1e-9;
/// Number of bands scanned when locating an energy in the band structure.
const BAND_SCAN: usize = 12;

/// Quasimomentum k in [0, 1] solving E_band(k) = `energy` at `depth`, by
/// bisection on the monotone in-band dispersion; None when the energy lies
/// outside the band's range.
pub fn quasimomentum_in_band(depth: f64, band: usize, energy: f64) -> Result<Option<f64>> {
    let e_at = |k: f64| -> Result<f64> { Ok(bloch_energies(depth, k, band + 1)?[band]) };
    let (e0, e1) = (e_at(0.0)?, e_at(1.0)?);
    let (lo, hi) = (e0.min(e1), e0.max(e1));
    if energy < lo - BAND_EDGE_SLACK || energy > hi + BAND_EDGE_SLACK {
        return Ok(None);
    }
    let (mut ka, mut kb) = (0.0, 1.0);
    let mut fa = e0 - energy;
    for _ in 0..60 {
        let km = 0.5 * (ka + kb);
        let fm = e_at(km)? - energy;
        if fa * fm <= 0.0 {
            kb = km;
        } else {
            ka = km;
            fa = fm;
        }
        if kb - ka < 1e-12 {
            break;
        }
    }
    Ok(Some(0.5 * (ka + kb)))
}

/// Locate `energy` in the band structure at `depth`: the lowest band whose
/// range contains it, together with the quasimomentum where the dispersion
/// crosses it. None when the energy sits in a gap (or below band 0).
pub fn band_at_energy(depth: f64, energy: f64) -> Result<Option<(usize, f64)>> {
    let e0 = bloch_energies(depth, 0.0, BAND_SCAN)?;
    let e1 = bloch_energies(depth, 1.0, BAND_SCAN)?;
    for n in 0..BAND_SCAN {
        let lo = e0[n].min(e1[n]);
        let hi = e0[n].max(e1[n]);
        if energy >= lo - BAND_EDGE_SLACK && energy <= hi + BAND_EDGE_SLACK {
            let k = quasimomentum_in_band(depth, n, energy)?
                .unwrap_or(if e0[n] <= e1[n] { 0.0 } else { 1.0 });
            return Ok(Some((n, k)));
        }
    }
    Ok(None)
}

/// Index of the gap containing `energy` at `depth`: gap n separates bands
/// n-1 and n, so the index equals the number of bands entirely below.
/// None when the energy lies inside an allowed band.
pub fn gap_index_at(depth: f64, energy: f64) -> Result<Option<usize>> {
    let e0 = bloch_energies(depth, 0.0, BAND_SCAN)?;
    let e1 = bloch_energies(depth, 1.0, BAND_SCAN)?;
    let mut below = 0;
    for n in 0..BAND_SCAN {
        let lo = e0[n].min(e1[n]);
        let hi = e0[n].max(e1[n]);
        if energy >= lo - BAND_EDGE_SLACK && energy <= hi + BAND_EDGE_SLACK {
            return Ok(None);
        }
        if hi < energy {
            below = n + 1;
        }
    }
    Ok(Some(below))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Free-particle energies at quasimomentum k: (k + 2n)^2 sorted.
    fn free_folded(k: f64, n_bands: usize) -> Vec<f64> {
        let mut e: Vec<f64> = (-12..=12)
            .map(|n| {
                let kn = k + 2.0 * n as f64;
                kn * kn
            })
            .collect();
        e.sort_by(f64::total_cmp);
        e.truncate(n_bands);
        e
    }

    #[test]
    fn zero_depth_reproduces_folded_free_dispersion() {
        for &k in &[0.0, 0.17, 0.5, 0.93, 1.0] {
            let bands = bloch_energies(0.0, k, 6).unwrap();
            let free = free_folded(k, 6);
            for (b, f) in bands.iter().zip(&free) {
                assert!((b - f).abs() < 1e-10, "k={k}: {b} vs {f}");
            }
        }
    }

    #[test]
    fn dispersion_symmetry_and_periodicity() {
        for &k in &[0.2, 0.4, 0.8] {
            let a = bloch_energies(9.0, k, 4).unwrap();
            let b = bloch_energies(9.0, -k, 4).unwrap();
            let c = bloch_energies(9.0, k + 2.0, 4).unwrap();
            let d = bloch_energies(9.0, 2.0 - k, 4).unwrap();
            for n in 0..4 {
                assert!((a[n] - b[n]).abs() < 1e-12);
                assert!((a[n] - c[n]).abs() < 1e-12);
                assert!((a[n] - d[n]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shallow_first_gap_matches_perturbation_theory() {
        // Degenerate first-order value: gap = V0/2 at the zone edge.
        for &v0 in &[0.05, 0.1] {
            let e = bloch_energies(v0, 1.0, 2).unwrap();
            let gap = e[1] - e[0];
            assert!(
                (gap - 0.5 * v0).abs() < 0.05 * (0.5 * v0),
                "V0={v0}: gap {gap} vs {}",
                0.5 * v0
            );
        }
    }

    #[test]
    fn cos2_offset_is_retained() {
        // Deep-lattice ground band sits near -V0 + sqrt(V0) (harmonic level
        // of the -V0 cos^2 well), far below zero: the -V0/2 offset is kept.
        let e = bloch_energies(30.0, 0.0, 1).unwrap()[0];
        let harmonic = -30.0 + 30.0_f64.sqrt();
        assert!((e - harmonic).abs() < 0.5, "E0 = {e}, harmonic {harmonic}");
    }

    #[test]
    fn basis_escalation_matches_large_basis() {
        let auto = bloch_energies(25.0, 0.3, 8).unwrap();
        let big = diagonalize_bloch(25.0, 0.3, 101);
        for n in 0..8 {
            assert!((auto[n] - big[n]).abs() < 1e-10);
        }
    }

    #[test]
    fn absurd_depth_reports_truncation_error() {
        match bloch_energies(1e6, 0.0, 4) {
            Err(FinlatError::Numerics(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn monodromy_det_is_one_across_scan() {
        // Scan from just below the lowest band to well above the fourth gap.
        // (Far below the potential minimum both solutions grow exponentially
        // and the Wronskian loses digits to cancellation; no dispersion data
        // is ever queried there.)
        let ws = MonodromyWorkspace::new(9.0, MONODROMY_STEPS_REFINE);
        let bottom = bloch_energies(9.0, 0.0, 1).unwrap()[0];
        let mut e = bottom - 0.5;
        while e < 25.0 {
            let d = ws.integrate(e).det;
            assert!((d - 1.0).abs() < 1e-10, "det - 1 = {:.3e} at E={e}", d - 1.0);
            e += 0.1;
        }
    }

    #[test]
    fn monodromy_step_doubling_converges() {
        let coarse = MonodromyWorkspace::new(9.0, MONODROMY_STEPS);
        let fine = MonodromyWorkspace::new(9.0, 2 * MONODROMY_STEPS);
        for &e in &[-5.0, -1.3, 0.7, 4.2, 9.9] {
            let a = coarse.integrate(e).trace;
            let b = fine.integrate(e).trace;
            assert!((a - b).abs() < 1e-7, "trace drift {:.2e} at E={e}", a - b);
        }
    }

    #[test]
    fn band_edges_agree_between_routes() {
        // Cross-oracle: eigenvalue edges vs monodromy trace roots.
        let bands = BlochBands::compute(9.0, 2, 5).unwrap();
        let mut diag_edges = Vec::new();
        for n in 0..5 {
            let (lo, hi) = bands.allowed_interval(n);
            diag_edges.push(lo);
            diag_edges.push(hi);
        }
        diag_edges.sort_by(f64::total_cmp);
        let e_max = diag_edges.last().unwrap() + 0.5;
        let mono_edges = MonodromyWorkspace::new(9.0, MONODROMY_STEPS_REFINE).band_edges(e_max);
        assert!(
            mono_edges.len() >= diag_edges.len(),
            "found {} monodromy edges, need {}",
            mono_edges.len(),
            diag_edges.len()
        );
        for (d, m) in diag_edges.iter().zip(&mono_edges) {
            assert!((d - m).abs() < 1e-6, "edge {d:.8} vs {m:.8}");
        }
    }

    #[test]
    fn complex_k_is_consistent_with_diagonalization_in_allowed_band() {
        // Mid-band energy: im k = 0 and the real quasimomentum maps back to
        // the same energy through the eigenvalue route.
        let bands = BlochBands::compute(9.0, 2, 3).unwrap();
        let (lo, hi) = bands.allowed_interval(2);
        let e_mid = 0.5 * (lo + hi);
        let ck = complex_k(9.0, e_mid);
        assert_eq!(ck.im_k, 0.0);
        assert!(ck.re_k > 0.0 && ck.re_k < 1.0);
        let back = bloch_energies(9.0, ck.re_k, 3).unwrap()[2];
        assert!((back - e_mid).abs() < 1e-6, "{back} vs {e_mid}");
    }

    #[test]
    fn gap_branches_alternate_and_im_k_has_single_interior_maximum() {
        let ws = MonodromyWorkspace::new(9.0, MONODROMY_STEPS);
        let bands = BlochBands::compute(9.0, 2, 4).unwrap();
        for n in 0..3 {
            let (lo, hi) = bands.gap(n);
            assert!(hi - lo > 1e-3, "gap {n} too narrow to probe");
            // Zone-edge branch for even n (first gap), zone-centre for odd.
            let expect_re = if n % 2 == 0 { 1.0 } else { 0.0 };
            let m = 400;
            let mut last = 0.0;
            let mut rises_done = false;
            let mut interior_max = 0.0_f64;
            for i in 1..m {
                let e = lo + (hi - lo) * i as f64 / m as f64;
                let ck = ws.complex_k(e);
                assert!(ck.im_k > 0.0, "gap {n} interior must be evanescent");
                assert_eq!(ck.re_k, expect_re, "gap {n} branch at E={e}");
                if ck.im_k < last {
                    rises_done = true;
                } else {
                    assert!(!rises_done, "gap {n}: im k rose again after falling");
                }
                interior_max = interior_max.max(ck.im_k);
                last = ck.im_k;
            }
            // Vanishes at the edges (within the edge clamp).
            assert_eq!(ws.complex_k(lo + 1e-12).im_k, 0.0);
            assert_eq!(ws.complex_k(hi - 1e-12).im_k, 0.0);
            assert!(interior_max > 1e-3);
        }
    }

    #[test]
    fn gap_widths_grow_with_depth() {
        let depths = [3.0, 9.0, 15.0];
        for n in 0..3 {
            let mut widths = Vec::new();
            for &v0 in &depths {
                let bands = BlochBands::compute(v0, 2, 4).unwrap();
                let (lo, hi) = bands.gap(n);
                widths.push(hi - lo);
            }
            assert!(
                widths[0] < widths[1] && widths[1] < widths[2],
                "gap {n} widths {widths:?}"
            );
        }
    }

    #[test]
    fn free_particle_group_velocity_and_mass() {
        let v = group_velocity(0.0, 0, 0.3).unwrap();
        assert!((v - 0.6).abs() < 1e-8, "v = {v}");
        let m = effective_mass(0.0, 0, 0.3).unwrap();
        assert!((m - 1.0).abs() < 1e-6, "m* = {m}");
        // Zone boundaries: zero slope by symmetry.
        assert!(group_velocity(9.0, 0, 0.0).unwrap().abs() < 1e-9);
        assert!(group_velocity(9.0, 0, 1.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn deep_lattice_ground_band_mass_matches_tight_binding() {
        // Tight-binding cosine band: m*/m at k=0 equals 4 / (pi^2 W) with W
        // the bandwidth; at V0 = 15 E_R the ground band is heavy.
        let bands = BlochBands::compute(15.0, 2, 1).unwrap();
        let (lo, hi) = bands.allowed_interval(0);
        let w = hi - lo;
        let tb = 4.0 / (std::f64::consts::PI.powi(2) * w);
        let m = effective_mass(15.0, 0, 0.0).unwrap();
        assert!(m > 5.0, "ground band not heavy: m* = {m}");
        assert!((m - tb).abs() / tb < 0.15, "m* {m:.3} vs tight-binding {tb:.3}");
    }

    #[test]
    fn effective_mass_divergence_is_reported_at_inflection() {
        // Band 1 at depth 9 bends upward at one zone point and downward at
        // the other, so its curvature crosses zero inside the half-zone.
        let curv = |k: f64| {
            let h = 1e-3;
            let e = |kk: f64| bloch_energies(9.0, kk, 2).unwrap()[1];
            (e(k + h) - 2.0 * e(k) + e(k - h)) / (h * h)
        };
        let (mut lo, mut hi) = (0.05, 0.95);
        let c_lo = curv(lo);
        assert!(
            c_lo * curv(hi) < 0.0,
            "no curvature sign change found in band 1"
        );
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if curv(mid) * c_lo > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let k_inflection = 0.5 * (lo + hi);
        match effective_mass(9.0, 1, k_inflection) {
            Err(FinlatError::Numerics(msg)) => {
                assert!(msg.contains("diverges"), "unexpected message: {msg}")
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
