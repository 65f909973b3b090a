//! Analytic transmission through the finite lattice.
//!
//! A fixed incident momentum p (energy E = p^2 in reduced units) sees the
//! position-dependent band structure of [`crate::bandmap`]. Wherever E falls
//! into a local gap the wave is evanescent and one traversal of the half
//! structure is attenuated by exp(-2 int_0^zmax Im k dz). When the centre is
//! allowed the two mirror regions form a cavity and incoherent multiple
//! reflections resum to T+/(2-T+); when the centre itself is evanescent the
//! structure is a single composite barrier with T = T+^2. The analytic curve
//! is finally averaged over the Gaussian momentum distribution of the
//! incident packet.
//!
//! Intensities only: reflections add probabilities, not amplitudes, so there
//! are no cavity interference fringes. Reflection is R = 1 - T.

use crate::bandmap::LocalBandMap;
use crate::{FinlatError, Result};
use rayon::prelude::*;

/// Samples per half gap interval for the attenuation quadrature.
const QUAD_BASE_PANELS: usize = 64;
/// Panel cap for the doubling refinement of one gap integral.
const QUAD_MAX_PANELS: usize = 8192;
/// Relative tolerance on the attenuation exponent.
pub const QUAD_REL_TOL: f64 = 1e-4;
/// Coarse z samples when locating gap intervals along the envelope.
const GAP_SCAN_POINTS: usize = 512;
/// Bisection tolerance for gap edges (units of 1/k_L); the integrand
/// vanishes at the edge, so the integral is insensitive to this.
const GAP_EDGE_TOL: f64 = 1e-3;
/// Base node count of the momentum-averaging quadrature.
const AVG_BASE_NODES: usize = 257;
/// Absolute doubling tolerance on the averaged transmission.
pub const AVG_ABS_TOL: f64 = 1e-6;

/// One-pass attenuation of the half structure at a single momentum.
#[derive(Debug, Clone)]
pub struct HalfTransmission {
    /// Incident momentum (p_R).
    pub p: f64,
    /// T+ = exp(-2 * attenuation).
    pub t_plus: f64,
    /// int_0^zmax Im k dz (dimensionless).
    pub attenuation: f64,
    /// Gap intervals on the z >= 0 side, innermost first.
    pub gap_intervals: Vec<(f64, f64)>,
    /// Attenuation integral of each interval.
    pub per_gap: Vec<f64>,
    /// Whether the centre z = 0 is in a locally allowed band.
    pub center_in_band: bool,
}

/// Analytic transmission scan with momentum averaging.
#[derive(Debug, Clone)]
pub struct TransmissionCurve {
    /// Report grid of incident momenta (p_R).
    pub p_grid: Vec<f64>,
    /// Monochromatic transmission T(p) on the report grid.
    pub t_mono: Vec<f64>,
    /// Gaussian-averaged transmission on the report grid.
    pub t_ave: Vec<f64>,
    /// Number of distinct gap intervals per side at each report momentum.
    pub gap_pairs: Vec<usize>,
    /// rms momentum spread of the averaging kernel (p_R).
    pub sigma_p: f64,
    /// Peak depth (E_R) of the lattice the curve was computed for.
    pub v0: f64,
    /// Envelope waist (1/k_L).
    pub w_z: f64,
}

/// T+ from the attenuation exponent.
pub fn t_plus_from_attenuation(attenuation: f64) -> f64 {
    (-2.0 * attenuation).exp()
}

/// Attenuation integral over one gap interval [a, b].
///
/// Im k vanishes like sqrt(distance) at both edges, so each half of the
/// interval is integrated in the variable u with z = edge +/- span * u^2,
/// which removes the singular derivative; Simpson quadrature on the smooth
/// integrand then converges rapidly and is refined by doubling.
fn gap_attenuation(map: &LocalBandMap, p: f64, a: f64, b: f64) -> Result<f64> {
    let c = 0.5 * (a + b);
    let half = |edge: f64, inner: f64| -> Result<f64> {
        let span = inner - edge; // signed
        let f = |u: f64| 2.0 * span.abs() * u * map.im_k_at(edge + span * u * u, p);
        let mut panels = QUAD_BASE_PANELS;
        let mut prev = simpson(&f, 0.0, 1.0, panels);
        loop {
            panels *= 2;
            let next = simpson(&f, 0.0, 1.0, panels);
            let scale = next.abs().max(1e-3);
            if (next - prev).abs() <= 0.5 * QUAD_REL_TOL * scale {
                return Ok(next);
            }
            if panels >= QUAD_MAX_PANELS {
                return Err(FinlatError::Numerics(format!(
                    "gap integral did not converge at p = {p}, interval ({a}, {b})"
                )));
            }
            prev = next;
        }
    };
    Ok(half(a, c)? + half(b, c)?)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels.max(2) & !1; // even
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// One-pass transmission T+ of the half structure at momentum `p`.
///
/// Gap intervals are located with `kappa_min` as the detection threshold;
/// regions with Im k below it contribute at most kappa_min per unit length
/// and are treated as allowed.
pub fn half_transmission(
    map: &LocalBandMap,
    p: f64,
    kappa_min: f64,
) -> Result<HalfTransmission> {
    let center_in_band = map.im_k_at(0.0, p) <= kappa_min;
    let gap_intervals = map.gap_intervals(p, kappa_min, GAP_SCAN_POINTS, GAP_EDGE_TOL);
    let mut per_gap = Vec::with_capacity(gap_intervals.len());
    for &(a, b) in &gap_intervals {
        per_gap.push(gap_attenuation(map, p, a, b)?);
    }
    let attenuation: f64 = per_gap.iter().sum();
    Ok(HalfTransmission {
        p,
        t_plus: t_plus_from_attenuation(attenuation),
        attenuation,
        gap_intervals,
        per_gap,
        center_in_band,
    })
}

/// Total transmission of the symmetric structure from the one-pass T+.
///
/// An allowed centre means two mirrors enclosing a cavity; summing the
/// intensities of all multiple reflections gives T+/(2-T+). An evanescent
/// centre is a single composite barrier crossed once: T = T+^2.
pub fn total_transmission(t_plus: f64, center_in_band: bool) -> f64 {
    debug_assert!((0.0..=1.0).contains(&t_plus));
    if center_in_band {
        t_plus / (2.0 - t_plus)
    } else {
        t_plus * t_plus
    }
}

/// Partial sum of the multiple-reflection series after `round_trips`
/// internal round trips: T+^2 sum_{j=0..n} (1-T+)^(2j).
///
/// Converges geometrically (ratio (1-T+)^2) to the closed form
/// T+/(2-T+) of [`total_transmission`].
pub fn cavity_transmission_bounces(t_plus: f64, round_trips: usize) -> f64 {
    let r = 1.0 - t_plus;
    let mut sum = 0.0;
    let mut term = t_plus * t_plus;
    for _ in 0..=round_trips {
        sum += term;
        term *= r * r;
    }
    sum
}

/// Total analytic transmission at one momentum, with the multi-gap flag.
///
/// A single pair of mirrors uses the exact resummation. When the energy
/// traverses two or more distinct gap pairs the structure is a chain of
/// cavities; incoherent chaining of the per-gap resummations
/// (product of A_i/(2-A_i)) is a conservative lower bound and the momentum
/// is flagged through the returned gap count.
pub fn monochromatic_transmission(ht: &HalfTransmission) -> f64 {
    if !ht.center_in_band {
        return total_transmission(ht.t_plus, false);
    }
    if ht.gap_intervals.len() >= 2 {
        ht.per_gap
            .iter()
            .map(|&s| total_transmission(t_plus_from_attenuation(s), true))
            .product()
    } else {
        total_transmission(ht.t_plus, true)
    }
}

/// Result of the Gaussian momentum average at one nominal momentum.
#[derive(Debug, Clone, Copy)]
pub struct AveragedTransmission {
    pub value: f64,
    /// True when the averaging window had to be clipped at p = 0.
    pub clipped: bool,
}

fn interp(p_grid: &[f64], t: &[f64], x: f64) -> f64 {
    let n = p_grid.len();
    let i = match p_grid.partition_point(|&g| g <= x) {
        0 => 0,
        j if j >= n => n - 2,
        j => j - 1,
    };
    let (x0, x1) = (p_grid[i], p_grid[i + 1]);
    let s = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
    t[i] + s * (t[i + 1] - t[i])
}

/// Gaussian momentum average of a transmission curve at `p_in`.
///
/// Integrates T(p) exp(-(p-p_in)^2/sigma_p^2) over p_in +/- 5 sigma clipped
/// at zero, renormalizing the kernel over the same window so that T == 1
/// averages to exactly 1. Trapezoid quadrature with node doubling until two
/// resolutions agree to [`AVG_ABS_TOL`].
pub fn averaged_transmission(
    p_grid: &[f64],
    t: &[f64],
    p_in: f64,
    sigma_p: f64,
) -> Result<AveragedTransmission> {
    if sigma_p <= 0.0 {
        return Err(FinlatError::Config(format!(
            "momentum spread must be positive, got {sigma_p}"
        )));
    }
    if p_grid.len() != t.len() || p_grid.len() < 2 {
        return Err(FinlatError::Config(
            "transmission curve needs at least two (p, T) samples".into(),
        ));
    }
    let lo_raw = p_in - 5.0 * sigma_p;
    let clipped = lo_raw <= 0.0;
    let lo = lo_raw.max(0.0);
    let hi = p_in + 5.0 * sigma_p;
    let span = 1e-9 * sigma_p;
    if p_grid[0] > lo + span || *p_grid.last().unwrap() < hi - span {
        return Err(FinlatError::Numerics(format!(
            "curve [{}, {}] does not cover the averaging window [{lo}, {hi}]",
            p_grid[0],
            p_grid.last().unwrap()
        )));
    }
    let quad = |nodes: usize| -> f64 {
        let h = (hi - lo) / (nodes - 1) as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..nodes {
            let p = lo + i as f64 * h;
            let w = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
            let d = (p - p_in) / sigma_p;
            let kernel = w * (-d * d).exp();
            num += kernel * interp(p_grid, t, p);
            den += kernel;
        }
        num / den
    };
    let mut nodes = AVG_BASE_NODES;
    let mut prev = quad(nodes);
    loop {
        nodes = 2 * nodes - 1;
        let next = quad(nodes);
        if (next - prev).abs() <= AVG_ABS_TOL {
            return Ok(AveragedTransmission {
                value: next,
                clipped,
            });
        }
        if nodes > 4097 {
            return Err(FinlatError::Numerics(format!(
                "momentum average did not converge at p_in = {p_in}"
            )));
        }
        prev = next;
    }
}

/// Full analytic scan: monochromatic and Gaussian-averaged transmission on
/// `p_report`, averaging over an internal fine grid with spacing <=
/// sigma_p / 25.6 so the kernel is well resolved.
pub fn transmission_curve(
    map: &LocalBandMap,
    p_report: &[f64],
    sigma_p: f64,
    kappa_min: f64,
) -> Result<TransmissionCurve> {
    if p_report.is_empty() {
        return Err(FinlatError::Config("empty momentum grid".into()));
    }
    let p_min = p_report.iter().cloned().fold(f64::INFINITY, f64::min);
    let p_max = p_report.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = (p_min - 5.0 * sigma_p).max(0.0);
    let hi = p_max + 5.0 * sigma_p;
    let h = sigma_p / 25.6;
    let n_fine = ((hi - lo) / h).ceil() as usize + 1;
    let fine_p: Vec<f64> = (0..n_fine)
        .map(|i| lo + (hi - lo) * i as f64 / (n_fine - 1) as f64)
        .collect();
    let fine_t: Vec<f64> = fine_p
        .par_iter()
        .map(|&p| half_transmission(map, p, kappa_min).map(|ht| monochromatic_transmission(&ht)))
        .collect::<Result<_>>()?;
    let mut t_mono = Vec::with_capacity(p_report.len());
    let mut t_ave = Vec::with_capacity(p_report.len());
    let mut gap_pairs = Vec::with_capacity(p_report.len());
    for &p in p_report {
        let ht = half_transmission(map, p, kappa_min)?;
        t_mono.push(monochromatic_transmission(&ht));
        gap_pairs.push(ht.gap_intervals.len());
        t_ave.push(averaged_transmission(&fine_p, &fine_t, p, sigma_p)?.value);
    }
    Ok(TransmissionCurve {
        p_grid: p_report.to_vec(),
        t_mono,
        t_ave,
        gap_pairs,
        sigma_p,
        v0: map.lattice.v0,
        w_z: map.lattice.w_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandmap::{build_band_map, symmetric_grid, EnvelopeLattice};
    use crate::bloch::MONODROMY_STEPS;

    const KAPPA_MIN: f64 = 1e-4;

    fn map_with(v0: f64, w_z: f64) -> LocalBandMap {
        let z = symmetric_grid(4.0 * w_z, 64);
        build_band_map(EnvelopeLattice { v0, w_z }, z, vec![], MONODROMY_STEPS)
    }

    #[test]
    fn attenuation_exponent_arithmetic() {
        assert_eq!(t_plus_from_attenuation(0.0), 1.0);
        let t = t_plus_from_attenuation(0.5 * 10.0_f64.ln());
        assert!((t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn resummation_closed_forms() {
        assert_eq!(total_transmission(1.0, true), 1.0);
        assert_eq!(total_transmission(1.0, false), 1.0);
        assert!((total_transmission(0.5, true) - 1.0 / 3.0).abs() < 1e-15);
        assert!((total_transmission(0.5, false) - 0.25).abs() < 1e-15);
        // Monotone in T+ on both branches, and resummation only adds
        // transmission relative to the single-pass barrier.
        let mut prev_cavity = -1.0;
        let mut prev_barrier = -1.0;
        for i in 0..=1000 {
            let tp = i as f64 / 1000.0;
            let c = total_transmission(tp, true);
            let b = total_transmission(tp, false);
            assert!((0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&b));
            assert!(c >= prev_cavity && b >= prev_barrier);
            assert!(c >= b - 1e-15);
            prev_cavity = c;
            prev_barrier = b;
        }
    }

    #[test]
    fn bounce_series_converges_geometrically_to_closed_form() {
        for i in 1..=100 {
            let tp = i as f64 / 100.0;
            let exact = total_transmission(tp, true);
            // Residual after n round trips is exact * (1-tp)^(2(n+1));
            // choose n so the bound is below 1e-13.
            let r = 1.0 - tp;
            let n = if r == 0.0 {
                1
            } else {
                let need = (1e-13 / exact).ln() / (2.0 * r.ln());
                need.ceil() as usize + 1
            };
            let partial = cavity_transmission_bounces(tp, n);
            assert!(
                (partial - exact).abs() <= 1e-12,
                "partial sum off at T+ = {tp}: {partial} vs {exact}"
            );
            // Geometric decay of the residual with ratio (1-tp)^2. Checked
            // at small T+ only: large T+ leaves residuals near the rounding
            // floor where the ratio is pure cancellation noise.
            if tp >= 0.05 && tp <= 0.5 {
                let r0 = exact - cavity_transmission_bounces(tp, 1);
                let r1 = exact - cavity_transmission_bounces(tp, 2);
                assert!(r1 <= r0);
                assert!((r1 / r0 - r * r).abs() < 1e-3 * r * r);
            }
        }
    }

    #[test]
    fn free_envelope_transmits_everything() {
        let map = map_with(0.0, 120.0);
        for &p in &[0.3, 1.0, 2.4] {
            let ht = half_transmission(&map, p, KAPPA_MIN).unwrap();
            assert_eq!(ht.t_plus, 1.0);
            assert!(ht.gap_intervals.is_empty());
            assert!(ht.center_in_band);
            assert_eq!(monochromatic_transmission(&ht), 1.0);
        }
    }

    #[test]
    fn gap_attenuation_matches_direct_dense_quadrature() {
        let map = map_with(9.0, 120.0);
        // A momentum whose energy crosses the first gap away from the centre.
        let p = 1.3;
        let ht = half_transmission(&map, p, KAPPA_MIN).unwrap();
        assert!(!ht.gap_intervals.is_empty());
        let (a, b) = ht.gap_intervals[0];
        // Independent route: plain Simpson on the raw integrand. The
        // sqrt edge behaviour limits its accuracy, hence the loose tol.
        let f = |z: f64| map.im_k_at(z, p);
        let dense = simpson(&f, a, b, 600);
        assert!(
            (ht.per_gap[0] - dense).abs() < 1e-3 * dense.max(1e-6),
            "substituted quadrature {} vs dense {}",
            ht.per_gap[0],
            dense
        );
    }

    #[test]
    fn first_gap_lens_blocks_transmission_at_wide_waist() {
        // Waist of order 50 um for a 390 nm period: strong attenuation.
        let map = map_with(9.0, 403.0);
        let ht = half_transmission(&map, 1.3, KAPPA_MIN).unwrap();
        assert!(ht.center_in_band);
        assert!(ht.t_plus < 1e-4, "T+ = {}", ht.t_plus);
        let t = monochromatic_transmission(&ht);
        assert!(t < 1e-4);
    }

    #[test]
    fn uniform_curve_averages_to_one() {
        let p: Vec<f64> = (0..400).map(|i| i as f64 * 0.01).collect();
        let t = vec![1.0; p.len()];
        for &(p_in, sigma) in &[(2.0, 0.0325), (0.1, 0.05), (1.0, 0.2)] {
            let avg = averaged_transmission(&p, &t, p_in, sigma).unwrap();
            assert!((avg.value - 1.0).abs() < 1e-12);
            assert_eq!(avg.clipped, p_in <= 5.0 * sigma);
        }
    }

    #[test]
    fn narrow_kernel_recovers_point_values() {
        let p: Vec<f64> = (0..=4000).map(|i| i as f64 * 0.001).collect();
        let t: Vec<f64> = p.iter().map(|&x| 0.5 + 0.4 * (2.0 * x).sin()).collect();
        let avg = averaged_transmission(&p, &t, 2.0, 1e-4).unwrap();
        let exact = 0.5 + 0.4 * (4.0_f64).sin();
        assert!((avg.value - exact).abs() < 1e-5);
    }

    #[test]
    fn averaging_preserves_monotone_sections() {
        // A monotone ramp stays monotone: no new extrema from the average.
        let p: Vec<f64> = (0..=2000).map(|i| i as f64 * 0.002).collect();
        let t: Vec<f64> = p
            .iter()
            .map(|&x| 0.05 + 0.9 * ((x - 2.0) / 0.02).clamp(0.0, 1.0))
            .collect();
        let probes: Vec<f64> = (0..=40).map(|i| 1.5 + i as f64 * 0.025).collect();
        let mut prev = -1.0;
        for &p_in in &probes {
            let avg = averaged_transmission(&p, &t, p_in, 0.05).unwrap().value;
            // Adjacent probes carry independent quadrature noise at the
            // doubling tolerance; only violations beyond it are real.
            assert!(
                avg >= prev - 2.0 * AVG_ABS_TOL,
                "average not monotone at {p_in}"
            );
            prev = avg;
        }
    }

    #[test]
    fn scan_shows_alternating_windows() {
        let map = map_with(9.0, 120.0);
        let p_report: Vec<f64> = (0..=22).map(|i| 1.0 + 0.1 * i as f64).collect();
        let curve = transmission_curve(&map, &p_report, 0.1, KAPPA_MIN).unwrap();
        for i in 0..curve.p_grid.len() {
            assert!((0.0..=1.0).contains(&curve.t_mono[i]));
            assert!((0.0..=1.0).contains(&curve.t_ave[i]));
        }
        let lo = curve.t_ave.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = curve.t_ave.iter().cloned().fold(0.0_f64, f64::max);
        assert!(lo < 0.2, "expected a blocked window, min T_ave = {lo}");
        assert!(hi > 0.8, "expected an open window, max T_ave = {hi}");
    }
}
