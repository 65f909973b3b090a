//! Time-dependent Schroedinger propagation through the finite lattice.
//!
//! Reduced units throughout: i d(psi)/dt = (-d^2/dz^2 + V(z,t)) psi with
//! V(z,t) = -V0(t) exp(-2 z^2/w_z^2) cos^2(z), lengths in 1/k_L, momenta in
//! p_R, energies in E_R and times in t_R = hbar/E_R. A free packet moves at
//! dz/dt = 2 p.
//!
//! The stepper is the symmetric split-operator method (half potential kick,
//! spectral kinetic step, half kick) with the time-dependent depth sampled
//! at mid-step, which keeps the scheme second order during ramps and makes
//! a static step exactly reversible. Outgoing probability is soaked up by a
//! cosine amplitude mask over the outer 10% of the grid and tallied per
//! side, so norm accounting stays exact.

use crate::bandmap::{build_band_map, symmetric_grid, EnvelopeLattice};
use crate::bloch::{band_at_energy, bloch_energies, complex_k, gap_index_at};
use crate::revival::FidelityProbe;
use crate::{FinlatError, Result};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

/// Default time step (t_R).
pub const DEFAULT_DT: f64 = 0.05;
/// Default target grid spacing (1/k_L): 12 points per lattice period.
pub const DEFAULT_DZ: f64 = PI / 12.0;
/// Coarsest spacing the grid accepts: 8 points per lattice period.
pub const DZ_MAX: f64 = PI / 8.0;
/// Fraction of the grid covered by each absorbing edge.
pub const ABSORBER_FRACTION: f64 = 0.1;
/// Allowed norm drift of one unitary step, before absorption.
pub const NORM_DRIFT_MAX: f64 = 1e-10;
/// Absorbed probability allowed before the packet reaches the lattice.
pub const EARLY_ABSORB_MAX: f64 = 1e-6;
/// Minimal acceptable adiabaticity margin min omega^2/(d omega/dt).
pub const ADIABATIC_MARGIN_MIN: f64 = 10.0;
/// Detection threshold telling a mirror gap from numerical noise (k_L).
pub const KAPPA_MIN: f64 = 1e-4;

/// Uniform spatial grid for the spectral stepper. The last point is
/// z_min + (n-1) dz; the FFT treats the box [z_min, z_min + n dz) as
/// periodic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub z_min: f64,
    pub z_max: f64,
    pub n: usize,
    pub dz: f64,
}

impl SpatialGrid {
    /// Grid over [z_min, z_max) with `n` points (a power of two).
    pub fn new(z_min: f64, z_max: f64, n: usize) -> Result<Self> {
        if !n.is_power_of_two() || n < 16 {
            return Err(FinlatError::Config(format!(
                "grid size must be a power of two >= 16, got {n}"
            )));
        }
        if z_max <= z_min {
            return Err(FinlatError::Config("grid span must be positive".into()));
        }
        let dz = (z_max - z_min) / n as f64;
        if dz > DZ_MAX * (1.0 + 1e-12) {
            return Err(FinlatError::Config(format!(
                "dz = {dz:.4} exceeds {DZ_MAX:.4} (needs >= 8 points per lattice period)"
            )));
        }
        Ok(SpatialGrid { z_min, z_max, n, dz })
    }

    pub fn position(&self, i: usize) -> f64 {
        self.z_min + i as f64 * self.dz
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.position(i)).collect()
    }

    /// FFT wavenumbers in units of k_L (same numerical values as momentum
    /// in p_R), in transform order.
    pub fn momenta(&self) -> Vec<f64> {
        let dk = 2.0 * PI / (self.n as f64 * self.dz);
        (0..self.n)
            .map(|i| {
                let j = if i <= self.n / 2 { i as isize } else { i as isize - self.n as isize };
                j as f64 * dk
            })
            .collect()
    }
}

/// Wave packet on a grid with per-side absorption tallies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WavePacketState {
    pub grid: SpatialGrid,
    pub psi: Vec<Complex64>,
    pub time: f64,
    pub absorbed_left: f64,
    pub absorbed_right: f64,
}

impl WavePacketState {
    pub fn norm(&self) -> f64 {
        self.psi.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.grid.dz
    }

    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn mean_z(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, a) in self.psi.iter().enumerate() {
            let w = a.norm_sqr();
            num += w * self.grid.position(i);
            den += w;
        }
        num / den
    }

    /// Probability currently inside [a, b].
    pub fn norm_in(&self, a: f64, b: f64) -> f64 {
        let mut sum = 0.0;
        for (i, amp) in self.psi.iter().enumerate() {
            let z = self.grid.position(i);
            if z >= a && z <= b {
                sum += amp.norm_sqr();
            }
        }
        sum * self.grid.dz
    }

    /// Serialize the full state; the JSON float encoding round-trips f64
    /// exactly, so save/load is bit-exact.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| FinlatError::Io(e.into()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| FinlatError::Io(e.into()))
    }
}

/// Normalized Gaussian with mean momentum `p_in` whose momentum density
/// matches the averaging kernel exp(-(p - p_in)^2 / sigma_p^2); the
/// position-density rms width is then 1/(sqrt(2) sigma_p).
pub fn initial_gaussian(
    grid: &SpatialGrid,
    z0: f64,
    p_in: f64,
    sigma_p: f64,
) -> Result<WavePacketState> {
    if sigma_p <= 0.0 {
        return Err(FinlatError::Config("sigma_p must be positive".into()));
    }
    let sigma_z = 1.0 / (2.0_f64.sqrt() * sigma_p);
    // Density down by < 1e-12 at both grid edges keeps the periodic wrap
    // of the spectral stepper harmless.
    let edge = (grid.z_max - grid.dz - z0).min(z0 - grid.z_min);
    if edge * edge / (2.0 * sigma_z * sigma_z) < 27.63 {
        return Err(FinlatError::Config(format!(
            "packet at z0 = {z0} too close to the grid edge for its width {sigma_z:.2}"
        )));
    }
    let mut psi = Vec::with_capacity(grid.n);
    for i in 0..grid.n {
        let z = grid.position(i);
        let arg = -(z - z0) * (z - z0) / (4.0 * sigma_z * sigma_z);
        let phase = Complex64::new(0.0, p_in * z).exp();
        psi.push(phase * arg.exp());
    }
    let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum::<f64>() * grid.dz;
    let scale = 1.0 / norm.sqrt();
    for a in &mut psi {
        *a *= scale;
    }
    Ok(WavePacketState {
        grid: grid.clone(),
        psi,
        time: 0.0,
        absorbed_left: 0.0,
        absorbed_right: 0.0,
    })
}

/// Piecewise-linear peak-depth schedule V0(t), clamped outside the
/// breakpoint range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    breakpoints: Vec<(f64, f64)>,
}

impl RampSchedule {
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(FinlatError::Config("schedule needs a breakpoint".into()));
        }
        for w in breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(FinlatError::Config(
                    "schedule times must be strictly increasing".into(),
                ));
            }
        }
        if breakpoints.iter().any(|&(_, v)| v < 0.0) {
            return Err(FinlatError::Config("depths must be >= 0".into()));
        }
        Ok(RampSchedule { breakpoints })
    }

    pub fn constant(depth: f64) -> Result<Self> {
        Self::new(vec![(0.0, depth)])
    }

    pub fn linear(t0: f64, t1: f64, v0: f64, v1: f64) -> Result<Self> {
        Self::new(vec![(t0, v0), (t1, v1)])
    }

    /// Linear ramp whose midpoint coincides with the free-flight arrival of
    /// a packet launched at z0 with momentum p_in at the lattice centre.
    pub fn centered(z0: f64, p_in: f64, v0: f64, v1: f64, duration: f64) -> Result<Self> {
        if p_in <= 0.0 {
            return Err(FinlatError::Config(
                "centered ramp needs a rightward-moving packet".into(),
            ));
        }
        let t_mid = -z0 / (2.0 * p_in);
        Self::linear(t_mid - 0.5 * duration, t_mid + 0.5 * duration, v0, v1)
    }

    pub fn depth_at(&self, t: f64) -> f64 {
        let bp = &self.breakpoints;
        if t <= bp[0].0 {
            return bp[0].1;
        }
        for w in bp.windows(2) {
            if t <= w[1].0 {
                let s = (t - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + s * (w[1].1 - w[0].1);
            }
        }
        bp.last().unwrap().1
    }

    pub fn initial_depth(&self) -> f64 {
        self.breakpoints[0].1
    }

    pub fn final_depth(&self) -> f64 {
        self.breakpoints.last().unwrap().1
    }

    /// Shift all breakpoint times by `offset`.
    pub fn shifted(&self, offset: f64) -> Self {
        RampSchedule {
            breakpoints: self
                .breakpoints
                .iter()
                .map(|&(t, v)| (t + offset, v))
                .collect(),
        }
    }

    /// Time window over which the depth actually changes, if any.
    pub fn active_window(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for w in self.breakpoints.windows(2) {
            if w[0].1 != w[1].1 {
                lo = lo.min(w[0].0);
                hi = hi.max(w[1].0);
            }
        }
        (lo < hi).then_some((lo, hi))
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }
}

/// Cosine amplitude mask over the outer fraction of the grid; probability
/// removed per application is tallied per side.
#[derive(Debug, Clone)]
pub struct AbsorbingMask {
    mask: Vec<f64>,
    half: usize,
    width: usize,
}

impl AbsorbingMask {
    pub fn cosine(grid: &SpatialGrid, fraction: f64) -> Self {
        let width = ((grid.n as f64 * fraction) as usize).max(2);
        let mut mask = vec![1.0; grid.n];
        for j in 0..width {
            // xi runs 0 at the inner edge to 1 at the boundary.
            let xi = (width - j) as f64 / width as f64;
            let m = (0.5 * PI * xi).cos().powi(2);
            mask[j] = m;
            mask[grid.n - 1 - j] = m;
        }
        AbsorbingMask {
            mask,
            half: grid.n / 2,
            width,
        }
    }

    /// Grid span untouched by the mask.
    pub fn clear_span(&self, grid: &SpatialGrid) -> (f64, f64) {
        (grid.position(self.width), grid.position(grid.n - 1 - self.width))
    }

    pub fn apply(&self, state: &mut WavePacketState) {
        let dz = state.grid.dz;
        let mut lost_left = 0.0;
        let mut lost_right = 0.0;
        for (i, a) in state.psi.iter_mut().enumerate() {
            let m = self.mask[i];
            if m < 1.0 {
                let lost = a.norm_sqr() * (1.0 - m * m) * dz;
                if i < self.half {
                    lost_left += lost;
                } else {
                    lost_right += lost;
                }
                *a *= m;
            }
        }
        state.absorbed_left += lost_left;
        state.absorbed_right += lost_right;
    }
}

/// Split-operator stepper holding the FFT plans, the unit-depth potential
/// profile and cached phase tables.
pub struct Propagator {
    pub grid: SpatialGrid,
    pub lattice: EnvelopeLattice,
    pub dt: f64,
    schedule: RampSchedule,
    profile: Vec<f64>,
    kinetic_phase: Vec<Complex64>,
    potential_phase: Vec<Complex64>,
    cached_depth: Option<f64>,
    k_values: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    spectrum: Vec<Complex64>,
}

impl Propagator {
    pub fn new(
        grid: SpatialGrid,
        lattice: EnvelopeLattice,
        schedule: RampSchedule,
        dt: f64,
    ) -> Result<Self> {
        if dt <= 0.0 {
            return Err(FinlatError::Config("dt must be positive".into()));
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.n);
        let inv = planner.plan_fft_inverse(grid.n);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        let profile: Vec<f64> = (0..grid.n)
            .map(|i| {
                let z = grid.position(i);
                let envelope = (-2.0 * z * z / (lattice.w_z * lattice.w_z)).exp();
                -envelope * z.cos().powi(2)
            })
            .collect();
        let k_values = grid.momenta();
        let kinetic_phase = k_values
            .iter()
            .map(|&k| Complex64::new(0.0, -k * k * dt).exp())
            .collect();
        Ok(Propagator {
            potential_phase: vec![Complex64::new(1.0, 0.0); grid.n],
            cached_depth: None,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
            spectrum: vec![Complex64::new(0.0, 0.0); grid.n],
            grid,
            lattice,
            dt,
            schedule,
            profile,
            kinetic_phase,
            k_values,
            fwd,
            inv,
        })
    }

    pub fn schedule(&self) -> &RampSchedule {
        &self.schedule
    }

    pub fn set_schedule(&mut self, schedule: RampSchedule) {
        self.schedule = schedule;
        self.cached_depth = None;
    }

    pub fn depth_at(&self, t: f64) -> f64 {
        self.schedule.depth_at(t)
    }

    fn refresh_potential_phase(&mut self, depth: f64) {
        if self.cached_depth == Some(depth) {
            return;
        }
        for (ph, &pr) in self.potential_phase.iter_mut().zip(&self.profile) {
            *ph = Complex64::new(0.0, -0.5 * depth * pr * self.dt).exp();
        }
        self.cached_depth = Some(depth);
    }

    /// One symmetric split step; the depth is sampled at t + dt/2 for both
    /// half kicks. Errors out if the unitary step drifts the norm by more
    /// than [`NORM_DRIFT_MAX`] relative.
    pub fn step(&mut self, state: &mut WavePacketState) -> Result<()> {
        let depth = self.schedule.depth_at(state.time + 0.5 * self.dt);
        self.refresh_potential_phase(depth);
        let norm_before: f64 = state.psi.iter().map(|a| a.norm_sqr()).sum();
        for (a, ph) in state.psi.iter_mut().zip(&self.potential_phase) {
            *a *= ph;
        }
        self.fwd.process_with_scratch(&mut state.psi, &mut self.scratch);
        for (a, ph) in state.psi.iter_mut().zip(&self.kinetic_phase) {
            *a *= ph;
        }
        self.inv.process_with_scratch(&mut state.psi, &mut self.scratch);
        let inv_n = 1.0 / self.grid.n as f64;
        for (a, ph) in state.psi.iter_mut().zip(&self.potential_phase) {
            *a *= ph * inv_n;
        }
        let norm_after: f64 = state.psi.iter().map(|a| a.norm_sqr()).sum();
        if (norm_after - norm_before).abs() > NORM_DRIFT_MAX * norm_before {
            return Err(FinlatError::Numerics(format!(
                "norm drifted by {:.3e} in one step at t = {:.4}",
                (norm_after - norm_before).abs() / norm_before,
                state.time
            )));
        }
        state.time += self.dt;
        Ok(())
    }

    fn spectrum_of(&mut self, state: &WavePacketState) {
        self.spectrum.copy_from_slice(&state.psi);
        self.fwd.process_with_scratch(&mut self.spectrum, &mut self.scratch);
    }

    /// Mean momentum (p_R) of the remaining norm.
    pub fn mean_p(&mut self, state: &WavePacketState) -> f64 {
        self.spectrum_of(state);
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, &k) in self.spectrum.iter().zip(&self.k_values) {
            let w = a.norm_sqr();
            num += w * k;
            den += w;
        }
        num / den
    }

    /// Mean total energy (E_R) of the remaining norm at time `t`.
    pub fn energy(&mut self, state: &WavePacketState) -> f64 {
        self.spectrum_of(state);
        let mut kin = 0.0;
        let mut den = 0.0;
        for (a, &k) in self.spectrum.iter().zip(&self.k_values) {
            let w = a.norm_sqr();
            kin += w * k * k;
            den += w;
        }
        let depth = self.schedule.depth_at(state.time);
        let mut pot = 0.0;
        let mut pden = 0.0;
        for (a, &pr) in state.psi.iter().zip(&self.profile) {
            let w = a.norm_sqr();
            pot += w * depth * pr;
            pden += w;
        }
        kin / den + pot / pden
    }

    /// Momentum-density second moment, as an rms width (p_R).
    pub fn momentum_std(&mut self, state: &WavePacketState) -> f64 {
        self.spectrum_of(state);
        let mut m0 = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (a, &k) in self.spectrum.iter().zip(&self.k_values) {
            let w = a.norm_sqr();
            m0 += w;
            m1 += w * k;
            m2 += w * k * k;
        }
        (m2 / m0 - (m1 / m0) * (m1 / m0)).max(0.0).sqrt()
    }
}

/// When to start the depth ramp.
#[derive(Debug, Clone)]
pub enum RampPlan {
    /// Breakpoint times are absolute.
    Fixed(RampSchedule),
    /// Breakpoint times are relative: the schedule midpoint is aligned with
    /// the first moment the packet's mean position crosses z = 0.
    OnCenterCrossing(RampSchedule),
}

impl RampPlan {
    fn initial_schedule(&self) -> RampSchedule {
        match self {
            RampPlan::Fixed(s) => s.clone(),
            RampPlan::OnCenterCrossing(s) => {
                RampSchedule::constant(s.initial_depth()).unwrap()
            }
        }
    }
}

/// How a propagation run decides it is finished.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    AtFinalTime,
    /// Stop once the packet has visited the lattice region and the norm
    /// still in flight between the absorbers has dropped below the
    /// threshold; the absorber tallies are then final up to the threshold.
    LatticeCleared { threshold: f64 },
}

/// Full description of one propagation experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub lattice: EnvelopeLattice,
    pub plan: RampPlan,
    pub z0: f64,
    pub p_in: f64,
    pub sigma_p: f64,
    pub t_final: f64,
    pub dt: f64,
    /// Observable sampling interval; rounded to a whole number of steps.
    pub sample_interval: f64,
    /// Interval for fidelity tracking, reference taken at the ramp end;
    /// None disables the trace.
    pub track_fidelity: bool,
    /// Density snapshot interval for the carpet; None disables it.
    pub carpet_interval: Option<f64>,
    /// Cavity interval for the trapped-norm observable.
    pub cavity: Option<(f64, f64)>,
    pub stop: StopRule,
    /// Grid override; None builds one from the physics.
    pub grid: Option<SpatialGrid>,
    /// Target spacing when the grid is auto-built.
    pub dz_target: f64,
}

impl ExperimentSpec {
    pub fn new(lattice: EnvelopeLattice, plan: RampPlan, z0: f64, p_in: f64, sigma_p: f64, t_final: f64) -> Self {
        ExperimentSpec {
            lattice,
            plan,
            z0,
            p_in,
            sigma_p,
            t_final,
            dt: DEFAULT_DT,
            sample_interval: 2.0,
            track_fidelity: false,
            carpet_interval: None,
            cavity: None,
            stop: StopRule::AtFinalTime,
            grid: None,
            dz_target: DEFAULT_DZ,
        }
    }

    /// Regime warnings: the analytic transmission model assumes the packet
    /// starts well outside the lattice and is much narrower than the
    /// envelope yet much wider than one period.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let sigma_z = 1.0 / (2.0_f64.sqrt() * self.sigma_p);
        if self.z0 > -3.0 * self.lattice.w_z {
            out.push(format!(
                "launch point z0 = {:.1} is inside 3 waists of the lattice centre",
                self.z0
            ));
        }
        if sigma_z > 0.5 * self.lattice.w_z {
            out.push(format!(
                "packet width {:.1} exceeds half the envelope waist {:.1}; \
                 the local-band picture degrades",
                sigma_z, self.lattice.w_z
            ));
        }
        out
    }
}

/// Time series of the standard observables.
#[derive(Debug, Clone, Default)]
pub struct ObservableSeries {
    pub times: Vec<f64>,
    pub norm_in_cavity: Vec<f64>,
    pub norm_transmitted: Vec<f64>,
    pub norm_reflected: Vec<f64>,
    pub in_flight: Vec<f64>,
    pub mean_z: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Downsampled density history.
#[derive(Debug, Clone)]
pub struct Carpet {
    pub times: Vec<f64>,
    pub z_centers: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

/// Fidelity of the evolving state against the post-ramp reference.
#[derive(Debug, Clone, Default)]
pub struct FidelityTrace {
    pub times: Vec<f64>,
    /// |<ref|psi>|^2 over current norms.
    pub amplitude: Vec<f64>,
    /// Density overlap at zero displacement.
    pub density: Vec<f64>,
    /// Density overlap maximized over displacement and mirroring.
    pub density_best: Vec<f64>,
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub series: ObservableSeries,
    pub fidelity: FidelityTrace,
    pub carpet: Option<Carpet>,
    pub final_state: WavePacketState,
    pub reference: Option<WavePacketState>,
    /// Absorbed right plus in-flight norm beyond the lattice on the right.
    pub transmitted_fraction: f64,
    /// Absorbed left plus in-flight norm beyond the lattice on the left.
    pub reflected_fraction: f64,
    /// Time at which the ramp midpoint actually occurred.
    pub ramp_midpoint: Option<f64>,
}

/// Build a grid that holds the initial packet, the lattice out to 4 w_z
/// and absorbing pads outside both.
pub fn grid_for(lattice: &EnvelopeLattice, z0: f64, sigma_p: f64, dz_target: f64) -> Result<SpatialGrid> {
    let sigma_z = 1.0 / (2.0_f64.sqrt() * sigma_p);
    let reach = 4.0 * lattice.w_z;
    let content_min = (z0 - 9.0 * sigma_z).min(-reach - 20.0);
    let content_max = (z0 + 9.0 * sigma_z).max(reach + 20.0);
    let span = content_max - content_min;
    // Absorbers take ABSORBER_FRACTION of the total on each side.
    let total = span / (1.0 - 2.0 * ABSORBER_FRACTION);
    let pad = 0.5 * (total - span);
    let n = ((total / dz_target).ceil() as usize).next_power_of_two();
    SpatialGrid::new(content_min - pad, content_min - pad + total, n)
}

/// Run one experiment: propagate, absorb, sample observables, track
/// fidelity against the post-ramp reference and optionally record a
/// density carpet.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let grid = match &spec.grid {
        Some(g) => g.clone(),
        None => grid_for(&spec.lattice, spec.z0, spec.sigma_p, spec.dz_target)?,
    };
    let mut state = initial_gaussian(&grid, spec.z0, spec.p_in, spec.sigma_p)?;
    let mask = AbsorbingMask::cosine(&grid, ABSORBER_FRACTION);
    let mut prop = Propagator::new(
        grid.clone(),
        spec.lattice,
        spec.plan.initial_schedule(),
        spec.dt,
    )?;
    let steps_per_sample = (spec.sample_interval / spec.dt).round().max(1.0) as usize;
    let sample_dt = steps_per_sample as f64 * spec.dt;
    let n_samples = (spec.t_final / sample_dt).ceil() as usize;
    let carpet_every = spec
        .carpet_interval
        .map(|ci| ((ci / sample_dt).round() as usize).max(1));

    let reach = 4.0 * spec.lattice.w_z;
    let clear = mask.clear_span(&grid);
    let mut triggered = matches!(spec.plan, RampPlan::Fixed(_));
    let mut ramp_midpoint = match &spec.plan {
        RampPlan::Fixed(s) => s.active_window().map(|(a, b)| 0.5 * (a + b)),
        RampPlan::OnCenterCrossing(_) => None,
    };
    // Fidelity reference is captured at the ramp end (or t = 0 when the
    // schedule never changes depth).
    let ramp_end = match &spec.plan {
        RampPlan::Fixed(s) => s.active_window().map_or(0.0, |(_, b)| b),
        RampPlan::OnCenterCrossing(_) => f64::INFINITY,
    };
    let mut ramp_end_actual = ramp_end;

    let mut series = ObservableSeries::default();
    let mut fidelity = FidelityTrace::default();
    let mut probe: Option<FidelityProbe> = None;
    let mut reference: Option<WavePacketState> = None;
    let mut carpet = carpet_every.map(|_| Carpet {
        times: Vec::new(),
        z_centers: carpet_bins(&grid).0,
        rows: Vec::new(),
    });
    let mut has_entered = false;

    for sample in 0..=n_samples {
        let t = state.time;
        let in_lattice = state.norm_in(-reach, reach);
        has_entered = has_entered || in_lattice > 0.1;
        if !has_entered && state.absorbed_left + state.absorbed_right > EARLY_ABSORB_MAX {
            return Err(FinlatError::Config(format!(
                "absorbed {:.2e} before the packet reached the lattice; grid too small",
                state.absorbed_left + state.absorbed_right
            )));
        }

        series.times.push(t);
        series.norm_transmitted.push(state.absorbed_right);
        series.norm_reflected.push(state.absorbed_left);
        let in_flight = state.norm();
        series.in_flight.push(in_flight);
        series
            .norm_in_cavity
            .push(spec.cavity.map_or(0.0, |(a, b)| state.norm_in(a, b)));
        series.mean_z.push(state.mean_z());
        series.mean_p.push(prop.mean_p(&state));
        series.energy.push(prop.energy(&state));

        if spec.track_fidelity && probe.is_none() && triggered && t >= ramp_end_actual - 1e-9 {
            probe = Some(FidelityProbe::new(&state.psi));
            reference = Some(state.clone());
        }
        if let Some(pr) = &mut probe {
            let (amp, dens, best) = pr.measure(&state.psi);
            fidelity.times.push(t);
            fidelity.amplitude.push(amp);
            fidelity.density.push(dens);
            fidelity.density_best.push(best);
        }
        if let (Some(every), Some(c)) = (carpet_every, carpet.as_mut()) {
            if sample % every == 0 {
                c.times.push(t);
                c.rows.push(carpet_row(&state));
            }
        }

        if let StopRule::LatticeCleared { threshold } = spec.stop {
            if has_entered && state.norm_in(clear.0, clear.1) < threshold {
                break;
            }
        }
        if sample == n_samples {
            break;
        }

        if !triggered {
            if let RampPlan::OnCenterCrossing(s) = &spec.plan {
                if state.mean_z() >= 0.0 {
                    let window = s.active_window();
                    let mid = window.map_or(0.0, |(a, b)| 0.5 * (a + b));
                    let shifted = s.shifted(t - mid);
                    ramp_end_actual = shifted.active_window().map_or(t, |(_, b)| b);
                    ramp_midpoint = Some(t);
                    prop.set_schedule(shifted);
                    triggered = true;
                }
            }
        }
        for _ in 0..steps_per_sample {
            prop.step(&mut state)?;
            mask.apply(&mut state);
        }
    }

    let transmitted_fraction = state.absorbed_right + state.norm_in(reach, grid.z_max);
    let reflected_fraction = state.absorbed_left + state.norm_in(grid.z_min, -reach);
    Ok(ExperimentResult {
        series,
        fidelity,
        carpet,
        final_state: state,
        reference,
        transmitted_fraction,
        reflected_fraction,
        ramp_midpoint,
    })
}

/// Carpet bins average the density over 4 lattice periods.
fn carpet_bins(grid: &SpatialGrid) -> (Vec<f64>, usize) {
    let per_bin = ((4.0 * PI / grid.dz).round() as usize).max(1);
    let n_bins = grid.n / per_bin;
    let centers = (0..n_bins)
        .map(|b| grid.position(b * per_bin) + 0.5 * (per_bin as f64 - 1.0) * grid.dz)
        .collect();
    (centers, per_bin)
}

fn carpet_row(state: &WavePacketState) -> Vec<f64> {
    let (_, per_bin) = carpet_bins(&state.grid);
    let n_bins = state.grid.n / per_bin;
    let mut row = vec![0.0; n_bins];
    for (i, a) in state.psi.iter().enumerate() {
        let b = i / per_bin;
        if b < n_bins {
            row[b] += a.norm_sqr();
        }
    }
    for v in &mut row {
        *v /= per_bin as f64;
    }
    row
}

/// How a depth ramp acts on a packet that entered at `p_in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trapping {
    /// Energy stays positive and a surrounding gap pair appears: band-gap
    /// cavity trapping.
    Quantum,
    /// The ramp drives the total energy negative: bound in the well itself.
    Classical,
    /// No new mirrors at the post-ramp energy: the packet leaks out.
    Untrapped,
}

/// Classify trapping after a depth change `depth_before` -> `depth_after`.
///
/// The packet reaches the centre through the static envelope with its total
/// energy conserved, so it sits in whatever band contains p_in^2 at the
/// pre-ramp depth. The temporal ramp conserves band index and quasimomentum
/// and shifts the energy to the post-ramp band value. Negative final energy
/// is classical trapping in the mean well. Positive final energy traps only
/// when the ramp created a new mirror: a gap index that blocks the post-ramp
/// energy along the outward depth profile but did not block the entry
/// (whatever let the packet in would equally let it back out).
pub fn trapping_condition(p_in: f64, depth_before: f64, depth_after: f64) -> Result<Trapping> {
    if depth_before < 0.0 || depth_after < 0.0 {
        return Err(FinlatError::Config("depths must be >= 0".into()));
    }
    let e_after = match post_ramp_energy(p_in, depth_before, depth_after)? {
        Some(e) => e,
        // Entry energy in a gap at the centre: the packet never got inside.
        None => return Ok(Trapping::Untrapped),
    };
    if e_after <= 0.0 {
        return Ok(Trapping::Classical);
    }
    let entry = mirror_gaps(depth_before, p_in * p_in)?;
    let exit = mirror_gaps(depth_after, e_after)?;
    if exit.iter().any(|g| !entry.contains(g)) {
        Ok(Trapping::Quantum)
    } else {
        Ok(Trapping::Untrapped)
    }
}

/// Gap indices that put `energy` inside a gap at some local depth in
/// (0, depth] with attenuation above the mirror threshold.
fn mirror_gaps(depth: f64, energy: f64) -> Result<Vec<usize>> {
    let n = 256;
    let mut gaps = Vec::new();
    for i in 0..n {
        let d = depth * (i as f64 + 0.5) / n as f64;
        if let Some(g) = gap_index_at(d, energy)? {
            if !gaps.contains(&g) && complex_k(d, energy).im_k > KAPPA_MIN {
                gaps.push(g);
            }
        }
    }
    Ok(gaps)
}

/// Post-ramp band energy of a packet entering at `p_in`. The entry conserves
/// total energy through the static envelope, fixing band and quasimomentum
/// at the centre; the temporal ramp conserves both and moves the energy to
/// the post-ramp band value. None when the entry energy sits in a gap at
/// the centre.
pub fn post_ramp_energy(p_in: f64, depth_before: f64, depth_after: f64) -> Result<Option<f64>> {
    let (band, k_c) = match band_at_energy(depth_before, p_in * p_in)? {
        Some(pair) => pair,
        None => return Ok(None),
    };
    Ok(Some(bloch_energies(depth_after, k_c, band + 1)?[band]))
}

/// Adiabaticity and travel-time report for a depth ramp.
#[derive(Debug, Clone)]
pub struct AdiabaticityReport {
    /// min over the ramp of omega^2 / (d omega/dt), omega = 2 sqrt(V0).
    pub margin: f64,
    pub adiabatic: bool,
    /// Duration of the depth-changing window (t_R).
    pub ramp_duration: f64,
    /// Post-ramp band energy of the packet (E_R), when defined.
    pub e_after: Option<f64>,
    /// Cavity traversal time L / (2 p_in) at the post-ramp geometry (t_R).
    pub travel_time: Option<f64>,
    /// ramp_duration <= travel_time, when a cavity exists.
    pub within_travel: Option<bool>,
}

/// Check the ramp against d omega/dt << omega^2 (on-site frequency
/// omega = 2 sqrt(V0)) and against the cavity traversal time: the depth
/// must finish changing while the atoms are still between the two gap
/// locations.
pub fn adiabaticity_check(
    w_z: f64,
    schedule: &RampSchedule,
    p_in: f64,
    kappa_min: f64,
) -> Result<AdiabaticityReport> {
    let mut margin = f64::INFINITY;
    for w in schedule.breakpoints().windows(2) {
        let rate = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
        if rate == 0.0 {
            continue;
        }
        // omega^2/(d omega/dt) = 4 V^{3/2} / |dV/dt|, smallest at the
        // lower-depth end of a linear segment.
        let v_min = w[0].1.min(w[1].1);
        margin = margin.min(4.0 * v_min.powf(1.5) / rate.abs());
    }
    let (ramp_duration, has_ramp) = match schedule.active_window() {
        Some((a, b)) => (b - a, true),
        None => (0.0, false),
    };
    let mut e_after = None;
    let mut travel_time = None;
    let mut within_travel = None;
    if has_ramp && p_in > 0.0 {
        e_after = post_ramp_energy(p_in, schedule.initial_depth(), schedule.final_depth())?;
        if let Some(ea) = e_after {
            if ea > 0.0 {
                let lattice = EnvelopeLattice {
                    v0: schedule.final_depth(),
                    w_z,
                };
                let map = build_band_map(lattice, symmetric_grid(4.0 * w_z, 64), vec![], 1024);
                if let Some(cavity) = map.find_cavity(ea.sqrt(), kappa_min, 1e-3) {
                    let tt = cavity.length / (2.0 * p_in);
                    within_travel = Some(ramp_duration <= tt);
                    travel_time = Some(tt);
                }
            }
        }
    }
    Ok(AdiabaticityReport {
        margin,
        adiabatic: margin >= ADIABATIC_MARGIN_MIN,
        ramp_duration,
        e_after,
        travel_time,
        within_travel,
    })
}

/// L2 distance between two states on the same grid.
pub fn l2_distance(a: &WavePacketState, b: &WavePacketState) -> f64 {
    assert_eq!(a.grid, b.grid, "states live on different grids");
    a.psi
        .iter()
        .zip(&b.psi)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
        * a.grid.dz.sqrt()
}
