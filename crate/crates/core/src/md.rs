//! NVE molecular dynamics with velocity Verlet and energy-drift diagnostics.
//!
//! Metal units: positions in Å, time in fs, masses in amu, energies in eV.
//! Other unit systems are supported through [`Units`].

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::molgraph::elements::atomic_mass;
use crate::molgraph::{write_xyz, AtomicSystem};
use crate::potential::{forces, ForceMode, Model, PotentialError};

/// Å/fs² per eV/(Å·amu).
pub const METAL_FORCE_TO_ACCEL: f64 = 0.009648533212;
/// Boltzmann constant in eV/K.
pub const BOLTZMANN_EV: f64 = 8.617333262e-5;

#[derive(Debug, Error)]
pub enum MdError {
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("masses must be positive")]
    BadMass,
    #[error("{0} positions, {1} velocities, {2} masses")]
    ShapeMismatch(usize, usize, usize),
    #[error("non-finite force or energy at t = {0} fs")]
    NonFinite(f64),
    #[error("trace needs at least two points")]
    ShortTrace,
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

/// Conversion from force/mass to acceleration; kinetic energy is `m v^2 / (2 c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Units {
    pub force_to_accel: f64,
}

impl Units {
    pub const METAL: Units = Units { force_to_accel: METAL_FORCE_TO_ACCEL };
    /// Dimensionless: `a = F / m`.
    pub const REDUCED: Units = Units { force_to_accel: 1.0 };
}

/// Energy and forces at a configuration.
pub trait ForceField {
    fn evaluate(&mut self, positions: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>), MdError>;
}

impl<F> ForceField for F
where
    F: FnMut(&[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>), MdError>,
{
    fn evaluate(&mut self, positions: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>), MdError> {
        self(positions)
    }
}

/// Pairwise Lennard-Jones with analytic forces and no cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LennardJones {
    pub epsilon: f64,
    pub sigma: f64,
}

impl ForceField for LennardJones {
    fn evaluate(&mut self, x: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>), MdError> {
        let mut e = 0.0;
        let mut f = vec![[0.0; 3]; x.len()];
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let d: [f64; 3] = std::array::from_fn(|c| x[i][c] - x[j][c]);
                let r2 = d.iter().map(|v| v * v).sum::<f64>();
                let s6 = (self.sigma * self.sigma / r2).powi(3);
                e += 4.0 * self.epsilon * (s6 * s6 - s6);
                // -dE/dr / r
                let g = 24.0 * self.epsilon * (2.0 * s6 * s6 - s6) / r2;
                for c in 0..3 {
                    f[i][c] += g * d[c];
                    f[j][c] -= g * d[c];
                }
            }
        }
        Ok((e, f))
    }
}

/// A trained potential driving a fixed set of atoms.
pub struct ModelForceField<'a> {
    pub model: &'a Model,
    pub atomic_numbers: Vec<u32>,
    pub mode: ForceMode,
    /// Force evaluations that fell back to finite differences.
    pub fallbacks: usize,
}

impl<'a> ModelForceField<'a> {
    pub fn new(model: &'a Model, atomic_numbers: Vec<u32>, mode: ForceMode) -> Self {
        Self { model, atomic_numbers, mode, fallbacks: 0 }
    }
}

impl ForceField for ModelForceField<'_> {
    fn evaluate(&mut self, positions: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>), MdError> {
        let sys = AtomicSystem::new(positions.to_vec(), self.atomic_numbers.clone()).map_err(PotentialError::from)?;
        let r = forces(&sys, self.model, self.mode)?;
        if r.mode != self.mode {
            self.fallbacks += 1;
        }
        Ok((r.energy, r.forces))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    pub e_kin: f64,
    pub e_pot: f64,
    pub e_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdState {
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub masses: Vec<f64>,
    pub time: f64,
    pub units: Units,
    /// Forces and potential energy at `positions`.
    pub forces: Vec<[f64; 3]>,
    pub potential: f64,
    pub trace: Vec<TracePoint>,
    pub force_evaluations: usize,
}

fn check_finite(e: f64, f: &[[f64; 3]], t: f64) -> Result<(), MdError> {
    if e.is_finite() && f.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MdError::NonFinite(t))
    }
}

impl MdState {
    /// Evaluates the initial forces and records the first trace point.
    pub fn new<F: ForceField + ?Sized>(
        positions: Vec<[f64; 3]>,
        velocities: Vec<[f64; 3]>,
        masses: Vec<f64>,
        units: Units,
        ff: &mut F,
    ) -> Result<Self, MdError> {
        if positions.len() != velocities.len() || positions.len() != masses.len() {
            return Err(MdError::ShapeMismatch(positions.len(), velocities.len(), masses.len()));
        }
        if !masses.iter().all(|&m| m > 0.0 && m.is_finite()) {
            return Err(MdError::BadMass);
        }
        let (potential, forces) = ff.evaluate(&positions)?;
        check_finite(potential, &forces, 0.0)?;
        let mut s = Self {
            positions,
            velocities,
            masses,
            time: 0.0,
            units,
            forces,
            potential,
            trace: Vec::new(),
            force_evaluations: 1,
        };
        s.record();
        Ok(s)
    }

    pub fn kinetic_energy(&self) -> f64 {
        let mv2: f64 = self
            .velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| m * v.iter().map(|c| c * c).sum::<f64>())
            .sum();
        0.5 * mv2 / self.units.force_to_accel
    }

    pub fn momentum(&self) -> [f64; 3] {
        let mut p = [0.0; 3];
        for (v, m) in self.velocities.iter().zip(&self.masses) {
            for c in 0..3 {
                p[c] += m * v[c];
            }
        }
        p
    }

    fn record(&mut self) {
        let e_kin = self.kinetic_energy();
        self.trace.push(TracePoint { t: self.time, e_kin, e_pot: self.potential, e_total: e_kin + self.potential });
    }

    /// Atoms at the current positions, with energy and forces attached.
    pub fn snapshot(&self, atomic_numbers: &[u32]) -> AtomicSystem {
        AtomicSystem {
            positions: self.positions.clone(),
            atomic_numbers: atomic_numbers.to_vec(),
            energy: Some(self.potential),
            forces: Some(self.forces.clone()),
            charges: None,
        }
    }
}

/// One velocity-Verlet step with a single force evaluation.
pub fn velocity_verlet_step<F: ForceField + ?Sized>(state: &mut MdState, ff: &mut F, dt: f64) -> Result<(), MdError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(MdError::BadTimeStep(dt));
    }
    let c = state.units.force_to_accel;
    let half_dt = 0.5 * dt;
    for i in 0..state.positions.len() {
        let inv_m = c / state.masses[i];
        for k in 0..3 {
            state.velocities[i][k] += half_dt * state.forces[i][k] * inv_m;
            state.positions[i][k] += dt * state.velocities[i][k];
        }
    }
    let (e, f) = ff.evaluate(&state.positions)?;
    state.force_evaluations += 1;
    check_finite(e, &f, state.time + dt)?;
    for i in 0..state.positions.len() {
        let inv_m = c / state.masses[i];
        for k in 0..3 {
            state.velocities[i][k] += half_dt * f[i][k] * inv_m;
        }
    }
    state.forces = f;
    state.potential = e;
    state.time += dt;
    state.record();
    Ok(())
}

/// Runs `steps` steps, calling `on_frame` every `frame_stride` steps (0 disables).
pub fn nve_run<F: ForceField + ?Sized>(
    state: &mut MdState,
    ff: &mut F,
    steps: usize,
    dt: f64,
    frame_stride: usize,
    mut on_frame: impl FnMut(&MdState),
) -> Result<(), MdError> {
    for s in 1..=steps {
        velocity_verlet_step(state, ff, dt)?;
        if frame_stride > 0 && s % frame_stride == 0 {
            on_frame(state);
        }
    }
    Ok(())
}

/// Velocities drawn at temperature `kelvin` (metal units) with zero total momentum.
pub fn maxwell_boltzmann(masses: &[f64], kelvin: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<[f64; 3]> = masses
        .iter()
        .map(|&m| {
            let s = (BOLTZMANN_EV * kelvin * METAL_FORCE_TO_ACCEL / m).sqrt();
            std::array::from_fn(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            })
        })
        .collect();
    let total: f64 = masses.iter().sum();
    let mut p = [0.0; 3];
    for (vi, m) in v.iter().zip(masses) {
        for c in 0..3 {
            p[c] += m * vi[c];
        }
    }
    for vi in v.iter_mut() {
        for c in 0..3 {
            vi[c] -= p[c] / total;
        }
    }
    v
}

/// Masses of the given elements in amu.
pub fn masses_of(atomic_numbers: &[u32]) -> Vec<f64> {
    atomic_numbers.iter().map(|&z| atomic_mass(z)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftReport {
    /// `max |E(t) - E(0)| / |E(0)|`, or the absolute deviation when `absolute`.
    pub max_drift: f64,
    /// Least-squares slope of the (relative or absolute) deviation, per fs.
    pub slope_per_fs: f64,
    /// Half-width of the 95% confidence interval of the slope from block means.
    pub slope_ci95_per_fs: f64,
    /// Set when `E(0)` is zero and deviations are absolute.
    pub absolute: bool,
}

impl DriftReport {
    pub fn slope_per_ps(&self) -> f64 {
        self.slope_per_fs * 1000.0
    }

    /// True when zero lies inside the 95% interval of the slope.
    pub fn trend_is_zero(&self) -> bool {
        self.slope_per_fs.abs() <= self.slope_ci95_per_fs
    }
}

fn least_squares(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|v| (v - tm).powi(2)).sum();
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let sse: f64 = t.iter().zip(y).map(|(a, b)| (b - ym - slope * (a - tm)).powi(2)).sum();
    let se = if t.len() > 2 && sxx > 0.0 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    (slope, se)
}

/// Two-sided 97.5% Student-t quantile (Cornish-Fisher expansion, exact enough for df >= 3).
fn t_quantile_975(df: f64) -> f64 {
    let z: f64 = 1.959963984540054;
    let (z3, z5, z7) = (z.powi(3), z.powi(5), z.powi(7));
    z + (z3 + z) / (4.0 * df)
        + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * df * df)
        + (3.0 * z7 + 19.0 * z5 + 17.0 * z3 - 15.0 * z) / (384.0 * df.powi(3))
}

/// Number of block means used for the slope interval; averaging within blocks
/// absorbs the short-time correlation of MD energy fluctuations.
const DRIFT_BLOCKS: usize = 20;

/// Drift statistics of a total-energy trace, relative to `|E(0)|`. A zero
/// initial energy switches to absolute deviations and sets `absolute`.
pub fn energy_drift(trace: &[TracePoint]) -> Result<DriftReport, MdError> {
    let absolute = trace.first().is_some_and(|p| p.e_total.abs() < 1e-12);
    drift_report(trace, absolute)
}

/// Drift statistics in absolute energy units.
pub fn absolute_drift(trace: &[TracePoint]) -> Result<DriftReport, MdError> {
    drift_report(trace, true)
}

fn drift_report(trace: &[TracePoint], absolute: bool) -> Result<DriftReport, MdError> {
    if trace.len() < 2 {
        return Err(MdError::ShortTrace);
    }
    let e0 = trace[0].e_total;
    let dev: Vec<f64> =
        trace.iter().map(|p| if absolute { p.e_total - e0 } else { (p.e_total - e0) / e0.abs() }).collect();
    let max_drift = dev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let t: Vec<f64> = trace.iter().map(|p| p.t).collect();
    let (slope, _) = least_squares(&t, &dev);
    let blocks = DRIFT_BLOCKS.min(trace.len());
    let per = trace.len() / blocks;
    let (bt, bd): (Vec<f64>, Vec<f64>) = (0..blocks)
        .map(|b| {
            let r = b * per..(b + 1) * per;
            let m = per as f64;
            (t[r.clone()].iter().sum::<f64>() / m, dev[r].iter().sum::<f64>() / m)
        })
        .unzip();
    let (_, se) = least_squares(&bt, &bd);
    let ci = if blocks > 2 { t_quantile_975((blocks - 2) as f64) * se } else { f64::INFINITY };
    Ok(DriftReport { max_drift, slope_per_fs: slope, slope_ci95_per_fs: ci, absolute })
}

/// `t_fs,e_total,e_kin,e_pot`.
pub fn drift_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("t_fs,e_total,e_kin,e_pot\n");
    for p in trace {
        let _ = writeln!(out, "{:?},{:?},{:?},{:?}", p.t, p.e_total, p.e_kin, p.e_pot);
    }
    out
}

/// Multi-frame extended XYZ of recorded snapshots.
pub fn trajectory_xyz(frames: &[AtomicSystem]) -> String {
    write_xyz(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic(k: f64) -> impl FnMut(&[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>), MdError> {
        move |x: &[[f64; 3]]| {
            let e = 0.5 * k * x.iter().flatten().map(|v| v * v).sum::<f64>();
            Ok((e, x.iter().map(|p| p.map(|v| -k * v)).collect()))
        }
    }

    fn oscillator() -> (MdState, impl FnMut(&[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>), MdError>) {
        let mut ff = harmonic(1.0);
        let s = MdState::new(vec![[1.0, 0.0, 0.0]], vec![[0.0; 3]], vec![1.0], Units::REDUCED, &mut ff).unwrap();
        (s, ff)
    }

    #[test]
    fn free_particle_moves_uniformly() {
        let mut ff = |x: &[[f64; 3]]| Ok((0.0, vec![[0.0; 3]; x.len()]));
        let mut s = MdState::new(vec![[0.0; 3]], vec![[1.0, -2.0, 0.5]], vec![3.0], Units::REDUCED, &mut ff).unwrap();
        nve_run(&mut s, &mut ff, 10, 0.1, 0, |_| {}).unwrap();
        assert!((s.positions[0][0] - 1.0).abs() < 1e-12);
        assert!((s.positions[0][1] + 2.0).abs() < 1e-12);
        assert_eq!(s.velocities[0], [1.0, -2.0, 0.5]);
        assert_eq!(s.force_evaluations, 11);
    }

    #[test]
    fn harmonic_period_and_bounded_energy() {
        let (mut s, mut ff) = oscillator();
        let dt = 0.01;
        let steps = (2.0 * std::f64::consts::PI / dt).round() as usize;
        nve_run(&mut s, &mut ff, steps, dt, 0, |_| {}).unwrap();
        let t = s.time;
        assert!((s.positions[0][0] - t.cos()).abs() < 1e-3);
        let (mut s, mut ff) = oscillator();
        nve_run(&mut s, &mut ff, 10_000, dt, 0, |_| {}).unwrap();
        let err: Vec<f64> = s.trace.iter().map(|p| (p.e_total - 0.5).abs()).collect();
        let first = err[..5000].iter().cloned().fold(0.0, f64::max);
        let second = err[5000..].iter().cloned().fold(0.0, f64::max);
        assert!(first < 1e-4 && second < 1e-4);
        assert!(second <= first * 1.01);
        assert!(energy_drift(&s.trace).unwrap().trend_is_zero());
    }

    #[test]
    fn time_reversal() {
        let mut lj = LennardJones { epsilon: 0.01, sigma: 3.4 };
        let x0 = vec![[0.0; 3], [3.9, 0.1, 0.0], [1.8, 3.3, 0.2]];
        let v0 = vec![[0.01, 0.0, 0.0], [-0.005, 0.002, 0.0], [0.0, -0.003, 0.001]];
        let m = vec![39.9; 3];
        let mut s = MdState::new(x0.clone(), v0.clone(), m, Units::METAL, &mut lj).unwrap();
        nve_run(&mut s, &mut lj, 500, 1.0, 0, |_| {}).unwrap();
        s.velocities.iter_mut().for_each(|v| v.iter_mut().for_each(|c| *c = -*c));
        nve_run(&mut s, &mut lj, 500, 1.0, 0, |_| {}).unwrap();
        for (a, b) in s.positions.iter().zip(&x0) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-10);
            }
        }
        for (a, b) in s.velocities.iter().zip(&v0) {
            for c in 0..3 {
                assert!((a[c] + b[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lj_dimer_drift() {
        let mut lj = LennardJones { epsilon: 0.0104, sigma: 3.4 };
        let x = vec![[0.0; 3], [4.2, 0.0, 0.0]];
        let m = vec![39.948; 2];
        let v = maxwell_boltzmann(&m, 30.0, 1);
        let mut s = MdState::new(x, v, m, Units::METAL, &mut lj).unwrap();
        nve_run(&mut s, &mut lj, 10_000, 0.5, 0, |_| {}).unwrap();
        let r = energy_drift(&s.trace).unwrap();
        assert!(r.max_drift <= 1e-4, "{r:?}");
        let p = s.momentum();
        assert!(p.iter().all(|c| c.abs() < 1e-8));
    }

    #[test]
    fn thermal_velocities() {
        let m = vec![12.0; 2000];
        let v = maxwell_boltzmann(&m, 300.0, 4);
        let p: f64 = (0..3).map(|c| v.iter().map(|x| 12.0 * x[c]).sum::<f64>().abs()).sum();
        assert!(p < 1e-10);
        let mut ff = |x: &[[f64; 3]]| Ok((0.0, vec![[0.0; 3]; x.len()]));
        let s = MdState::new(vec![[0.0; 3]; 2000], v, m, Units::METAL, &mut ff).unwrap();
        let t = 2.0 * s.kinetic_energy() / (3.0 * 2000.0 * BOLTZMANN_EV);
        assert!((t - 300.0).abs() < 15.0, "{t}");
    }

    #[test]
    fn drift_statistics() {
        let flat: Vec<TracePoint> =
            (0..10).map(|i| TracePoint { t: i as f64, e_kin: 1.0, e_pot: -3.0, e_total: -2.0 }).collect();
        let r = energy_drift(&flat).unwrap();
        assert_eq!((r.max_drift, r.slope_per_fs), (0.0, 0.0));
        assert!(r.trend_is_zero());

        let e0 = -5.0;
        let lin: Vec<TracePoint> = (0..1000)
            .map(|i| {
                let t = i as f64 * 0.5;
                TracePoint { t, e_kin: 0.0, e_pot: 0.0, e_total: e0 * (1.0 + 1e-6 * t) }
            })
            .collect();
        let r = energy_drift(&lin).unwrap();
        // Relative deviation is measured against |E0|, so a negative E0 flips the sign.
        assert!((r.slope_per_fs + 1e-6).abs() < 1e-9);
        assert!(!r.trend_is_zero());
        assert!((r.slope_per_ps() + 1e-3).abs() < 1e-6);

        let wobble: Vec<TracePoint> = (0..50)
            .map(|i| {
                let e = 0.01 * (i as f64).sin();
                TracePoint { t: i as f64, e_kin: 0.0, e_pot: e, e_total: e }
            })
            .collect();
        let a = energy_drift(&wobble).unwrap();
        assert!(a.absolute);
        assert_eq!(a, absolute_drift(&wobble).unwrap());
        let moved: Vec<TracePoint> = wobble.iter().map(|p| TracePoint { e_total: p.e_total + 7.0, ..*p }).collect();
        let b = absolute_drift(&moved).unwrap();
        assert!((a.max_drift - b.max_drift).abs() < 1e-12);
        assert!((a.slope_per_fs - b.slope_per_fs).abs() < 1e-12);
        assert!(matches!(energy_drift(&flat[..1]), Err(MdError::ShortTrace)));
    }

    #[test]
    fn rejects_bad_input() {
        let mut ff = harmonic(1.0);
        assert!(matches!(
            MdState::new(vec![[0.0; 3]], vec![[0.0; 3]], vec![0.0], Units::REDUCED, &mut ff),
            Err(MdError::BadMass)
        ));
        let (mut s, mut ff) = oscillator();
        assert!(matches!(velocity_verlet_step(&mut s, &mut ff, 0.0), Err(MdError::BadTimeStep(_))));
        let mut nan = |x: &[[f64; 3]]| Ok((f64::NAN, vec![[0.0; 3]; x.len()]));
        assert!(matches!(velocity_verlet_step(&mut s, &mut nan, 0.1), Err(MdError::NonFinite(_))));
    }

    #[test]
    fn drift_csv_header() {
        let (mut s, mut ff) = oscillator();
        nve_run(&mut s, &mut ff, 3, 0.1, 0, |_| {}).unwrap();
        let csv = drift_csv(&s.trace);
        assert!(csv.starts_with("t_fs,e_total,e_kin,e_pot\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
