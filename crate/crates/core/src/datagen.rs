//! Synthetic point-charge molecules with exact Coulomb + Lennard-Jones labels,
//! and linear carbon chains for scaling runs.
//!
//! Units are reduced: charges in e, distances in Å, Coulomb constant 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::molgraph::{AtomicSystem, MIN_SEPARATION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("invalid dataset specification: {0}")]
    InvalidSpec(String),
    #[error("molecule {molecule}: no valid geometry after {attempts} attempts")]
    RejectionBudget { molecule: usize, attempts: usize },
    #[error("atoms {0} and {1} coincide")]
    Coincident(usize, usize),
    #[error("system carries no charges")]
    MissingCharges,
}

/// How atomic charges are assigned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChargeScheme {
    /// Ion pairs with element-determined charges (Na+/Cl-, Mg2+/O2-) plus neutral Ar.
    #[default]
    NeutralPairs,
    /// Random charges on multiples of 1/64, shifted so each molecule sums to zero.
    RandomNeutralized,
}

impl std::str::FromStr for Layout {
    type Err = String;
    /// `box`, or `two-fragments:MIN:MAX` with separations in Å.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "box" {
            return Ok(Self::Box);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["two-fragments", lo, hi] => {
                let lo = lo.parse().map_err(|_| format!("bad separation {lo:?}"))?;
                let hi = hi.parse().map_err(|_| format!("bad separation {hi:?}"))?;
                Ok(Self::TwoFragments { separation_min: lo, separation_max: hi })
            }
            _ => Err(format!("unknown layout {s:?}")),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Box => f.write_str("box"),
            Self::TwoFragments { separation_min, separation_max } => {
                write!(f, "two-fragments:{separation_min}:{separation_max}")
            }
        }
    }
}

impl std::str::FromStr for ChargeScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral-pairs" => Ok(Self::NeutralPairs),
            "random-neutralized" => Ok(Self::RandomNeutralized),
            other => Err(format!("unknown charge scheme {other:?}")),
        }
    }
}

/// Spatial arrangement of the atoms of one molecule.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Layout {
    /// Uniform in a cube of edge `box_size`.
    #[default]
    Box,
    /// Two clusters, each uniform in a cube of edge `box_size`, with opposite
    /// net charges and centers `separation_min..separation_max` apart along a
    /// random direction. Only the `NeutralPairs` scheme is supported.
    TwoFragments { separation_min: f64, separation_max: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_molecules: usize,
    pub atoms_min: usize,
    pub atoms_max: usize,
    /// Edge of the cubic sampling box, Å.
    pub box_size: f64,
    pub seed: u64,
    pub charge_scheme: ChargeScheme,
    pub layout: Layout,
    pub lj_epsilon: f64,
    pub lj_sigma: f64,
    /// Position draws per molecule before giving up.
    pub max_attempts: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_molecules: 2000,
            atoms_min: 8,
            atoms_max: 16,
            box_size: 8.0,
            seed: 0,
            charge_scheme: ChargeScheme::NeutralPairs,
            layout: Layout::Box,
            lj_epsilon: 0.05,
            lj_sigma: 2.0,
            max_attempts: 100_000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidSpec(m));
        if self.atoms_min < 2 || self.atoms_max < self.atoms_min {
            return bad(format!("atom range {}..={} is invalid", self.atoms_min, self.atoms_max));
        }
        if !(self.box_size > 0.0) || !(self.lj_sigma > 0.0) || !(self.lj_epsilon >= 0.0) {
            return bad("box_size and lj_sigma must be positive, lj_epsilon non-negative".into());
        }
        if let Layout::TwoFragments { separation_min, separation_max } = self.layout {
            if !(separation_min > 0.0) || separation_max < separation_min {
                return bad(format!("separation range {separation_min}..{separation_max} is invalid"));
            }
            if self.charge_scheme != ChargeScheme::NeutralPairs || self.atoms_min < 4 {
                return bad("two fragments need neutral-pairs charges and at least 4 atoms".into());
            }
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }
}

/// `sum_{i<j} q_i q_j / d + 4 eps ((sigma/d)^12 - (sigma/d)^6)`. A zero `epsilon` disables LJ.
pub fn coulomb_lj_energy(sys: &AtomicSystem, epsilon: f64, sigma: f64) -> Result<f64, DatagenError> {
    let q = sys.charges.as_ref().ok_or(DatagenError::MissingCharges)?;
    let mut e = 0.0;
    for i in 0..sys.len() {
        for j in i + 1..sys.len() {
            let d = sys.distance(i, j);
            if d < MIN_SEPARATION {
                return Err(DatagenError::Coincident(i, j));
            }
            e += q[i] * q[j] / d;
            if epsilon != 0.0 {
                let s6 = (sigma / d).powi(6);
                e += 4.0 * epsilon * (s6 * s6 - s6);
            }
        }
    }
    Ok(e)
}

fn composition(rng: &mut ChaCha8Rng, n: usize, scheme: ChargeScheme) -> (Vec<u32>, Vec<f64>) {
    match scheme {
        ChargeScheme::NeutralPairs => {
            let pairs = rng.gen_range(1..=n / 2);
            let mut z = Vec::with_capacity(n);
            let mut q = Vec::with_capacity(n);
            for _ in 0..pairs {
                let (cation, anion, charge) = if rng.gen_bool(0.5) { (11, 17, 1.0) } else { (12, 8, 2.0) };
                z.extend([cation, anion]);
                q.extend([charge, -charge]);
            }
            z.resize(n, 18);
            q.resize(n, 0.0);
            // Interleave species so atom order carries no composition pattern.
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                z.swap(i, j);
                q.swap(i, j);
            }
            (z, q)
        }
        ChargeScheme::RandomNeutralized => {
            let mut units: Vec<i64> = (0..n - 1).map(|_| rng.gen_range(-64..=64)).collect();
            units.push(-units.iter().sum::<i64>());
            let z = (0..n).map(|_| [1, 6, 7, 8][rng.gen_range(0..4)]).collect();
            (z, units.into_iter().map(|u| u as f64 / 64.0).collect())
        }
    }
}

/// Ion cluster of `n` atoms with net charge `net` (|net| <= 2), neutral pairs, and Ar filler.
fn charged_fragment(rng: &mut ChaCha8Rng, n: usize, net: i32) -> (Vec<u32>, Vec<f64>) {
    let (ion, charge) = if net > 0 { (11, 1.0) } else { (17, -1.0) };
    let mut z = vec![ion; net.unsigned_abs() as usize];
    let mut q = vec![charge; z.len()];
    let (mut pz, mut pq) = composition(rng, n - z.len(), ChargeScheme::NeutralPairs);
    z.append(&mut pz);
    q.append(&mut pq);
    (z, q)
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if r > 1e-3 && r <= 1.0 {
            return v.map(|c| c / r);
        }
    }
}

fn molecule(spec: &SyntheticSpec, index: usize) -> Result<AtomicSystem, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n = rng.gen_range(spec.atoms_min..=spec.atoms_max);
    let (z, q, split, offset) = match spec.layout {
        Layout::Box => {
            let (z, q) = composition(&mut rng, n, spec.charge_scheme);
            (z, q, n, [0.0; 3])
        }
        Layout::TwoFragments { separation_min, separation_max } => {
            let n_a = n / 2;
            let net = rng.gen_range(-2..=2).clamp(-(n_a as i32 - 2).max(0), (n_a as i32 - 2).max(0));
            let (mut z, mut q) = charged_fragment(&mut rng, n_a, net);
            let (mut zb, mut qb) = charged_fragment(&mut rng, n - n_a, -net);
            z.append(&mut zb);
            q.append(&mut qb);
            let dist = rng.gen_range(separation_min..=separation_max);
            (z, q, n_a, unit_vector(&mut rng).map(|c| c * dist))
        }
    };
    let min_d = 0.8 * spec.lj_sigma;
    // Atoms are placed one at a time; an atom that finds no free spot in
    // PLACEMENT_TRIES draws restarts the molecule. `max_attempts` bounds the total draws.
    const PLACEMENT_TRIES: usize = 200;
    let mut draws = 0;
    'geometry: while draws < spec.max_attempts {
        let mut pos: Vec<[f64; 3]> = Vec::with_capacity(n);
        for a in 0..n {
            let shift = if a < split { [0.0; 3] } else { offset };
            let mut placed = false;
            for _ in 0..PLACEMENT_TRIES {
                draws += 1;
                let p = [
                    shift[0] + rng.gen_range(0.0..spec.box_size),
                    shift[1] + rng.gen_range(0.0..spec.box_size),
                    shift[2] + rng.gen_range(0.0..spec.box_size),
                ];
                if pos.iter().all(|o| crate::molgraph::distance(o, &p) >= min_d) {
                    pos.push(p);
                    placed = true;
                    break;
                }
                if draws >= spec.max_attempts {
                    break 'geometry;
                }
            }
            if !placed {
                continue 'geometry;
            }
        }
        let mut sys = AtomicSystem::new(pos, z).map_err(|_| DatagenError::Coincident(0, 0))?;
        sys.charges = Some(q);
        sys.energy = Some(coulomb_lj_energy(&sys, spec.lj_epsilon, spec.lj_sigma)?);
        return Ok(sys);
    }
    Err(DatagenError::RejectionBudget { molecule: index, attempts: spec.max_attempts })
}

/// Labeled molecules; molecule `i` depends only on `(seed, i)`.
pub fn gen_point_charge_set(spec: &SyntheticSpec) -> Result<Vec<AtomicSystem>, DatagenError> {
    spec.validate()?;
    (0..spec.n_molecules).into_par_iter().map(|i| molecule(spec, i)).collect()
}

/// Collinear carbon atoms along x at uniform `spacing` (Å).
pub fn gen_carbyne_chain(n_atoms: usize, spacing: f64) -> Result<AtomicSystem, DatagenError> {
    if n_atoms < 2 || !(spacing > 0.0) {
        return Err(DatagenError::InvalidSpec(format!("chain of {n_atoms} atoms at spacing {spacing}")));
    }
    let pos = (0..n_atoms).map(|i| [i as f64 * spacing, 0.0, 0.0]).collect();
    AtomicSystem::new(pos, vec![6; n_atoms]).map_err(|_| DatagenError::Coincident(0, 1))
}

/// Index partition into train / validation / test.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle cut at the given train and validation fractions; the rest is test.
pub fn split_indices(n: usize, train: f64, val: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_train = ((n as f64) * train).round() as usize;
    let n_val = (((n as f64) * val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair() {
        let mut sys = AtomicSystem::new(vec![[0.0; 3], [2.0, 0.0, 0.0]], vec![11, 17]).unwrap();
        sys.charges = Some(vec![1.0, -1.0]);
        assert_eq!(coulomb_lj_energy(&sys, 0.0, 1.0).unwrap(), -0.5);
        sys.charges = Some(vec![0.0, 0.0]);
        assert_eq!(coulomb_lj_energy(&sys, 0.0, 1.0).unwrap(), 0.0);
        // LJ vanishes at d = sigma.
        sys.charges = Some(vec![0.0, 0.0]);
        assert!(coulomb_lj_energy(&sys, 1.0, 2.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_neutral() {
        let spec = SyntheticSpec { n_molecules: 40, ..Default::default() };
        let a = gen_point_charge_set(&spec).unwrap();
        let b = gen_point_charge_set(&spec).unwrap();
        assert_eq!(a, b);
        for sys in &a {
            assert_eq!(sys.charges.as_ref().unwrap().iter().sum::<f64>(), 0.0);
            assert!((8..=16).contains(&sys.len()));
            for i in 0..sys.len() {
                for j in 0..i {
                    assert!(sys.distance(i, j) >= 1.6);
                }
            }
        }
        let spec = SyntheticSpec { n_molecules: 40, charge_scheme: ChargeScheme::RandomNeutralized, ..spec };
        for sys in gen_point_charge_set(&spec).unwrap() {
            assert_eq!(sys.charges.as_ref().unwrap().iter().sum::<f64>(), 0.0);
        }
    }

    #[test]
    fn charge_follows_element() {
        let spec = SyntheticSpec { n_molecules: 20, ..Default::default() };
        for sys in gen_point_charge_set(&spec).unwrap() {
            for (z, q) in sys.atomic_numbers.iter().zip(sys.charges.as_ref().unwrap()) {
                let expected = match z {
                    11 => 1.0,
                    17 => -1.0,
                    12 => 2.0,
                    8 => -2.0,
                    18 => 0.0,
                    _ => panic!("unexpected element {z}"),
                };
                assert_eq!(*q, expected);
            }
        }
    }

    #[test]
    fn two_fragments_carry_opposite_charges() {
        let layout = Layout::TwoFragments { separation_min: 8.0, separation_max: 10.0 };
        let spec = SyntheticSpec { n_molecules: 30, box_size: 4.0, layout, ..Default::default() };
        let mut charged = 0;
        for sys in gen_point_charge_set(&spec).unwrap() {
            let q = sys.charges.as_ref().unwrap();
            let n_a = sys.len() / 2;
            let qa: f64 = q[..n_a].iter().sum();
            assert_eq!(qa, -q[n_a..].iter().sum::<f64>());
            assert!(qa.abs() <= 2.0);
            charged += usize::from(qa != 0.0);
            let centroid = |r: std::ops::Range<usize>| -> [f64; 3] {
                let m = r.len() as f64;
                std::array::from_fn(|c| r.clone().map(|i| sys.positions[i][c]).sum::<f64>() / m)
            };
            let d = crate::molgraph::distance(&centroid(0..n_a), &centroid(n_a..sys.len()));
            assert!(d > 8.0 - 4.0 && d < 10.0 + 4.0);
        }
        assert!(charged > 10);
        assert_eq!("two-fragments:8:10".parse::<Layout>().unwrap(), layout);
        assert_eq!(layout.to_string().parse::<Layout>().unwrap(), layout);
        let bad = SyntheticSpec { charge_scheme: ChargeScheme::RandomNeutralized, ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejection_budget() {
        let spec = SyntheticSpec { n_molecules: 1, atoms_min: 16, box_size: 1.0, max_attempts: 5, ..Default::default() };
        assert!(matches!(gen_point_charge_set(&spec), Err(DatagenError::RejectionBudget { .. })));
    }

    #[test]
    fn carbyne() {
        let c = gen_carbyne_chain(2, 1.3).unwrap();
        assert_eq!(c.positions, vec![[0.0; 3], [1.3, 0.0, 0.0]]);
        assert!(gen_carbyne_chain(1, 1.3).is_err());
    }

    #[test]
    fn split_partitions_everything() {
        let s = split_indices(100, 0.8, 0.1, 4);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split_indices(100, 0.8, 0.1, 4));
    }
}
