//! Atomic systems, radius graphs, and distance-weighted normalized Laplacians.

pub mod elements;
mod graph;
mod laplacian;
mod xyz;

pub use graph::{build_radius_graph, neighbor_pairs, RadiusGraph, DEFAULT_MAX_NEIGHBORS};
pub use laplacian::{
    block_diag_batch, build_weighted_laplacian, random_symmetric_psd, BatchedLaplacian, LaplacianError,
};
pub use xyz::{parse_xyz, write_xyz, XyzError};

use thiserror::Error;

/// Minimum separation between two atoms, in Å.
pub const MIN_SEPARATION: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SystemError {
    #[error("system has no atoms")]
    Empty,
    #[error("{field} has {got} entries, expected {expected}")]
    LengthMismatch { field: &'static str, expected: usize, got: usize },
    #[error("atom {0} has atomic number 0")]
    ZeroAtomicNumber(usize),
    #[error("atoms {0} and {1} coincide")]
    Coincident(usize, usize),
    #[error("atom {0} has a non-finite coordinate")]
    NonFinite(usize),
}

/// A molecule or cluster: positions in Å plus optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomicSystem {
    pub positions: Vec<[f64; 3]>,
    pub atomic_numbers: Vec<u32>,
    pub energy: Option<f64>,
    pub forces: Option<Vec<[f64; 3]>>,
    /// Per-atom charges of synthetic data. Never an input to a model.
    pub charges: Option<Vec<f64>>,
}

impl AtomicSystem {
    pub fn new(positions: Vec<[f64; 3]>, atomic_numbers: Vec<u32>) -> Result<Self, SystemError> {
        let sys = Self { positions, atomic_numbers, energy: None, forces: None, charges: None };
        sys.validate()?;
        Ok(sys)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        let n = self.positions.len();
        if n == 0 {
            return Err(SystemError::Empty);
        }
        if self.atomic_numbers.len() != n {
            return Err(SystemError::LengthMismatch {
                field: "atomic_numbers",
                expected: n,
                got: self.atomic_numbers.len(),
            });
        }
        if let Some(f) = &self.forces {
            if f.len() != n {
                return Err(SystemError::LengthMismatch { field: "forces", expected: n, got: f.len() });
            }
        }
        if let Some(q) = &self.charges {
            if q.len() != n {
                return Err(SystemError::LengthMismatch { field: "charges", expected: n, got: q.len() });
            }
        }
        if let Some(i) = self.atomic_numbers.iter().position(|&z| z == 0) {
            return Err(SystemError::ZeroAtomicNumber(i));
        }
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(SystemError::NonFinite(i));
        }
        if let Some(&(i, j, _)) = neighbor_pairs(&self.positions, MIN_SEPARATION).first() {
            return Err(SystemError::Coincident(i, j));
        }
        Ok(())
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        distance(&self.positions[i], &self.positions[j])
    }

    /// Applies `x -> R x + t` to every position.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = rotate(rotation, p);
            for a in 0..3 {
                p[a] += translation[a];
            }
        }
        if let Some(f) = &mut out.forces {
            for v in f.iter_mut() {
                *v = rotate(rotation, v);
            }
        }
        out
    }

    /// Relabels atoms so that new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            positions: perm.iter().map(|&p| self.positions[p]).collect(),
            atomic_numbers: perm.iter().map(|&p| self.atomic_numbers[p]).collect(),
            energy: self.energy,
            forces: self.forces.as_ref().map(|f| perm.iter().map(|&p| f[p]).collect()),
            charges: self.charges.as_ref().map(|q| perm.iter().map(|&p| q[p]).collect()),
        }
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn rotate(r: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Rotation matrix about a unit `axis` by `angle` radians (Rodrigues).
pub fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / norm, axis[1] / norm, axis[2] / norm];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_errors() {
        assert_eq!(AtomicSystem::new(vec![], vec![]).unwrap_err(), SystemError::Empty);
        assert_eq!(
            AtomicSystem::new(vec![[0.0; 3], [0.0, 0.0, 1e-8]], vec![1, 1]).unwrap_err(),
            SystemError::Coincident(0, 1)
        );
        assert_eq!(AtomicSystem::new(vec![[0.0; 3]], vec![0]).unwrap_err(), SystemError::ZeroAtomicNumber(0));
        assert!(matches!(
            AtomicSystem::new(vec![[0.0; 3]], vec![1, 2]).unwrap_err(),
            SystemError::LengthMismatch { .. }
        ));
    }

    #[test]
    fn rotation_preserves_distances() {
        let sys = AtomicSystem::new(vec![[0.0; 3], [1.0, 2.0, 0.5], [-0.3, 0.7, 2.0]], vec![6, 8, 1]).unwrap();
        let r = rotation_matrix([0.3, -1.0, 0.4], 1.1);
        let moved = sys.transformed(&r, [5.0, -2.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((sys.distance(i, j) - moved.distance(i, j)).abs() < 1e-12);
            }
        }
    }
}
