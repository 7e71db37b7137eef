use std::collections::{BTreeSet, HashMap};

use super::{distance, AtomicSystem};

/// Neighbor cap per atom before symmetrization.
pub const DEFAULT_MAX_NEIGHBORS: usize = 50;

const BRUTE_FORCE_LIMIT: usize = 64;

/// Symmetric radius graph over the atoms of one system.
#[derive(Clone, Debug, PartialEq)]
pub struct RadiusGraph {
    pub n_nodes: usize,
    /// Ordered pairs `(i, j)`, sorted; `(j, i)` is present whenever `(i, j)` is.
    pub edges: Vec<(usize, usize)>,
    /// `distances[e]` is the length of `edges[e]` in Å.
    pub distances: Vec<f64>,
    pub cutoff: f64,
    pub max_neighbors: usize,
}

impl RadiusGraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        let start = self.edges.partition_point(|&(a, _)| a < i);
        let end = self.edges.partition_point(|&(a, _)| a <= i);
        end - start
    }

    /// Source and target index arrays.
    pub fn endpoints(&self) -> (Vec<usize>, Vec<usize>) {
        self.edges.iter().copied().unzip()
    }
}

/// All unordered pairs `(i, j, d_ij)` with `i < j` and `d_ij <= cutoff`, sorted by `(i, j)`.
pub fn neighbor_pairs(positions: &[[f64; 3]], cutoff: f64) -> Vec<(usize, usize, f64)> {
    let n = positions.len();
    let mut pairs = Vec::new();
    if n <= BRUTE_FORCE_LIMIT {
        for i in 0..n {
            for j in i + 1..n {
                let d = distance(&positions[i], &positions[j]);
                if d <= cutoff {
                    pairs.push((i, j, d));
                }
            }
        }
        return pairs;
    }
    let cell = |p: &[f64; 3]| -> [i64; 3] {
        [(p[0] / cutoff).floor() as i64, (p[1] / cutoff).floor() as i64, (p[2] / cutoff).floor() as i64]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    for i in 0..n {
        let c = cell(&positions[i]);
        let mut found = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(members) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &j in members {
                            if j > i {
                                let d = distance(&positions[i], &positions[j]);
                                if d <= cutoff {
                                    found.push((i, j, d));
                                }
                            }
                        }
                    }
                }
            }
        }
        found.sort_by_key(|&(_, j, _)| j);
        pairs.extend(found);
    }
    pairs
}

/// Radius graph: `j` is a neighbor of `i` when `d_ij <= cutoff` and `j` is among the
/// `max_neighbors` nearest atoms of `i` (ties broken by index). The edge set is then
/// symmetrized by union.
pub fn build_radius_graph(sys: &AtomicSystem, cutoff: f64, max_neighbors: usize) -> RadiusGraph {
    assert!(cutoff > 0.0, "cutoff must be positive");
    let n = sys.len();
    let mut candidates: Vec<Vec<(f64, usize)>> = vec![Vec::new(); n];
    for (i, j, d) in neighbor_pairs(&sys.positions, cutoff) {
        candidates[i].push((d, j));
        candidates[j].push((d, i));
    }
    // One distance per unordered pair keeps d_ij and d_ji bitwise equal.
    let mut kept: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut pair_distance: HashMap<(usize, usize), f64> = HashMap::new();
    for (i, cands) in candidates.iter_mut().enumerate() {
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, j) in cands.iter().take(max_neighbors) {
            let key = (i.min(j), i.max(j));
            pair_distance.insert(key, d);
            kept.insert((i, j));
            kept.insert((j, i));
        }
    }
    let edges: Vec<(usize, usize)> = kept.into_iter().collect();
    let distances = edges.iter().map(|&(i, j)| pair_distance[&(i.min(j), i.max(j))]).collect();
    RadiusGraph { n_nodes: n, edges, distances, cutoff, max_neighbors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(rng: &mut ChaCha8Rng, n: usize, side: f64) -> AtomicSystem {
        let positions = (0..n).map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(0.0..side)]);
        AtomicSystem::new(positions.collect(), vec![6; n]).unwrap()
    }

    #[test]
    fn two_atoms_inside_and_beyond_cutoff() {
        let near = AtomicSystem::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![1, 1]).unwrap();
        let g = build_radius_graph(&near, 6.0, 50);
        assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
        assert_eq!(g.distances, vec![1.0, 1.0]);

        let far = AtomicSystem::new(vec![[0.0; 3], [7.0, 0.0, 0.0]], vec![1, 1]).unwrap();
        assert!(build_radius_graph(&far, 6.0, 50).edges.is_empty());
    }

    #[test]
    fn matches_all_pairs_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sys = random_system(&mut rng, 10, 8.0);
        let g = build_radius_graph(&sys, 4.0, 50);
        let mut expected = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                if i != j && sys.distance(i, j) <= 4.0 {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(g.edges, expected);
    }

    #[test]
    fn cell_list_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sys = random_system(&mut rng, 300, 20.0);
        let fast = neighbor_pairs(&sys.positions, 3.0);
        let mut slow = Vec::new();
        for i in 0..300 {
            for j in i + 1..300 {
                let d = sys.distance(i, j);
                if d <= 3.0 {
                    slow.push((i, j, d));
                }
            }
        }
        assert_eq!(fast, slow);
    }

    #[test]
    fn neighbor_cap_then_union_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sys = random_system(&mut rng, 40, 5.0);
        let g = build_radius_graph(&sys, 6.0, 3);
        for (e, &(i, j)) in g.edges.iter().enumerate() {
            let back = g.edges.binary_search(&(j, i)).unwrap();
            assert_eq!(g.distances[e], g.distances[back]);
            assert!(g.distances[e] <= 6.0);
        }
        // Each atom keeps at least its own three nearest.
        for i in 0..40 {
            assert!(g.degree(i) >= 3);
        }
    }
}
