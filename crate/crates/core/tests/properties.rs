use phi_core::eigensolver::{dense_eig, lobpcg, LobpcgOptions};
use phi_core::molgraph::{build_radius_graph, build_weighted_laplacian, AtomicSystem};
use proptest::prelude::*;

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-4.0..4.0f64), n).prop_filter("atoms too close", |p| {
        p.iter().enumerate().all(|(i, a)| p[..i].iter().all(|b| dist(a, b) > 0.3))
    })
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn system(p: Vec<[f64; 3]>) -> AtomicSystem {
    let z = vec![6; p.len()];
    AtomicSystem::new(p, z).unwrap()
}

fn dense_laplacian(p: Vec<[f64; 3]>, cutoff: f64) -> (usize, Vec<f64>) {
    let n = p.len();
    let l = build_weighted_laplacian(&build_radius_graph(&system(p), cutoff, usize::MAX)).unwrap();
    (n, l.to_dense())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radius_graph_matches_all_pairs(p in points(2..24), cutoff in 0.5..6.0f64) {
        let g = build_radius_graph(&system(p.clone()), cutoff, usize::MAX);
        let mut expected = Vec::new();
        for i in 0..p.len() {
            for j in 0..p.len() {
                if i != j && dist(&p[i], &p[j]) <= cutoff {
                    expected.push((i, j));
                }
            }
        }
        let mut edges = g.edges.clone();
        edges.sort_unstable();
        prop_assert_eq!(edges, expected);
        for (&(i, j), &d) in g.edges.iter().zip(&g.distances) {
            prop_assert!(d <= cutoff);
            prop_assert!((d - dist(&p[i], &p[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_is_symmetric_with_spectrum_in_zero_two(p in points(1..24), cutoff in 0.5..6.0f64) {
        let (n, l) = dense_laplacian(p, cutoff);
        for i in 0..n {
            let isolated = (0..n).all(|j| j == i || l[i * n + j] == 0.0);
            let diagonal = if isolated { 0.0 } else { 1.0 };
            prop_assert!((l[i * n + i] - diagonal).abs() < 1e-12);
            for j in 0..n {
                prop_assert!((l[i * n + j] - l[j * n + i]).abs() < 1e-12);
            }
        }
        let eig = dense_eig(&l, n).unwrap();
        prop_assert!(eig.values.iter().all(|&v| (-1e-10..=2.0 + 1e-10).contains(&v)), "{:?}", eig.values);
    }

    #[test]
    fn laplacian_is_invariant_under_rigid_motion(p in points(2..16), angle in 0.0..6.3f64, shift in prop::array::uniform3(-10.0..10.0f64)) {
        let (c, s) = (angle.cos(), angle.sin());
        let moved: Vec<[f64; 3]> =
            p.iter().map(|a| [c * a[0] - s * a[1] + shift[0], s * a[0] + c * a[1] + shift[1], a[2] + shift[2]]).collect();
        let (_, l0) = dense_laplacian(p, 3.0);
        let (_, l1) = dense_laplacian(moved, 3.0);
        for (a, b) in l0.iter().zip(&l1) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn laplacian_is_permutation_equivariant(p in points(2..16), seed in any::<u64>()) {
        let n = p.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut x = seed;
        for i in (1..n).rev() {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (x >> 33) as usize % (i + 1));
        }
        let permuted: Vec<[f64; 3]> = perm.iter().map(|&i| p[i]).collect();
        let (_, l) = dense_laplacian(p, 3.0);
        let (_, lp) = dense_laplacian(permuted, 3.0);
        for a in 0..n {
            for b in 0..n {
                prop_assert!((lp[a * n + b] - l[perm[a] * n + perm[b]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lobpcg_agrees_with_dense(p in points(8..40), k in 1usize..4, seed in any::<u64>()) {
        let n = p.len();
        let l = build_weighted_laplacian(&build_radius_graph(&system(p), 3.0, usize::MAX)).unwrap();
        let opts = LobpcgOptions { tol: 1e-10, max_iter: 2000, seed, ..Default::default() };
        let basis = lobpcg(&l, k, &opts).unwrap();
        let eig = dense_eig(&l.to_dense(), n).unwrap();
        for (a, b) in basis.eigenvalues.iter().zip(&eig.values) {
            prop_assert!((a - b).abs() < 1e-8, "{:?} vs {:?}", basis.eigenvalues, &eig.values[..k]);
        }
    }
}
