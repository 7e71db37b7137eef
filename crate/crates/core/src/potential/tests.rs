use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::molgraph::{rotation_matrix, AtomicSystem};
use crate::phi::PhiConfig;
use crate::tensor::Activation;

fn small_host() -> HostConfig {
    HostConfig { features: 8, layers: 2, n_rbf: 6, cutoff: 4.0, max_neighbors: 50, z_max: 20 }
}

fn random_system(rng: &mut ChaCha8Rng, n: usize, side: f64) -> AtomicSystem {
    loop {
        let pos: Vec<[f64; 3]> =
            (0..n).map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(0.0..side)]).collect();
        let ok = (0..n).all(|i| (0..i).all(|j| crate::molgraph::distance(&pos[i], &pos[j]) > 0.9));
        if ok {
            let z = (0..n).map(|_| [1, 6, 8][rng.gen_range(0..3)]).collect();
            return AtomicSystem::new(pos, z).unwrap();
        }
    }
}

fn host_energy_of(model: &Model, systems: &[&AtomicSystem]) -> Vec<f64> {
    let prepared: Vec<PreparedSystem> =
        systems.iter().map(|s| PreparedSystem::new(s, model, LaplacianSource::Physical).unwrap()).collect();
    let refs: Vec<&PreparedSystem> = prepared.iter().collect();
    let inputs = BatchInputs::from_prepared(&refs, model.phi.as_ref().map(|p| p.config.k)).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape, false).unwrap();
    let out = forward(&tape, model, &vars, &inputs, None).unwrap();
    let e = tape.value(out.energy).data().to_vec();
    e
}

#[test]
fn embedding_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::bare(&mut rng, &small_host()).unwrap();
    let sys = AtomicSystem::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![6, 6, 8]).unwrap();
    let prepared = PreparedSystem::new(&sys, &model, LaplacianSource::Physical).unwrap();
    let inputs = BatchInputs::from_prepared(&[&prepared], None).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape, true).unwrap();
    let h = embed(&tape, &vars.host, &inputs).unwrap();
    let f = small_host().features;
    {
        let hv = tape.value(h);
        assert_eq!(&hv.data()[0..f], &hv.data()[f..2 * f]);
        assert_eq!(&hv.data()[0..f], &model.host.embedding.data()[5 * f..6 * f]);
    }
    let total = tape.sum(h).unwrap();
    let g = tape.backward(total).unwrap().get_or_zeros(vars.host.embedding);
    assert!(g.data()[5 * f..6 * f].iter().all(|&v| v == 2.0));
    assert!(g.data()[7 * f..8 * f].iter().all(|&v| v == 1.0));
    assert!(g.data()[0..f].iter().all(|&v| v == 0.0));
}

#[test]
fn out_of_table_element_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::bare(&mut rng, &small_host()).unwrap();
    let sys = AtomicSystem::new(vec![[0.0; 3]], vec![54]).unwrap();
    assert!(matches!(
        PreparedSystem::new(&sys, &model, LaplacianSource::Physical),
        Err(PotentialError::ZOutOfRange { z: 54, .. })
    ));
}

/// Explicit per-node loops over the same parameters.
fn naive_interaction(
    p: &InteractionParams,
    h: &[f64],
    n: usize,
    f: usize,
    edges: &[(usize, usize)],
    rbf: &[f64],
    n_rbf: usize,
) -> Vec<f64> {
    let ssp = |x: f64| Activation::ShiftedSoftplus.apply(x);
    let lin = |x: &[f64], w: &Tensor, b: Option<&Tensor>| -> Vec<f64> {
        let (rows, cols) = (w.rows(), w.cols());
        (0..cols)
            .map(|c| (0..rows).map(|r| x[r] * w.at(r, c)).sum::<f64>() + b.map_or(0.0, |b| b.at(0, c)))
            .collect()
    };
    let mut out = h.to_vec();
    for i in 0..n {
        let mut m = vec![0.0; f];
        for (e, &(a, j)) in edges.iter().enumerate() {
            if a != i {
                continue;
            }
            let filt: Vec<f64> = lin(&rbf[e * n_rbf..(e + 1) * n_rbf], &p.filter1, None).into_iter().map(ssp).collect();
            let filt = lin(&filt, &p.filter2, None);
            let xj = lin(&h[j * f..(j + 1) * f], &p.input, None);
            for c in 0..f {
                m[c] += xj[c] * filt[c];
            }
        }
        let v: Vec<f64> = lin(&m, &p.update1, Some(&p.update1_bias)).into_iter().map(ssp).collect();
        let v = lin(&v, &p.update2, Some(&p.update2_bias));
        for c in 0..f {
            out[i * f + c] += v[c];
        }
    }
    out
}

#[test]
fn interaction_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small_host();
    let mut model = Model::bare(&mut rng, &cfg).unwrap();
    for l in &mut model.host.layers {
        l.update1_bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        l.update2_bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    for _ in 0..5 {
        let sys = random_system(&mut rng, 8, 4.0);
        let prepared = PreparedSystem::new(&sys, &model, LaplacianSource::Physical).unwrap();
        let inputs = BatchInputs::from_prepared(&[&prepared], None).unwrap();
        let tape = Tape::new();
        let vars = model.register(&tape, false).unwrap();
        let h0 = embed(&tape, &vars.host, &inputs).unwrap();
        let rbf = edge_features(&tape, &model.host, &inputs).unwrap();
        let h1 = interaction_step(&tape, &vars.host.layers[0], h0, rbf, &inputs).unwrap();
        let edges: Vec<(usize, usize)> = prepared.src.iter().copied().zip(prepared.dst.iter().copied()).collect();
        let expected = naive_interaction(
            &model.host.layers[0],
            tape.value(h0).data(),
            8,
            cfg.features,
            &edges,
            prepared.rbf.data(),
            cfg.n_rbf,
        );
        for (a, b) in tape.value(h1).data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn isolated_atom_sees_only_the_update_bias_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::bare(&mut rng, &small_host()).unwrap();
    let sys = AtomicSystem::new(vec![[0.0; 3]], vec![6]).unwrap();
    let prepared = PreparedSystem::new(&sys, &model, LaplacianSource::Physical).unwrap();
    assert!(prepared.src.is_empty());
    let inputs = BatchInputs::from_prepared(&[&prepared], None).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape, false).unwrap();
    let h0 = embed(&tape, &vars.host, &inputs).unwrap();
    let rbf = edge_features(&tape, &model.host, &inputs).unwrap();
    let h1 = interaction_step(&tape, &vars.host.layers[0], h0, rbf, &inputs).unwrap();
    let p = &model.host.layers[0];
    let f = small_host().features;
    let u: Vec<f64> = (0..f).map(|c| Activation::ShiftedSoftplus.apply(p.update1_bias.at(0, c))).collect();
    for c in 0..f {
        let v: f64 = (0..f).map(|r| u[r] * p.update2.at(r, c)).sum::<f64>() + p.update2_bias.at(0, c);
        assert!((tape.value(h1).at(0, c) - tape.value(h0).at(0, c) - v).abs() < 1e-12);
    }
}

#[test]
fn mirrored_pair_has_equal_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::bare(&mut rng, &small_host()).unwrap();
    let sys = AtomicSystem::new(vec![[-0.7, 0.0, 0.0], [0.7, 0.0, 0.0]], vec![8, 8]).unwrap();
    let prepared = PreparedSystem::new(&sys, &model, LaplacianSource::Physical).unwrap();
    let inputs = BatchInputs::from_prepared(&[&prepared], None).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape, false).unwrap();
    let h0 = embed(&tape, &vars.host, &inputs).unwrap();
    let rbf = edge_features(&tape, &model.host, &inputs).unwrap();
    let h1 = interaction_step(&tape, &vars.host.layers[0], h0, rbf, &inputs).unwrap();
    let v = tape.value(h1);
    let f = small_host().features;
    assert_eq!(&v.data()[..f], &v.data()[f..]);
}

#[test]
fn readout_is_extensive() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = Model::bare(&mut rng, &small_host()).unwrap();
    let a = random_system(&mut rng, 4, 3.0);
    let b = random_system(&mut rng, 5, 3.0);
    let e = host_energy_of(&model, &[&a, &b, &a]);
    assert_eq!(e[0], e[2]);
    let mut union = a.clone();
    for (p, z) in b.positions.iter().zip(&b.atomic_numbers) {
        union.positions.push([p[0] + 50.0, p[1], p[2]]);
        union.atomic_numbers.push(*z);
    }
    let eu = host_energy_of(&model, &[&union])[0];
    assert!((eu - e[0] - e[1]).abs() < 1e-10);

    let mut zeroed = model.clone();
    zeroed.host.readout2.data_mut().iter_mut().for_each(|v| *v = 0.0);
    assert_eq!(host_energy_of(&zeroed, &[&a]), vec![0.0]);
}

fn phi_model(rng: &mut ChaCha8Rng, k: usize) -> Model {
    let cfg = PhiConfig { k, ..Default::default() };
    Model::with_phi(rng, &small_host(), cfg, 1.0).unwrap()
}

#[test]
fn zero_alpha_net_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = phi_model(&mut rng, 3);
    let plugin = model.phi.as_mut().unwrap();
    plugin.params = crate::phi::AlphaNetParams::zeros(small_host().features, &plugin.config);
    let bare = Model { host: model.host.clone(), phi: None };
    let sys = random_system(&mut rng, 6, 3.0);
    let prepared = PreparedSystem::new(&sys, &model, LaplacianSource::Physical).unwrap();
    let inputs = BatchInputs::from_prepared(&[&prepared], Some(3)).unwrap();
    let tape = Tape::new();
    let vars = model.register(&tape, false).unwrap();
    let out = forward(&tape, &model, &vars, &inputs, None).unwrap();
    let terms = out.phi.unwrap().terms;
    assert_eq!(tape.item(terms.residual), 0.0);
    assert_eq!(tape.item(terms.net_charge), 0.0);
    assert_eq!(tape.item(out.energy), host_energy_of(&bare, &[&sys])[0]);
}

#[test]
fn batch_equals_individual_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = phi_model(&mut rng, 4);
    let a = random_system(&mut rng, 6, 3.0);
    let b = random_system(&mut rng, 3, 3.0);
    let both = host_energy_of(&model, &[&a, &b]);
    assert!((both[0] - host_energy_of(&model, &[&a])[0]).abs() < 1e-10);
    assert!((both[1] - host_energy_of(&model, &[&b])[0]).abs() < 1e-10);
}

#[test]
fn energy_is_euclidean_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = phi_model(&mut rng, 3);
    let sys = random_system(&mut rng, 7, 3.0);
    let moved = sys.transformed(&rotation_matrix([0.3, -1.0, 0.4], 1.1), [2.0, -3.0, 0.5]);
    assert!((energy(&sys, &model).unwrap() - energy(&moved, &model).unwrap()).abs() < 1e-9);
}

#[test]
fn autodiff_forces_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = phi_model(&mut rng, 4);
    for _ in 0..3 {
        let sys = random_system(&mut rng, 6, 3.0);
        let ad = forces(&sys, &model, ForceMode::Autodiff).unwrap();
        assert_eq!(ad.mode, ForceMode::Autodiff);
        let fd = forces(&sys, &model, ForceMode::FiniteDifference).unwrap();
        assert!((ad.energy - fd.energy).abs() < 1e-10);
        let num: f64 = ad.forces.iter().flatten().zip(fd.forces.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = fd.forces.iter().flatten().map(|b| b * b).sum();
        assert!((num / den).sqrt() <= 1e-4, "relative error {}", (num / den).sqrt());
        for c in 0..3 {
            let s: f64 = ad.forces.iter().map(|f| f[c]).sum();
            assert!(s.abs() <= 1e-7, "net force {s}");
        }
    }
}

#[test]
fn single_atom_feels_no_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = phi_model(&mut rng, 2);
    let sys = AtomicSystem::new(vec![[0.5, 0.1, -0.2]], vec![6]).unwrap();
    let r = forces(&sys, &model, ForceMode::Autodiff).unwrap();
    assert_eq!(r.forces, vec![[0.0; 3]]);
}

#[test]
fn degenerate_spectrum_falls_back_to_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = phi_model(&mut rng, 3);
    // Equilateral triangle: the two nonzero Laplacian eigenvalues coincide.
    let h = 3f64.sqrt() / 2.0;
    let sys = AtomicSystem::new(vec![[0.0; 3], [1.5, 0.0, 0.0], [0.75, 1.5 * h, 0.0]], vec![6, 6, 6]).unwrap();
    let r = forces(&sys, &model, ForceMode::Autodiff).unwrap();
    assert_eq!(r.mode, ForceMode::FiniteDifference);
}
