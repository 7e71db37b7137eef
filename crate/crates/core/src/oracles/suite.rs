//! Randomized sweep over all oracle checks, with CSV and plain-text reports.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    evp_curve, evp_monte_carlo, gradient_symmetry_check, hessian_min_eigenvalue, inner_minimizer,
    numerical_inner_minimizer, projected_inner_minimizer, reduced_objective, surrogate_objective, OracleError,
};
use crate::eigensolver::{lobpcg, LobpcgOptions};
use crate::molgraph::{build_radius_graph, build_weighted_laplacian, AtomicSystem};
use crate::sparse::CsrMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRecord {
    pub name: String,
    /// Worst deviation observed.
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationReport {
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    fn push(&mut self, name: &str, deviation: f64, tolerance: f64) {
        let passed = deviation.is_finite() && deviation <= tolerance;
        self.checks.push(CheckRecord { name: name.to_string(), deviation, tolerance, passed });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,deviation,tolerance,passed\n");
        for c in &self.checks {
            let _ = writeln!(out, "{},{:e},{:e},{}", c.name, c.deviation, c.tolerance, c.passed);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{status} {:width$}  deviation {:.3e}  tolerance {:.1e}", c.name, c.deviation, c.tolerance);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub evp_draws: usize,
    pub evp_n_max: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { instances: 1000, seed: 0, evp_draws: 1_000_000, evp_n_max: 20 }
    }
}

struct Instance {
    l: CsrMatrix,
    phi: Vec<f64>,
    a: f64,
    beta: f64,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(2..=16);
    let side = 2.2 * (n as f64).cbrt();
    let positions = loop {
        let p: Vec<[f64; 3]> =
            (0..n).map(|_| [rng.gen_range(0.0..side), rng.gen_range(0.0..side), rng.gen_range(0.0..side)]).collect();
        if (0..n).all(|i| (0..i).all(|j| crate::molgraph::distance(&p[i], &p[j]) > 0.1)) {
            break p;
        }
    };
    let sys = AtomicSystem::new(positions, vec![6; n]).expect("separated atoms");
    let l = build_weighted_laplacian(&build_radius_graph(&sys, 3.0, 50)).expect("distances are non-negative");
    let scale = 1.0 / (n as f64).sqrt();
    let phi = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect();
    let beta = 10f64.powf(rng.gen_range(-3.0..=0.0));
    let a = rng.gen_range(-2.0..2.0);
    Instance { l, phi, a, beta }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Runs every check on `cfg.instances` random problems.
pub fn verification_suite(cfg: &SuiteConfig) -> Result<VerificationReport, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = VerificationReport::default();
    let (mut obj_dev, mut rho_dev, mut proj_obj_dev, mut proj_rho_dev) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut identity_dev, mut bound_excess, mut hessian_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut spurious_equalities = 0usize;
    let mut witness_dev = 0.0f64;
    for _ in 0..cfg.instances {
        let inst = random_instance(&mut rng);
        let (l, phi, a, beta) = (&inst.l, &inst.phi, inst.a, inst.beta);
        let closed = inner_minimizer(l, phi, a, beta)?;
        let numeric = numerical_inner_minimizer(l, phi, a, beta, None, 2.0 * beta * 1e-8, 200_000)?;
        let numeric_obj = surrogate_objective(l, phi, &numeric, a, beta)?;
        obj_dev = obj_dev.max((closed.objective_at_star - numeric_obj).abs());
        rho_dev = rho_dev.max(norm_diff(&closed.rho_star, &numeric));

        let n = phi.len();
        let k = rng.gen_range(1..=n);
        let basis = lobpcg(l, k, &LobpcgOptions::default()).map_err(|_| OracleError::DimensionMismatch {
            expected: n,
            got: k,
        })?;
        let projected = projected_inner_minimizer(l, &basis, phi, a, beta)?;
        let pphi = basis.expand(&basis.project(phi));
        let restricted = numerical_inner_minimizer(l, &pphi, a, beta, Some(&basis), 2.0 * beta * 1e-8, 200_000)?;
        let restricted_obj = surrogate_objective(l, &pphi, &restricted, a, beta)?;
        proj_obj_dev = proj_obj_dev.max((projected.objective_at_star - restricted_obj).abs());
        proj_rho_dev = proj_rho_dev.max(norm_diff(&projected.rho_star, &restricted));

        let reduced = reduced_objective(l, phi, a, beta)?;
        identity_dev = identity_dev.max((reduced - closed.objective_at_star).abs());
        let a2 = closed.a_phi * closed.a_phi;
        bound_excess = bound_excess.max(reduced - a2);
        if reduced == a2 {
            spurious_equalities += 1;
        }
        hessian_gap = hessian_gap.max(2.0 * beta - hessian_min_eigenvalue(phi, beta)?);

        // Equality witnesses: A(phi) = 0 by choice of a, and phi = 0.
        let lphi = l.matvec(phi).expect("dimensions match");
        let a_zero = -0.5 * phi.iter().zip(&lphi).map(|(p, q)| p * q).sum::<f64>();
        let w = inner_minimizer(l, phi, a_zero, beta)?;
        witness_dev = witness_dev.max((reduced_objective(l, phi, a_zero, beta)? - w.a_phi * w.a_phi).abs());
        let zero = vec![0.0; n];
        witness_dev = witness_dev.max((reduced_objective(l, &zero, a, beta)? - a * a).abs());
    }
    report.push("theorem1_objective", obj_dev, 1e-6);
    report.push("theorem1_rho_norm", rho_dev, 1e-6);
    report.push("theorem1_projected_objective", proj_obj_dev, 1e-6);
    report.push("theorem1_projected_rho_norm", proj_rho_dev, 1e-6);
    report.push("theorem1_hessian_floor", hessian_gap.max(0.0), 1e-12);
    report.push("theorem2_identity", identity_dev, 1e-12);
    report.push("theorem2_bound_excess", bound_excess.max(0.0), 0.0);
    report.push("theorem2_strict_on_random", spurious_equalities as f64, 0.0);
    report.push("theorem2_equality_witnesses", witness_dev, 1e-12);

    let (mut imbalance, mut ratio_dev, mut tape_dev) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cfg.instances.min(200) {
        let k = 6;
        let lambda: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..2.0)).collect();
        let ap: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ar: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let beta = rng.gen_range(0.01..1.0);
        let r = gradient_symmetry_check(&lambda, &ap, &ar, beta)?;
        imbalance = imbalance.max(r.case_a_imbalance);
        tape_dev = tape_dev.max(r.max_tape_deviation);
        for (ratio, l) in r.case_b_ratio.iter().zip(&lambda) {
            if let Some(ratio) = ratio {
                ratio_dev = ratio_dev.max((ratio - l).abs());
            }
        }
    }
    report.push("prop1_case_a_equal_opposite", imbalance, 1e-12);
    report.push("prop1_case_b_ratio", ratio_dev, 1e-10);
    report.push("prop1_tape_agreement", tape_dev, 1e-10);

    let scores: Vec<f64> = (0..40).map(|_| (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0).collect();
    let exact = evp_curve(&scores, cfg.evp_n_max)?;
    let mc = evp_monte_carlo(&scores, cfg.evp_n_max, cfg.evp_draws, cfg.seed.wrapping_add(1))?;
    report.push("evp_monte_carlo", exact.iter().zip(&mc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max), 1e-2);
    let drop = exact.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    report.push("evp_monotone", drop, 0.0);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = SuiteConfig { instances: 30, seed: 3, evp_draws: 50_000, evp_n_max: 8 };
        let r = verification_suite(&cfg).unwrap();
        assert!(r.all_passed(), "{}", r.to_text());
        assert!(r.to_csv().starts_with("check,deviation,tolerance,passed\n"));
        assert_eq!(r.to_csv().lines().count(), r.checks.len() + 1);
    }
}
