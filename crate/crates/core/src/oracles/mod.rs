//! Closed-form and numerical checks of the plugin's optimization properties.
//!
//! The surrogate objective over a charge vector `rho` for fixed potential `phi` is
//! `beta ||L phi - rho||^2 + (a + phi^T rho / 2)^2`, with `a` the energy error of
//! the host. Its exact minimizer, reduced value, and the gradient structure of the
//! spectral residual are evaluated here and compared against brute force.

mod evp;
mod suite;

pub use evp::{evp_curve, evp_monte_carlo};
pub use suite::{verification_suite, CheckRecord, SuiteConfig, VerificationReport};

use thiserror::Error;

use crate::eigensolver::{dense_eig, SpectralBasis};
use crate::sparse::CsrMatrix;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("at least one score is required")]
    EmptyScores,
    #[error("n_max must be at least 1")]
    ZeroTrials,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(l: &CsrMatrix, phi: &[f64], beta: f64) -> Result<Vec<f64>, OracleError> {
    if !(beta > 0.0) {
        return Err(OracleError::NonPositiveBeta(beta));
    }
    l.matvec(phi).map_err(|_| OracleError::DimensionMismatch { expected: l.dim(), got: phi.len() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerMinimizerResult {
    pub t_star: f64,
    pub rho_star: Vec<f64>,
    pub objective_at_star: f64,
    /// `a + phi^T L phi / 2`.
    pub a_phi: f64,
}

/// `beta ||L phi - rho||^2 + (a + phi^T rho / 2)^2`.
pub fn surrogate_objective(l: &CsrMatrix, phi: &[f64], rho: &[f64], a: f64, beta: f64) -> Result<f64, OracleError> {
    let lphi = check(l, phi, beta)?;
    if rho.len() != phi.len() {
        return Err(OracleError::DimensionMismatch { expected: phi.len(), got: rho.len() });
    }
    let r: f64 = lphi.iter().zip(rho).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(beta * r + (a + 0.5 * dot(phi, rho)).powi(2))
}

/// `t* = (a + phi^T L phi / 2) / (2 beta + ||phi||^2 / 2)`, `rho* = L phi - t* phi`.
pub fn inner_minimizer(l: &CsrMatrix, phi: &[f64], a: f64, beta: f64) -> Result<InnerMinimizerResult, OracleError> {
    let lphi = check(l, phi, beta)?;
    let a_phi = a + 0.5 * dot(phi, &lphi);
    let t_star = a_phi / (2.0 * beta + 0.5 * dot(phi, phi));
    let rho_star: Vec<f64> = lphi.iter().zip(phi).map(|(x, p)| x - t_star * p).collect();
    let objective_at_star = surrogate_objective(l, phi, &rho_star, a, beta)?;
    Ok(InnerMinimizerResult { t_star, rho_star, objective_at_star, a_phi })
}

/// `A(phi)^2 * 4 beta / (4 beta + ||phi||^2)`.
pub fn reduced_objective(l: &CsrMatrix, phi: &[f64], a: f64, beta: f64) -> Result<f64, OracleError> {
    let lphi = check(l, phi, beta)?;
    let a_phi = a + 0.5 * dot(phi, &lphi);
    let value = a_phi * a_phi * 4.0 * beta / (4.0 * beta + dot(phi, phi));
    debug_assert!({
        let at_star = inner_minimizer(l, phi, a, beta)?.objective_at_star;
        (value - at_star).abs() <= 1e-12 * (1.0 + value.abs())
    });
    Ok(value)
}

/// Variant with `phi` projected onto `span(U)` before the closed form is applied.
///
/// For `phi` in the span, `L phi` and hence `rho*` lie in it too, so this is also
/// the minimizer over `rho in span(U)`.
pub fn projected_inner_minimizer(
    l: &CsrMatrix,
    basis: &SpectralBasis,
    phi: &[f64],
    a: f64,
    beta: f64,
) -> Result<InnerMinimizerResult, OracleError> {
    if phi.len() != basis.n {
        return Err(OracleError::DimensionMismatch { expected: basis.n, got: phi.len() });
    }
    let projected = basis.expand(&basis.project(phi));
    inner_minimizer(l, &projected, a, beta)
}

/// Plain gradient descent with Armijo backtracking on the surrogate objective.
/// With `basis` the iterate is restricted to `rho = U c`.
pub fn numerical_inner_minimizer(
    l: &CsrMatrix,
    phi: &[f64],
    a: f64,
    beta: f64,
    basis: Option<&SpectralBasis>,
    grad_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>, OracleError> {
    let lphi = check(l, phi, beta)?;
    let dim = basis.map_or(phi.len(), |b| b.k);
    let to_rho = |c: &[f64]| -> Vec<f64> { basis.map_or_else(|| c.to_vec(), |b| b.expand(c)) };
    let mut c = vec![0.0; dim];
    let mut step = 1.0;
    for _ in 0..max_iter {
        let rho = to_rho(&c);
        let r: Vec<f64> = lphi.iter().zip(&rho).map(|(x, y)| x - y).collect();
        let e = a + 0.5 * dot(phi, &rho);
        let g: Vec<f64> = r.iter().zip(phi).map(|(ri, p)| -2.0 * beta * ri + e * p).collect();
        let g = basis.map_or_else(|| g.clone(), |b| b.project(&g));
        let gg = dot(&g, &g);
        if gg.sqrt() <= grad_tol {
            break;
        }
        step *= 2.0;
        loop {
            // Objective change in difference form, free of cancellation against its value.
            let delta: Vec<f64> = g.iter().map(|d| -step * d).collect();
            let drho = to_rho(&delta);
            let de = 0.5 * dot(phi, &drho);
            let change = beta * (dot(&drho, &drho) - 2.0 * dot(&r, &drho)) + de * (2.0 * e + de);
            if change <= -0.5 * step * gg {
                c.iter_mut().zip(&delta).for_each(|(x, d)| *x += d);
                break;
            }
            step *= 0.5;
            if step < 1e-30 {
                return Ok(to_rho(&c));
            }
        }
    }
    Ok(to_rho(&c))
}

/// Smallest eigenvalue of the Hessian `2 beta I + phi phi^T / 2`.
pub fn hessian_min_eigenvalue(phi: &[f64], beta: f64) -> Result<f64, OracleError> {
    let n = phi.len();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] = 0.5 * phi[i] * phi[j] + if i == j { 2.0 * beta } else { 0.0 };
        }
    }
    let eig = dense_eig(&h, n).map_err(|_| OracleError::DimensionMismatch { expected: n, got: n })?;
    Ok(eig.values[0])
}

/// Analytic and tape gradients of `beta ||r||^2` for the two charge parameterizations.
///
/// Case A: `rho = U Lambda alpha_rho`, so `r = Lambda (alpha_phi - alpha_rho)`.
/// Case B: `rho = U alpha_rho`, so `r = Lambda alpha_phi - alpha_rho`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSymmetryReport {
    pub case_a_phi: Vec<f64>,
    pub case_a_rho: Vec<f64>,
    pub case_b_phi: Vec<f64>,
    pub case_b_rho: Vec<f64>,
    /// `max_i |dA/dalpha_phi_i + dA/dalpha_rho_i|`.
    pub case_a_imbalance: f64,
    /// `|dB/dalpha_phi_i| / |dB/dalpha_rho_i|` per mode, `None` where the charge gradient vanishes.
    pub case_b_ratio: Vec<Option<f64>>,
    /// Largest difference between analytic and tape gradients over both cases.
    pub max_tape_deviation: f64,
}

pub fn gradient_symmetry_check(
    lambda: &[f64],
    alpha_phi: &[f64],
    alpha_rho: &[f64],
    beta: f64,
) -> Result<GradientSymmetryReport, OracleError> {
    if !(beta > 0.0) {
        return Err(OracleError::NonPositiveBeta(beta));
    }
    let k = lambda.len();
    for v in [alpha_phi, alpha_rho] {
        if v.len() != k {
            return Err(OracleError::DimensionMismatch { expected: k, got: v.len() });
        }
    }
    let diff: Vec<f64> = (0..k).map(|i| alpha_phi[i] - alpha_rho[i]).collect();
    let case_a_phi: Vec<f64> = (0..k).map(|i| 2.0 * beta * lambda[i] * lambda[i] * diff[i]).collect();
    let case_a_rho: Vec<f64> = case_a_phi.iter().map(|g| -g).collect();
    let rb: Vec<f64> = (0..k).map(|i| lambda[i] * alpha_phi[i] - alpha_rho[i]).collect();
    let case_b_phi: Vec<f64> = (0..k).map(|i| 2.0 * beta * lambda[i] * rb[i]).collect();
    let case_b_rho: Vec<f64> = rb.iter().map(|r| -2.0 * beta * r).collect();

    let tape_grads = |case_b: bool| -> Result<(Vec<f64>, Vec<f64>), TensorError> {
        let tape = Tape::new();
        let ap = tape.param(Tensor::row(alpha_phi.to_vec()))?;
        let ar = tape.param(Tensor::row(alpha_rho.to_vec()))?;
        let lam = tape.constant(Tensor::row(lambda.to_vec()))?;
        let lphi = tape.mul(lam, ap)?;
        let rho = if case_b { ar } else { tape.mul(lam, ar)? };
        let r = tape.sub(lphi, rho)?;
        let loss = tape.scale(tape.sum(tape.mul(r, r)?)?, beta)?;
        let g = tape.backward(loss)?;
        Ok((g.get_or_zeros(ap).into_data(), g.get_or_zeros(ar).into_data()))
    };
    let (ta_phi, ta_rho) = tape_grads(false)?;
    let (tb_phi, tb_rho) = tape_grads(true)?;
    let max_dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let max_tape_deviation = max_dev(&ta_phi, &case_a_phi)
        .max(max_dev(&ta_rho, &case_a_rho))
        .max(max_dev(&tb_phi, &case_b_phi))
        .max(max_dev(&tb_rho, &case_b_rho));
    let case_a_imbalance = max_dev(&ta_phi, &ta_rho.iter().map(|g| -g).collect::<Vec<_>>());
    let case_b_ratio = case_b_phi
        .iter()
        .zip(&case_b_rho)
        .map(|(p, r)| (r.abs() > 0.0).then(|| p.abs() / r.abs()))
        .collect();
    Ok(GradientSymmetryReport {
        case_a_phi,
        case_a_rho,
        case_b_phi,
        case_b_rho,
        case_a_imbalance,
        case_b_ratio,
        max_tape_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_atom() -> CsrMatrix {
        CsrMatrix::from_dense(2, &[1.0, -1.0, -1.0, 1.0]).unwrap()
    }

    #[test]
    fn worked_instance() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let phi = [s, -s];
        let r = inner_minimizer(&two_atom(), &phi, 1.0, 1.0).unwrap();
        assert!((r.t_star - 0.8).abs() < 1e-14);
        assert!((r.a_phi - 2.0).abs() < 1e-14);
        assert!((r.objective_at_star - 3.2).abs() < 1e-12);
        for (x, p) in r.rho_star.iter().zip(&phi) {
            assert!((x - 1.2 * p).abs() < 1e-14);
        }
        let reduced = reduced_objective(&two_atom(), &phi, 1.0, 1.0).unwrap();
        assert!((reduced - 3.2).abs() < 1e-12 && reduced <= r.a_phi * r.a_phi);
    }

    #[test]
    fn zero_potential() {
        let r = inner_minimizer(&two_atom(), &[0.0, 0.0], 3.0, 0.5).unwrap();
        assert_eq!(r.t_star, 3.0);
        assert_eq!(r.rho_star, vec![0.0, 0.0]);
        assert_eq!(r.objective_at_star, 9.0);
        assert_eq!(reduced_objective(&two_atom(), &[0.0, 0.0], 3.0, 0.5).unwrap(), 9.0);
    }

    #[test]
    fn beta_must_be_positive() {
        assert_eq!(inner_minimizer(&two_atom(), &[1.0, 0.0], 1.0, 0.0), Err(OracleError::NonPositiveBeta(0.0)));
    }

    #[test]
    fn gradient_formulas() {
        let r = gradient_symmetry_check(&[2.0], &[1.0], &[0.0], 1.0).unwrap();
        assert_eq!((r.case_a_phi[0], r.case_a_rho[0]), (8.0, -8.0));
        assert_eq!((r.case_b_phi[0], r.case_b_rho[0]), (8.0, -4.0));
        assert_eq!(r.case_b_ratio[0], Some(2.0));
        assert!(r.max_tape_deviation < 1e-12);
        let z = gradient_symmetry_check(&[0.5, 1.5], &[0.3, -0.2], &[0.3, -0.2], 0.7).unwrap();
        assert!(z.case_a_phi.iter().chain(&z.case_a_rho).all(|&g| g == 0.0));
    }

    #[test]
    fn hessian_floor() {
        let m = hessian_min_eigenvalue(&[1.0, 2.0, -0.5], 0.25).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
    }
}
