//! Expected best score among `n` random trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::OracleError;

/// `E[max of n draws] = sum_v v (P(V <= v)^n - P(V < v)^n)` over the empirical
/// distribution of `values`, for `n = 1..=n_max`. Larger scores are better.
pub fn evp_curve(values: &[f64], n_max: usize) -> Result<Vec<f64>, OracleError> {
    if values.is_empty() {
        return Err(OracleError::EmptyScores);
    }
    if n_max < 1 {
        return Err(OracleError::ZeroTrials);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    // (value, P(V < v), P(V <= v)) per distinct value.
    let mut levels = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        levels.push((sorted[i], i as f64 / m, j as f64 / m));
        i = j;
    }
    Ok((1..=n_max)
        .map(|n| levels.iter().map(|&(v, below, upto)| v * (upto.powi(n as i32) - below.powi(n as i32))).sum())
        .collect())
}

/// Monte-Carlo estimate of the same curve from `draws` resamples per `n`.
pub fn evp_monte_carlo(values: &[f64], n_max: usize, draws: usize, seed: u64) -> Result<Vec<f64>, OracleError> {
    if values.is_empty() {
        return Err(OracleError::EmptyScores);
    }
    if n_max < 1 {
        return Err(OracleError::ZeroTrials);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((1..=n_max)
        .map(|n| {
            let total: f64 = (0..draws)
                .map(|_| (0..n).map(|_| values[rng.gen_range(0..values.len())]).fold(f64::NEG_INFINITY, f64::max))
                .sum();
            total / draws as f64
        })
        .collect())
}
