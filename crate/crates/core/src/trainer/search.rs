//! Random search over `(k, beta, gamma)` with expected-best-score reporting.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{train_run, TrainConfig, TrainError};
use crate::datagen::Split;
use crate::molgraph::AtomicSystem;
use crate::oracles::evp_curve;
use crate::phi::PhiConfig;

/// Candidate values; each trial draws every coordinate uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub ks: Vec<usize>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let weights = vec![1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1];
        Self { ks: vec![3, 5, 7, 9, 10, 15], betas: weights.clone(), gammas: weights }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub k: usize,
    pub beta: f64,
    pub gamma: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    /// Expected best score (negated validation MAE) for `n = 1..=trials`.
    pub evp: Vec<f64>,
}

/// Runs `budget` trainings of `trial_epochs` each. Every trial shares the
/// base seed, so trials differ only in the sampled hyperparameters.
pub fn hyper_search(
    base: &TrainConfig,
    space: &SearchSpace,
    budget: usize,
    trial_epochs: usize,
    seed: u64,
    systems: &[AtomicSystem],
    split: &Split,
) -> Result<SearchOutcome, TrainError> {
    if budget == 0 {
        return Err(TrainError::Config("budget must be at least 1".into()));
    }
    if space.ks.is_empty() || space.betas.is_empty() || space.gammas.is_empty() {
        return Err(TrainError::Config("search space has an empty axis".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(budget);
    for index in 0..budget {
        let k = space.ks[rng.gen_range(0..space.ks.len())];
        let beta = space.betas[rng.gen_range(0..space.betas.len())];
        let gamma = space.gammas[rng.gen_range(0..space.gammas.len())];
        let phi = PhiConfig { k, beta, gamma, ..base.phi.clone().unwrap_or_default() };
        let cfg = TrainConfig { phi: Some(phi), epochs: trial_epochs, ..base.clone() };
        let outcome = train_run(&cfg, systems, split)?;
        log::info!("trial {index}: k={k} beta={beta:e} gamma={gamma:e} val mae {:.5}", outcome.best_val_mae);
        trials.push(Trial { index, k, beta, gamma, val_mae: outcome.best_val_mae });
    }
    let scores: Vec<f64> = trials.iter().map(|t| -t.val_mae).collect();
    let evp = evp_curve(&scores, budget).expect("budget and scores are non-empty");
    Ok(SearchOutcome { trials, evp })
}

pub fn trials_csv(trials: &[Trial]) -> String {
    let mut out = String::from("trial,k,beta,gamma,val_mae\n");
    for t in trials {
        let _ = writeln!(out, "{},{},{:e},{:e},{:e}", t.index, t.k, t.beta, t.gamma, t.val_mae);
    }
    out
}

/// `n,expected_best_score,expected_best_mae`.
pub fn evp_csv(evp: &[f64]) -> String {
    let mut out = String::from("n,expected_best_score,expected_best_mae\n");
    for (i, v) in evp.iter().enumerate() {
        let _ = writeln!(out, "{},{:e},{:e}", i + 1, v, -v);
    }
    out
}
