//! Training and evaluation: energy MAE plus the weighted Poisson residual and
//! net-charge penalties, Adam with cosine decay, data-scarcity subsets,
//! ablations, and a random hyperparameter search.

mod adam;
mod checkpoint;
mod search;

pub use adam::{clip_global_norm, cosine_lr, Adam};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, tensor_names, write_checkpoint, CheckpointError};
pub use search::{evp_csv, hyper_search, trials_csv, SearchOutcome, SearchSpace, Trial};

use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::Split;
use crate::molgraph::AtomicSystem;
use crate::phi::{AlphaNetParams, PhiConfig};
use crate::potential::{
    forward, BatchInputs, HostConfig, LaplacianSource, Model, PhiPlugin, PotentialError, PotentialParameters,
    PreparedSystem,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Data fractions used for the scarcity experiments.
pub const DATA_FRACTIONS: [f64; 4] = [0.05, 0.25, 0.5, 1.0];

// Stream ids of the master seed.
const STREAM_HOST_INIT: u64 = 0;
const STREAM_ALPHA_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_SUBSAMPLE: u64 = 3;
const STREAM_RANDOM_LAPLACIAN: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("molecule {0} has no energy label")]
    MissingEnergy(usize),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Component removed or replaced for an ablation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Ablation {
    #[default]
    None,
    /// A fixed random symmetric PSD matrix per molecule replaces the Laplacian.
    RandomLaplacian,
    /// The residual weight is zero; the residual is still logged.
    NoResidual,
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "random-laplacian" => Ok(Self::RandomLaplacian),
            "no-residual" => Ok(Self::NoResidual),
            other => Err(format!("unknown ablation {other:?}")),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::RandomLaplacian => "random-laplacian",
            Self::NoResidual => "no-residual",
        })
    }
}

/// Initial α-Net weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaInit {
    /// Variance-scaled normal weights with both heads multiplied by `head_scale`.
    Random { head_scale: f64 },
    /// All zeros; the plugin then starts as an exact no-op.
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub host: HostConfig,
    /// `None` trains the bare host.
    pub phi: Option<PhiConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub data_fraction: f64,
    pub ablation: Ablation,
    pub alpha_init: AlphaInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            host: HostConfig::default(),
            phi: Some(PhiConfig::default()),
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            lr_floor: 0.01,
            grad_clip: 1e3,
            seed: 0,
            data_fraction: 1.0,
            ablation: Ablation::None,
            alpha_init: AlphaInit::Random { head_scale: 0.1 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("lr_floor must lie in [0, 1]");
        }
        if !DATA_FRACTIONS.contains(&self.data_fraction) {
            return bad("data_fraction must be one of 0.05, 0.25, 0.5, 1.0");
        }
        if self.ablation != Ablation::None && self.phi.is_none() {
            return bad("ablations need the Φ plugin");
        }
        self.host.validate()?;
        if let Some(p) = &self.phi {
            p.validate().map_err(PotentialError::from)?;
        }
        Ok(())
    }

    /// Residual weight after the ablation is applied.
    pub fn effective_beta(&self) -> f64 {
        match (&self.phi, self.ablation) {
            (None, _) | (_, Ablation::NoResidual) => 0.0,
            (Some(p), _) => p.beta,
        }
    }

    pub fn effective_gamma(&self) -> f64 {
        self.phi.as_ref().map_or(0.0, |p| p.gamma)
    }
}

/// Scalar components of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub model: f64,
    pub pde: f64,
    pub net: f64,
    pub total: f64,
}

/// `mean |E - E_hat| + beta l_pde + gamma l_net`.
pub fn total_loss(e_hat: &[f64], e_target: &[f64], l_pde: f64, l_net: f64, beta: f64, gamma: f64) -> LossParts {
    debug_assert_eq!(e_hat.len(), e_target.len());
    debug_assert!(!e_hat.is_empty());
    let model = e_hat.iter().zip(e_target).map(|(a, b)| (a - b).abs()).sum::<f64>() / e_hat.len() as f64;
    LossParts { model, pde: l_pde, net: l_net, total: model + beta * l_pde + gamma * l_net }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Model initialized from the seed streams. Host weights do not depend on
/// whether the plugin is enabled.
pub fn init_model(cfg: &TrainConfig) -> Result<Model, TrainError> {
    let host = PotentialParameters::init(&mut stream(cfg.seed, STREAM_HOST_INIT), &cfg.host)?;
    let phi = cfg.phi.as_ref().map(|p| {
        let params = match cfg.alpha_init {
            AlphaInit::Random { head_scale } => {
                AlphaNetParams::init(&mut stream(cfg.seed, STREAM_ALPHA_INIT), cfg.host.features, p, head_scale)
            }
            AlphaInit::Zeros => AlphaNetParams::zeros(cfg.host.features, p),
        };
        PhiPlugin { config: p.clone(), params }
    });
    Ok(Model { host, phi })
}

/// Training subset of `split.train` for the configured fraction.
pub fn subsample(cfg: &TrainConfig, train: &[usize]) -> Vec<usize> {
    let mut idx = train.to_vec();
    let mut rng = stream(cfg.seed, STREAM_SUBSAMPLE);
    shuffle(&mut idx, &mut rng);
    let keep = ((idx.len() as f64 * cfg.data_fraction).round() as usize).clamp(1.min(idx.len()), idx.len());
    idx.truncate(keep);
    idx
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Per-atom shift and scale of the readout from training labels.
pub fn energy_statistics(systems: &[&AtomicSystem]) -> Result<(f64, f64), TrainError> {
    let (mut e_sum, mut n_sum) = (0.0, 0.0);
    for (i, s) in systems.iter().enumerate() {
        e_sum += s.energy.ok_or(TrainError::MissingEnergy(i))?;
        n_sum += s.len() as f64;
    }
    if n_sum == 0.0 {
        return Err(TrainError::EmptySplit("train"));
    }
    let shift = e_sum / n_sum;
    let var = systems
        .iter()
        .map(|s| {
            let r = s.energy.unwrap_or(0.0) - shift * s.len() as f64;
            r * r / s.len() as f64
        })
        .sum::<f64>()
        / systems.len() as f64;
    let scale = if var.is_finite() && var > 1e-24 { var.sqrt() } else { 1.0 };
    Ok((shift, scale))
}

/// Prepares every listed molecule for `model`.
pub fn prepare(
    model: &Model,
    systems: &[AtomicSystem],
    indices: &[usize],
    ablation: Ablation,
    seed: u64,
) -> Result<Vec<PreparedSystem>, TrainError> {
    let base = stream(seed, STREAM_RANDOM_LAPLACIAN).next_u64();
    indices
        .iter()
        .map(|&i| {
            let source = match ablation {
                Ablation::RandomLaplacian => LaplacianSource::Random { seed: base.wrapping_add(i as u64) },
                _ => LaplacianSource::Physical,
            };
            let p = PreparedSystem::new(&systems[i], model, source)?;
            if p.energy.is_none() {
                return Err(TrainError::MissingEnergy(i));
            }
            Ok(p)
        })
        .collect()
}

/// Split-level metrics. Φ diagnostics are absent for a bare host.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    pub mae: f64,
    pub phi: Option<PhiDiagnostics>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiDiagnostics {
    /// Mean per-graph Poisson residual norm.
    pub residual_mean: f64,
    /// Mean per-graph `|sum rho|`.
    pub net_charge_mean: f64,
    /// Largest per-graph `|sum rho|`.
    pub net_charge_max: f64,
    /// Mean per-graph electrostatic energy.
    pub es_mean: f64,
}

fn k_of(model: &Model) -> Option<usize> {
    model.phi.as_ref().map(|p| p.config.k)
}

/// Energies and optional per-graph Φ terms of a batch, without gradients.
struct BatchEval {
    energy: Vec<f64>,
    residual: Vec<f64>,
    net_charge: Vec<f64>,
    electrostatic: Vec<f64>,
}

fn eval_batch(model: &Model, items: &[&PreparedSystem]) -> Result<BatchEval, TrainError> {
    let tape = Tape::new();
    let vars = model.register(&tape, false)?;
    let inputs = BatchInputs::from_prepared(items, k_of(model))?;
    let out = forward(&tape, model, &vars, &inputs, None)?;
    let col = |v: Var| tape.value(v).data().to_vec();
    let (residual, net_charge, electrostatic) = match &out.phi {
        Some(p) => (col(p.terms.residual), col(p.terms.net_charge), col(p.terms.electrostatic)),
        None => (vec![], vec![], vec![]),
    };
    Ok(BatchEval { energy: col(out.energy), residual, net_charge, electrostatic })
}

/// MAE and Φ diagnostics over `systems`, evaluated in chunks of `batch_size`.
pub fn evaluate(model: &Model, systems: &[PreparedSystem], batch_size: usize) -> Result<EvalMetrics, TrainError> {
    if systems.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut abs_err = 0.0;
    let (mut res, mut net, mut net_max, mut es) = (0.0, 0.0, 0.0f64, 0.0);
    for (c, chunk) in systems.chunks(batch_size.max(1)).enumerate() {
        let items: Vec<&PreparedSystem> = chunk.iter().collect();
        let b = eval_batch(model, &items)?;
        for (i, (p, e)) in chunk.iter().zip(&b.energy).enumerate() {
            let target = p.energy.ok_or(TrainError::MissingEnergy(c * batch_size + i))?;
            abs_err += (e - target).abs();
        }
        res += b.residual.iter().sum::<f64>();
        net += b.net_charge.iter().sum::<f64>();
        net_max = b.net_charge.iter().fold(net_max, |m, &v| m.max(v));
        es += b.electrostatic.iter().sum::<f64>();
    }
    let n = systems.len() as f64;
    let phi = model.phi.as_ref().map(|_| PhiDiagnostics {
        residual_mean: res / n,
        net_charge_mean: net / n,
        net_charge_max: net_max,
        es_mean: es / n,
    });
    Ok(EvalMetrics { n: systems.len(), mae: abs_err / n, phi })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch MAE over the epoch's optimization steps.
    pub train_mae: f64,
    pub val: EvalMetrics,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

/// `epoch,split,mae,l_pde,l_net,es_mean,net_charge,train_mae,lr` with one
/// validation row per epoch. Φ columns are empty for a bare host.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,mae,l_pde,l_net,es_mean,net_charge,train_mae,lr\n");
    for m in history {
        let phi = match &m.val.phi {
            Some(p) => format!("{:e},{:e},{:e},{:e}", p.residual_mean, p.net_charge_mean, p.es_mean, p.net_charge_max),
            None => ",,,".to_string(),
        };
        let _ = writeln!(out, "{},val,{:e},{},{:e},{:e}", m.epoch, m.val.mae, phi, m.train_mae, m.lr);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation MAE.
    pub best_model: Model,
    pub final_model: Model,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub history: Vec<EpochMetrics>,
    /// Loss components of every optimization step.
    pub steps: Vec<LossParts>,
}

/// Records the total training objective of one batch on `tape`.
pub fn batch_loss(
    tape: &Tape,
    model: &Model,
    vars: &crate::potential::ModelVars,
    items: &[&PreparedSystem],
    beta: f64,
    gamma: f64,
) -> Result<(Var, LossParts), TrainError> {
    let inputs = BatchInputs::from_prepared(items, k_of(model))?;
    let out = forward(tape, model, vars, &inputs, None)?;
    let targets: Vec<f64> = items.iter().map(|p| p.energy.expect("checked in prepare")).collect();
    let target = tape.constant(Tensor::column(targets))?;
    let mae = tape.mean(tape.abs(tape.sub(out.energy, target)?)?)?;
    let mut loss = mae;
    let (mut pde, mut net) = (0.0, 0.0);
    if let Some(p) = &out.phi {
        let l_pde = tape.mean(p.terms.residual)?;
        let l_net = tape.mean(p.terms.net_charge)?;
        pde = tape.item(l_pde);
        net = tape.item(l_net);
        if beta != 0.0 {
            loss = tape.add(loss, tape.scale(l_pde, beta)?)?;
        }
        if gamma != 0.0 {
            loss = tape.add(loss, tape.scale(l_net, gamma)?)?;
        }
    }
    let model_term = tape.item(mae);
    Ok((loss, LossParts { model: model_term, pde, net, total: tape.item(loss) }))
}

fn dump_batch(systems: &[AtomicSystem], ids: &[usize]) -> String {
    let mut s = String::new();
    for &i in ids {
        let sys = &systems[i];
        let _ = write!(s, "[molecule {i}: {} atoms, energy {:?}] ", sys.len(), sys.energy);
    }
    s
}

/// Trains on `split.train` (subsampled by `data_fraction`) and selects the
/// parameters with the lowest validation MAE.
pub fn train_run(cfg: &TrainConfig, systems: &[AtomicSystem], split: &Split) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if split.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let train_idx = subsample(cfg, &split.train);
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let mut model = init_model(cfg)?;
    let labelled: Vec<&AtomicSystem> = train_idx.iter().map(|&i| &systems[i]).collect();
    let (shift, scale) = energy_statistics(&labelled)?;
    model.host.energy_shift = shift;
    model.host.energy_scale = scale;

    let train = prepare(&model, systems, &train_idx, cfg.ablation, cfg.seed)?;
    let val = prepare(&model, systems, &split.val, cfg.ablation, cfg.seed)?;
    let (beta, gamma) = (cfg.effective_beta(), cfg.effective_gamma());

    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut step = 0;
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let (mut mae_sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&PreparedSystem> = batch.iter().map(|&i| &train[i]).collect();
            let ids: Vec<usize> = batch.iter().map(|&i| train_idx[i]).collect();
            let fail = |detail: String| {
                let detail = format!("{detail}; batch {}", dump_batch(systems, &ids));
                log::error!("non-finite training state at epoch {epoch}, step {step}: {detail}");
                TrainError::NonFinite { epoch, step, detail }
            };
            let tape = Tape::new();
            let vars = model.register(&tape, true)?;
            let (loss, parts) = match batch_loss(&tape, &model, &vars, &items, beta, gamma) {
                Ok(v) => v,
                Err(TrainError::Tensor(e @ TensorError::NonFinite { .. }))
                | Err(TrainError::Potential(PotentialError::Tensor(e @ TensorError::NonFinite { .. }))) => {
                    return Err(fail(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            if !parts.total.is_finite() {
                return Err(fail(format!("loss {:?}", parts)));
            }
            let grads = tape.backward(loss).map_err(|e| match e {
                TensorError::NonFinite { .. } => fail(e.to_string()),
                e => e.into(),
            })?;
            let mut g: Vec<Tensor> = vars.all().into_iter().map(|v| grads.get_or_zeros(v)).collect();
            if !g.iter().all(Tensor::is_finite) {
                return Err(fail("non-finite gradient".into()));
            }
            clip_global_norm(&mut g, cfg.grad_clip);
            lr = cosine_lr(cfg.lr, cfg.lr_floor, step, total_steps);
            adam.step(&mut model.tensors_mut(), &g, lr);
            mae_sum += parts.model * items.len() as f64;
            count += items.len();
            steps.push(parts);
            step += 1;
        }
        let val_metrics = evaluate(&model, &val, cfg.batch_size)?;
        if !val_metrics.mae.is_finite() {
            return Err(TrainError::NonFinite { epoch, step, detail: "validation MAE".into() });
        }
        if best.as_ref().map_or(true, |(_, b, _)| val_metrics.mae < *b) {
            best = Some((epoch, val_metrics.mae, model.clone()));
        }
        log::info!("epoch {epoch}: train mae {:.5} val mae {:.5}", mae_sum / count as f64, val_metrics.mae);
        history.push(EpochMetrics { epoch, train_mae: mae_sum / count as f64, val: val_metrics, lr });
    }
    let (best_epoch, best_val_mae, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { best_model, final_model: model, best_epoch, best_val_mae, history, steps })
}
