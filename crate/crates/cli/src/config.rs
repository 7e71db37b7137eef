//! Line-oriented `key = value` configuration with dotted sections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use phi_core::bench::SweepConfig;
use phi_core::datagen::{ChargeScheme, Layout, SyntheticSpec};
use phi_core::eigensolver::Which;
use phi_core::oracles::SuiteConfig;
use phi_core::phi::PhiConfig;
use phi_core::potential::HostConfig;
use phi_core::trainer::{Ablation, AlphaInit, SearchSpace, TrainConfig};

use crate::CliError;

/// Every accepted key with its default, in echo order.
fn defaults() -> Vec<(&'static str, String)> {
    let data = SyntheticSpec::default();
    let host = HostConfig::default();
    let phi = PhiConfig::default();
    let train = TrainConfig::default();
    let suite = SuiteConfig::default();
    let bench = SweepConfig::default();
    let space = SearchSpace::default();
    let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let flist = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    let head_scale = match train.alpha_init {
        AlphaInit::Random { head_scale } => head_scale,
        AlphaInit::Zeros => 0.1,
    };
    vec![
        ("threads", "1".into()),
        ("data.path", String::new()),
        ("data.n_molecules", data.n_molecules.to_string()),
        ("data.atoms_min", data.atoms_min.to_string()),
        ("data.atoms_max", data.atoms_max.to_string()),
        ("data.box_size", format!("{:?}", data.box_size)),
        ("data.seed", data.seed.to_string()),
        ("data.charge_scheme", "neutral-pairs".into()),
        ("data.layout", data.layout.to_string()),
        ("data.lj_epsilon", format!("{:?}", data.lj_epsilon)),
        ("data.lj_sigma", format!("{:?}", data.lj_sigma)),
        ("data.train_fraction", "0.8".into()),
        ("data.val_fraction", "0.1".into()),
        ("data.split_seed", "0".into()),
        ("host.features", host.features.to_string()),
        ("host.layers", host.layers.to_string()),
        ("host.n_rbf", host.n_rbf.to_string()),
        ("host.cutoff", format!("{:?}", host.cutoff)),
        ("host.max_neighbors", host.max_neighbors.to_string()),
        ("phi.enabled", "true".into()),
        ("phi.k", phi.k.to_string()),
        ("phi.beta", format!("{:?}", phi.beta)),
        ("phi.gamma", format!("{:?}", phi.gamma)),
        ("phi.kernel_size", phi.kernel_size.to_string()),
        ("phi.hidden_channels", "auto".into()),
        ("phi.which", "smallest".into()),
        ("phi.laplacian_cutoff", "host".into()),
        ("train.epochs", train.epochs.to_string()),
        ("train.batch_size", train.batch_size.to_string()),
        ("train.lr", format!("{:?}", train.lr)),
        ("train.lr_floor", format!("{:?}", train.lr_floor)),
        ("train.grad_clip", format!("{:?}", train.grad_clip)),
        ("train.seed", train.seed.to_string()),
        ("train.data_fraction", format!("{:?}", train.data_fraction)),
        ("train.ablation", train.ablation.to_string()),
        ("train.alpha_init", "random".into()),
        ("train.head_scale", format!("{head_scale:?}")),
        ("eval.checkpoint", String::new()),
        ("eval.split", "test".into()),
        ("verify.instances", suite.instances.to_string()),
        ("verify.seed", suite.seed.to_string()),
        ("verify.evp_draws", suite.evp_draws.to_string()),
        ("verify.evp_n_max", suite.evp_n_max.to_string()),
        ("bench.n_list", list(&bench.n_list)),
        ("bench.k_list", list(&bench.k_list)),
        ("bench.spacing", format!("{:?}", bench.spacing)),
        ("bench.cutoff", format!("{:?}", bench.cutoff)),
        ("bench.max_iter", bench.max_iter.to_string()),
        ("bench.tol", format!("{:?}", bench.tol)),
        ("bench.repetitions", bench.repetitions.to_string()),
        ("bench.features", bench.features.to_string()),
        ("bench.memory_budget", "none".into()),
        ("bench.seed", bench.seed.to_string()),
        ("md.checkpoint", String::new()),
        ("md.molecule", "0".into()),
        ("md.equilibration_steps", "0".into()),
        ("md.steps", "20000".into()),
        ("md.dt", "0.5".into()),
        ("md.temperature", "300.0".into()),
        ("md.seed", "0".into()),
        ("md.frame_stride", "100".into()),
        ("md.force_mode", "autodiff".into()),
        ("search.budget", "20".into()),
        ("search.trial_epochs", "20".into()),
        ("search.seed", "0".into()),
        ("search.ks", list(&space.ks)),
        ("search.betas", flist(&space.betas)),
        ("search.gammas", flist(&space.gammas)),
    ]
}

/// Resolved configuration: defaults, then the config file, then `--set` overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
    order: Vec<&'static str>,
}

impl Default for Config {
    fn default() -> Self {
        let d = defaults();
        Self { order: d.iter().map(|(k, _)| *k).collect(), values: d.into_iter().collect() }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.order.iter().find(|k| **k == key) {
            Some(k) => {
                self.values.insert(k, value.trim().to_string());
                Ok(())
            }
            None => Err(CliError::Validation(format!(
                "unknown key {key:?}; valid keys: {}",
                self.order.join(", ")
            ))),
        }
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Validation(format!("{origin}:{}: expected key = value", i + 1)));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// `key=value` from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// All keys in declaration order, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in &self.order {
            let _ = writeln!(out, "{k} = {}", self.values[k]);
        }
        out
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| CliError::Validation(format!("{key} = {v:?}: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|e| CliError::Validation(format!("{key}: {s:?}: {e}"))))
            .collect()
    }

    fn optional<T: FromStr>(&self, key: &str, sentinel: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key) == sentinel {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn threads(&self) -> Result<usize, CliError> {
        let t: usize = self.get("threads")?;
        if t == 0 {
            return Err(CliError::Validation("threads must be at least 1".into()));
        }
        Ok(t)
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        let spec = SyntheticSpec {
            n_molecules: self.get("data.n_molecules")?,
            atoms_min: self.get("data.atoms_min")?,
            atoms_max: self.get("data.atoms_max")?,
            box_size: self.get("data.box_size")?,
            seed: self.get("data.seed")?,
            charge_scheme: self.get::<ChargeScheme>("data.charge_scheme")?,
            layout: self.get::<Layout>("data.layout")?,
            lj_epsilon: self.get("data.lj_epsilon")?,
            lj_sigma: self.get("data.lj_sigma")?,
            ..SyntheticSpec::default()
        };
        spec.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(spec)
    }

    pub fn split_fractions(&self) -> Result<(f64, f64, u64), CliError> {
        let train: f64 = self.get("data.train_fraction")?;
        let val: f64 = self.get("data.val_fraction")?;
        if !(train > 0.0 && val > 0.0 && train + val <= 1.0) {
            return Err(CliError::Validation(format!(
                "data.train_fraction = {train} and data.val_fraction = {val} must be positive with sum <= 1"
            )));
        }
        Ok((train, val, self.get("data.split_seed")?))
    }

    pub fn host(&self) -> Result<HostConfig, CliError> {
        Ok(HostConfig {
            features: self.get("host.features")?,
            layers: self.get("host.layers")?,
            n_rbf: self.get("host.n_rbf")?,
            cutoff: self.get("host.cutoff")?,
            max_neighbors: self.get("host.max_neighbors")?,
            ..HostConfig::default()
        })
    }

    pub fn phi(&self) -> Result<Option<PhiConfig>, CliError> {
        if !self.get::<bool>("phi.enabled")? {
            return Ok(None);
        }
        let which = match self.raw("phi.which") {
            "smallest" => Which::Smallest,
            "largest" => Which::Largest,
            other => return Err(CliError::Validation(format!("phi.which = {other:?}: expected smallest or largest"))),
        };
        Ok(Some(PhiConfig {
            k: self.get("phi.k")?,
            beta: self.get("phi.beta")?,
            gamma: self.get("phi.gamma")?,
            kernel_size: self.get("phi.kernel_size")?,
            hidden_channels: self.optional("phi.hidden_channels", "auto")?,
            which,
            laplacian_cutoff: self.optional("phi.laplacian_cutoff", "host")?,
        }))
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let alpha_init = match self.raw("train.alpha_init") {
            "random" => AlphaInit::Random { head_scale: self.get("train.head_scale")? },
            "zeros" => AlphaInit::Zeros,
            other => return Err(CliError::Validation(format!("train.alpha_init = {other:?}: expected random or zeros"))),
        };
        let cfg = TrainConfig {
            host: self.host()?,
            phi: self.phi()?,
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            lr_floor: self.get("train.lr_floor")?,
            grad_clip: self.get("train.grad_clip")?,
            seed: self.get("train.seed")?,
            data_fraction: self.get("train.data_fraction")?,
            ablation: self.get::<Ablation>("train.ablation")?,
            alpha_init,
        };
        cfg.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(cfg)
    }

    pub fn suite(&self) -> Result<SuiteConfig, CliError> {
        Ok(SuiteConfig {
            instances: self.get("verify.instances")?,
            seed: self.get("verify.seed")?,
            evp_draws: self.get("verify.evp_draws")?,
            evp_n_max: self.get("verify.evp_n_max")?,
        })
    }

    pub fn sweep(&self) -> Result<SweepConfig, CliError> {
        Ok(SweepConfig {
            n_list: self.list("bench.n_list")?,
            k_list: self.list("bench.k_list")?,
            spacing: self.get("bench.spacing")?,
            cutoff: self.get("bench.cutoff")?,
            max_iter: self.get("bench.max_iter")?,
            tol: self.get("bench.tol")?,
            repetitions: self.get("bench.repetitions")?,
            features: self.get("bench.features")?,
            memory_budget: self.optional("bench.memory_budget", "none")?,
            seed: self.get("bench.seed")?,
        })
    }

    pub fn search_space(&self) -> Result<SearchSpace, CliError> {
        Ok(SearchSpace {
            ks: self.list("search.ks")?,
            betas: self.list("search.betas")?,
            gammas: self.list("search.gammas")?,
        })
    }
}
