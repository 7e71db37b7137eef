//! Versioned binary checkpoints.
//!
//! Layout, little-endian: magic `PHICKPT\0`, `u32` version, `u32` length and
//! UTF-8 text of a `key=value` config echo, `u32` tensor count, then per tensor
//! a `u32` name length and name, `u32` rank, `u64` dims, and `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::eigensolver::Which;
use crate::phi::{AlphaNetParams, PhiConfig};
use crate::potential::{HostConfig, Model, PhiPlugin, PotentialParameters};

const MAGIC: &[u8; 8] = b"PHICKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Names of [`Model::tensors`] in order.
pub fn tensor_names(model: &Model) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for i in 0..model.host.layers.len() {
        for t in ["filter1", "filter2", "input", "update1", "update1_bias", "update2", "update2_bias"] {
            names.push(format!("layer{i}.{t}"));
        }
    }
    names.extend(["readout1", "readout1_bias", "readout2", "readout2_bias"].map(String::from));
    if model.phi.is_some() {
        for t in ["conv1", "conv1_bias", "conv2", "conv2_bias", "head_phi", "head_phi_bias", "head_rho", "head_rho_bias"]
        {
            names.push(format!("alpha.{t}"));
        }
    }
    names
}

fn config_echo(model: &Model) -> String {
    let h = &model.host.config;
    let mut s = format!(
        "host.features={}\nhost.layers={}\nhost.n_rbf={}\nhost.cutoff={:?}\nhost.max_neighbors={}\nhost.z_max={}\n\
         host.energy_scale={:?}\nhost.energy_shift={:?}\n",
        h.features, h.layers, h.n_rbf, h.cutoff, h.max_neighbors, h.z_max, model.host.energy_scale, model.host.energy_shift
    );
    match &model.phi {
        None => s.push_str("phi.enabled=false\n"),
        Some(p) => {
            let c = &p.config;
            s.push_str(&format!(
                "phi.enabled=true\nphi.k={}\nphi.beta={:?}\nphi.gamma={:?}\nphi.kernel_size={}\nphi.hidden_channels={}\n\
                 phi.which={}\nphi.laplacian_cutoff={}\n",
                c.k,
                c.beta,
                c.gamma,
                c.kernel_size,
                c.hidden_channels.map_or("none".to_string(), |v| v.to_string()),
                if c.which == Which::Largest { "largest" } else { "smallest" },
                c.laplacian_cutoff.map_or("none".to_string(), |v| format!("{v:?}")),
            ));
        }
    }
    s
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let echo = config_echo(model);
    w.write_all(&(echo.len() as u32).to_le_bytes())?;
    w.write_all(echo.as_bytes())?;
    let tensors = model.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensor_names(model).iter().zip(tensors) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, max: usize) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > max {
        return Err(CheckpointError::Malformed(format!("string of {len} bytes")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
}

struct Echo(Vec<(String, String)>);

impl Echo {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self
            .0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing {key}")))?;
        raw.parse().map_err(|_| CheckpointError::Malformed(format!("bad value for {key}: {raw}")))
    }
}

fn model_from_echo(echo: &Echo) -> Result<Model, CheckpointError> {
    let host_cfg = HostConfig {
        features: echo.get("host.features")?,
        layers: echo.get("host.layers")?,
        n_rbf: echo.get("host.n_rbf")?,
        cutoff: echo.get("host.cutoff")?,
        max_neighbors: echo.get("host.max_neighbors")?,
        z_max: echo.get("host.z_max")?,
    };
    // Weights are overwritten below; the generator only fixes shapes.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut host = PotentialParameters::init(&mut rng, &host_cfg).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    host.energy_scale = echo.get("host.energy_scale")?;
    host.energy_shift = echo.get("host.energy_shift")?;
    let phi = if echo.get::<bool>("phi.enabled")? {
        let which: String = echo.get("phi.which")?;
        let cutoff: String = echo.get("phi.laplacian_cutoff")?;
        let config = PhiConfig {
            k: echo.get("phi.k")?,
            beta: echo.get("phi.beta")?,
            gamma: echo.get("phi.gamma")?,
            kernel_size: echo.get("phi.kernel_size")?,
            hidden_channels: match echo.get::<String>("phi.hidden_channels")?.as_str() {
                "none" => None,
                v => Some(v.parse().map_err(|_| CheckpointError::Malformed("bad hidden_channels".into()))?),
            },
            which: if which == "largest" { Which::Largest } else { Which::Smallest },
            laplacian_cutoff: if cutoff == "none" {
                None
            } else {
                Some(cutoff.parse().map_err(|_| CheckpointError::Malformed("bad laplacian cutoff".into()))?)
            },
        };
        config.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let params = AlphaNetParams::zeros(host_cfg.features, &config);
        Some(PhiPlugin { config, params })
    } else {
        None
    };
    Ok(Model { host, phi })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let text = read_string(&mut r, 1 << 20)?;
    let echo = Echo(
        text.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect(),
    );
    let mut model = model_from_echo(&echo)?;
    let names = tensor_names(&model);
    let count = read_u32(&mut r)? as usize;
    if count != names.len() {
        return Err(CheckpointError::Malformed(format!("{count} tensors, expected {}", names.len())));
    }
    for (expected, t) in names.iter().zip(model.tensors_mut()) {
        let name = read_string(&mut r, 256)?;
        if &name != expected {
            return Err(CheckpointError::Malformed(format!("tensor {name}, expected {expected}")));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        if shape != t.shape() {
            return Err(CheckpointError::Malformed(format!("{name}: shape {shape:?}, expected {:?}", t.shape())));
        }
        for v in t.data_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    write_checkpoint(model, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
