//! Binary checkpoint format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MSRN"  u16 version  then repeated records:
//!   u16 name_len | name bytes | u8 rank | rank x u32 dims | f64 values
//! ```
//!
//! A checkpoint carries the model parameters, the optimizer moments and step
//! counter, the episode counter, and a numeric snapshot of the run
//! configuration (the seed split into two u32 halves so it survives the f64
//! encoding exactly). Round trips are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::adam::AdamState;
use crate::config::TrainConfig;
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSRN";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn fail(detail: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(detail.into())
}

fn push_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn scalar_record(out: &mut Vec<u8>, name: &str, value: f64) {
    push_record(out, name, &Tensor::scalar(value));
}

fn config_records(out: &mut Vec<u8>, cfg: &TrainConfig) {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    scalar_record(out, "config.alpha", cfg.alpha);
    scalar_record(out, "config.beta", cfg.beta);
    scalar_record(out, "config.gamma", cfg.gamma);
    scalar_record(out, "config.sigma", cfg.sigma);
    scalar_record(out, "config.beta_shift", cfg.beta_shift);
    push_record(
        out,
        "config.scales",
        &Tensor::new(vec![cfg.scales.len()], cfg.scales.iter().map(|&s| s as f64).collect()),
    );
    scalar_record(out, "config.ways", cfg.ways as f64);
    scalar_record(out, "config.shots", cfg.shots as f64);
    scalar_record(out, "config.queries", cfg.queries as f64);
    scalar_record(out, "config.episodes", cfg.episodes as f64);
    scalar_record(out, "config.eval_episodes", cfg.eval_episodes as f64);
    scalar_record(out, "config.seed.hi", (cfg.seed >> 32) as f64);
    scalar_record(out, "config.seed.lo", (cfg.seed & 0xFFFF_FFFF) as f64);
    scalar_record(out, "config.crossref", flag(cfg.crossref));
    scalar_record(out, "config.lr", cfg.lr);
    scalar_record(out, "config.adam_beta1", cfg.adam_beta1);
    scalar_record(out, "config.adam_beta2", cfg.adam_beta2);
    scalar_record(out, "config.adam_eps", cfg.adam_eps);
    scalar_record(out, "config.ss_enabled", flag(cfg.ss_enabled));
    scalar_record(out, "config.sd_enabled", flag(cfg.sd_enabled));
    scalar_record(out, "config.dd_enabled", flag(cfg.dd_enabled));
    scalar_record(out, "config.checkpoint_interval", cfg.checkpoint_interval as f64);
    scalar_record(out, "config.detach_heads", flag(cfg.detach_heads));
    scalar_record(out, "config.same_scale_per_term", flag(cfg.same_scale_per_term));
    scalar_record(out, "config.eval_full_grid", flag(cfg.eval_full_grid));
}

pub fn save(
    path: &Path,
    model: &Model,
    adam: &AdamState,
    cfg: &TrainConfig,
    episode: usize,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in model.entries() {
        push_record(&mut out, &name, tensor);
    }
    for ((name, _), (m, v)) in model.entries().iter().zip(adam.moments()) {
        push_record(&mut out, &format!("adam.m.{name}"), m);
        push_record(&mut out, &format!("adam.v.{name}"), v);
    }
    scalar_record(&mut out, "adam.t", adam.t() as f64);
    scalar_record(&mut out, "train.episode", episode as f64);
    config_records(&mut out, cfg);

    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn read_records(bytes: &[u8]) -> Result<HashMap<String, Tensor>> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let mut map = HashMap::new();
    let mut pos = 6;
    while pos < bytes.len() {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(fail("truncated record"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| fail("record name is not utf-8"))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(fail(format!("record {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        map.insert(name, Tensor::new(shape, data));
    }
    Ok(map)
}

fn scalar(map: &HashMap<String, Tensor>, name: &str) -> Result<f64> {
    map.get(name)
        .filter(|t| t.len() == 1)
        .map(|t| t.item())
        .ok_or_else(|| fail(format!("missing scalar record {name}")))
}

fn config_from(map: &HashMap<String, Tensor>) -> Result<TrainConfig> {
    let flag = |name: &str| -> Result<bool> { Ok(scalar(map, name)? != 0.0) };
    let int = |name: &str| -> Result<usize> { Ok(scalar(map, name)? as usize) };
    let scales = map
        .get("config.scales")
        .ok_or_else(|| fail("missing config.scales"))?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();
    let seed = ((scalar(map, "config.seed.hi")? as u64) << 32)
        | (scalar(map, "config.seed.lo")? as u64);
    Ok(TrainConfig {
        alpha: scalar(map, "config.alpha")?,
        beta: scalar(map, "config.beta")?,
        gamma: scalar(map, "config.gamma")?,
        sigma: scalar(map, "config.sigma")?,
        beta_shift: scalar(map, "config.beta_shift")?,
        scales,
        ways: int("config.ways")?,
        shots: int("config.shots")?,
        queries: int("config.queries")?,
        episodes: int("config.episodes")?,
        eval_episodes: int("config.eval_episodes")?,
        seed,
        crossref: flag("config.crossref")?,
        lr: scalar(map, "config.lr")?,
        adam_beta1: scalar(map, "config.adam_beta1")?,
        adam_beta2: scalar(map, "config.adam_beta2")?,
        adam_eps: scalar(map, "config.adam_eps")?,
        ss_enabled: flag("config.ss_enabled")?,
        sd_enabled: flag("config.sd_enabled")?,
        dd_enabled: flag("config.dd_enabled")?,
        checkpoint_interval: int("config.checkpoint_interval")?,
        detach_heads: flag("config.detach_heads")?,
        same_scale_per_term: flag("config.same_scale_per_term")?,
        eval_full_grid: flag("config.eval_full_grid")?,
    })
}

pub struct Loaded {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub episode: usize,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path)?;
    let map = read_records(&bytes)?;
    let config = config_from(&map)?;

    let in_channels = map
        .get("encoder.block1.weight")
        .ok_or_else(|| fail("missing encoder.block1.weight"))?
        .shape()[1];
    let mut rng = crate::rng::Rng::new(0);
    let mut model = Model::init(in_channels, config.scale_count(), &mut rng);
    for (name, tensor) in model.entries_mut() {
        let stored = map.get(&name).ok_or_else(|| fail(format!("missing parameter {name}")))?;
        if stored.shape() != tensor.shape() {
            return Err(fail(format!(
                "parameter {name}: stored shape {:?} vs expected {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        *tensor = stored.clone();
    }

    let mut moments = Vec::new();
    for (name, _) in model.entries() {
        let m = map
            .get(&format!("adam.m.{name}"))
            .ok_or_else(|| fail(format!("missing adam.m.{name}")))?;
        let v = map
            .get(&format!("adam.v.{name}"))
            .ok_or_else(|| fail(format!("missing adam.v.{name}")))?;
        moments.push((m.clone(), v.clone()));
    }
    let adam = AdamState::from_parts(config.adam(), scalar(&map, "adam.t")? as u64, moments);
    let episode = scalar(&map, "train.episode")? as usize;
    Ok(Loaded { model, adam, config, episode })
}
