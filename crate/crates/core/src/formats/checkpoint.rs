//! Model checkpoint container (`HIERCKP`).
//!
//! The header records the taxonomy, the architecture config, per-tensor
//! metadata (name, tag, shape), and optionally the report of the run that
//! produced the weights. The payload is every parameter value as f64
//! little-endian, concatenated in registry order. Values stay f64 so a
//! save/load cycle is bit-exact and resumed runs match unbroken ones.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Denoiser, DenoiserConfig, Param, ParamTag, ParameterRegistry};
use crate::taxonomy::Taxonomy;
use crate::train::TrainReport;

use super::{expect_consumed, f64_payload, read_container, write_container, CHECKPOINT_MAGIC};

/// Shape and tag of one tensor, in payload order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub taxonomy: Taxonomy,
    pub config: DenoiserConfig,
    pub params: Vec<ParamMeta>,
    /// Present when the checkpoint came out of a training run.
    pub train_meta: Option<TrainReport>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Denoiser,
    taxonomy: &Taxonomy,
    train_meta: Option<&TrainReport>,
) -> Result<()> {
    let cfg = model.config();
    if taxonomy.n_sub() != cfg.n_sub || taxonomy.n_super() != cfg.n_super {
        return Err(Error::invalid(format!(
            "taxonomy ({} super / {} sub) does not match model ({} / {})",
            taxonomy.n_super(),
            taxonomy.n_sub(),
            cfg.n_super,
            cfg.n_sub
        )));
    }
    let mut params = Vec::with_capacity(model.registry().len());
    let mut payload = Vec::with_capacity(model.registry().n_scalars() * 8);
    for p in model.registry().iter() {
        params.push(ParamMeta { name: p.name.clone(), tag: p.tag, shape: p.shape.clone() });
        for &v in &p.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        taxonomy: taxonomy.clone(),
        config: *cfg,
        params,
        train_meta: train_meta.cloned(),
    };
    write_container(path, CHECKPOINT_MAGIC, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, Taxonomy, Option<TrainReport>)> {
    let (header, payload): (CheckpointHeader, Vec<u8>) =
        read_container(path, CHECKPOINT_MAGIC)?;
    let cfg = header.config;
    if header.taxonomy.n_sub() != cfg.n_sub || header.taxonomy.n_super() != cfg.n_super {
        return Err(Error::format("checkpoint taxonomy disagrees with its model config"));
    }
    let mut reg = ParameterRegistry::new();
    let mut rest: &[u8] = &payload;
    for meta in &header.params {
        let count: usize = meta.shape.iter().product();
        let (values, tail) = f64_payload(rest, count, &format!("tensor {}", meta.name))?;
        rest = tail;
        reg.add(Param::new(meta.name.clone(), meta.tag, meta.shape.clone(), values)?)?;
    }
    expect_consumed(rest, "checkpoint")?;
    // from_parts re-derives the canonical layout and rejects any registry
    // whose names, shapes, or tags disagree with the config.
    let model = Denoiser::from_parts(cfg, reg)?;
    Ok((model, header.taxonomy, header.train_meta))
}
