//! Flat parameter storage with per-tensor tags and fine-tuning masks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a parameter tensor. Fine-tuning modes freeze or train whole
/// tensors based on this tag alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Weight,
    Bias,
    NormScale,
    NormShift,
    BlockScale,
    EmbeddingSub,
    EmbeddingSuper,
    EmbeddingNull,
    TimeEmbed,
}

/// One named tensor. `values` is row-major over `shape`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(
        name: impl Into<String>,
        tag: ParamTag,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() || shape.is_empty() {
            return Err(Error::invalid(format!(
                "shape {shape:?} does not describe {} values",
                values.len()
            )));
        }
        Ok(Self { name: name.into(), tag, shape, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of parameters with name lookup. Insertion order is
/// part of the model's identity: gradients, optimizer state, and
/// checkpoints all align by index.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParameterRegistry {
    params: Vec<Param>,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.by_name.clear();
        for (i, p) in self.params.iter().enumerate() {
            if self.by_name.insert(p.name.clone(), i).is_some() {
                return Err(Error::format(format!("duplicate parameter name {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn add(&mut self, param: Param) -> Result<usize> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::invalid(format!("duplicate parameter name {}", param.name)));
        }
        let idx = self.params.len();
        self.by_name.insert(param.name.clone(), idx);
        self.params.push(param);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }
}

/// Which parameter tensors a fine-tuning run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Every parameter trains.
    Full,
    /// Bias tensors only.
    Bitfit,
    /// Biases, normalization affines, residual block gains, and all
    /// embedding rows.
    DifffitLike,
    /// Biases, normalization affines, and the tiered embedder; block gains
    /// and the time MLP stay frozen.
    Finediffusion,
}

impl FinetuneMode {
    pub fn trains(self, tag: ParamTag) -> bool {
        use ParamTag::*;
        match self {
            FinetuneMode::Full => true,
            FinetuneMode::Bitfit => matches!(tag, Bias),
            FinetuneMode::DifffitLike => matches!(
                tag,
                Bias | NormScale | NormShift | BlockScale | EmbeddingSub | EmbeddingSuper
                    | EmbeddingNull
            ),
            FinetuneMode::Finediffusion => matches!(
                tag,
                Bias | NormScale | NormShift | EmbeddingSub | EmbeddingSuper | EmbeddingNull
            ),
        }
    }

    pub const ALL: [FinetuneMode; 4] = [
        FinetuneMode::Full,
        FinetuneMode::Bitfit,
        FinetuneMode::DifffitLike,
        FinetuneMode::Finediffusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::Full => "full",
            FinetuneMode::Bitfit => "bitfit",
            FinetuneMode::DifffitLike => "difffit_like",
            FinetuneMode::Finediffusion => "finediffusion",
        }
    }
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FinetuneMode::Full),
            "bitfit" => Ok(FinetuneMode::Bitfit),
            "difffit_like" => Ok(FinetuneMode::DifffitLike),
            "finediffusion" => Ok(FinetuneMode::Finediffusion),
            other => Err(Error::invalid(format!("unknown fine-tune mode {other:?}"))),
        }
    }
}

/// Per-tensor trainability under `mode`, aligned with registry order.
pub fn trainable_mask(reg: &ParameterRegistry, mode: FinetuneMode) -> Vec<bool> {
    reg.iter().map(|p| mode.trains(p.tag)).collect()
}

/// Scalar counts behind a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainableCount {
    pub trainable: usize,
    pub total: usize,
}

impl TrainableCount {
    pub fn fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

pub fn count_trainable(reg: &ParameterRegistry, mask: &[bool]) -> TrainableCount {
    let mut trainable = 0;
    for (p, &m) in reg.iter().zip(mask) {
        if m {
            trainable += p.len();
        }
    }
    TrainableCount { trainable, total: reg.n_scalars() }
}

/// Per-parameter gradient buffers aligned with a registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub per_param: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(reg: &ParameterRegistry) -> Self {
        Self { per_param: reg.iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    pub fn zero(&mut self) {
        for g in &mut self.per_param {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in &mut self.per_param {
            g.iter_mut().for_each(|v| *v *= f);
        }
    }

    /// `self += other * f`, used for deterministic chunked accumulation.
    pub fn add_scaled(&mut self, other: &Gradients, f: f64) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += f * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.per_param.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
