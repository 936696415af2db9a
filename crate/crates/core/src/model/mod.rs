//! The learned denoiser and its parameter bookkeeping.
//!
//! Parameters live in a flat [`ParameterRegistry`] where every tensor
//! carries a [`ParamTag`]; fine-tuning modes are masks over those tags.
//! The label embedder is a tiered table (subclass, superclass, null rows)
//! stored as three registry entries, and the network is a residual MLP
//! whose blocks are modulated by the label-plus-time conditioning vector.

mod denoiser;
mod embedder;
mod registry;

pub use denoiser::{Denoiser, DenoiserConfig, load_pretrained_then_extend};
pub use embedder::TieredEmbedder;
pub use registry::{
    count_trainable, trainable_mask, FinetuneMode, Gradients, Param, ParamTag,
    ParameterRegistry, TrainableCount,
};
