//! Read view over the tiered label-embedding tables.

use crate::error::{Error, Result};
use crate::sampler::Label;

use super::registry::ParameterRegistry;

pub const EMBED_SUB: &str = "embed.sub";
pub const EMBED_SUPER: &str = "embed.super";
pub const EMBED_NULL: &str = "embed.null";

/// Borrowed view of the three embedding tables: one row per subclass, one
/// per superclass, and a single null row for unconditional queries.
#[derive(Debug, Clone, Copy)]
pub struct TieredEmbedder<'a> {
    sub: &'a [f64],
    sup: &'a [f64],
    null: &'a [f64],
    n_sub: usize,
    n_super: usize,
    dim: usize,
}

impl<'a> TieredEmbedder<'a> {
    pub fn from_registry(reg: &'a ParameterRegistry) -> Result<Self> {
        let sub = reg.get(reg.index_of(EMBED_SUB)?);
        let sup = reg.get(reg.index_of(EMBED_SUPER)?);
        let null = reg.get(reg.index_of(EMBED_NULL)?);
        let dim = *sub.shape.last().ok_or_else(|| Error::format("embedding has no shape"))?;
        if sup.shape.last() != Some(&dim) || null.shape.last() != Some(&dim) {
            return Err(Error::format("embedding tables disagree on dimension"));
        }
        if null.shape != vec![1, dim] {
            return Err(Error::format("null embedding must have exactly one row"));
        }
        Ok(Self {
            sub: &sub.values,
            sup: &sup.values,
            null: &null.values,
            n_sub: sub.shape[0],
            n_super: sup.shape[0],
            dim,
        })
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn n_super(&self) -> usize {
        self.n_super
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The embedding row for a label. Null labels map to the shared row.
    pub fn embed_label(&self, label: Label) -> Result<&'a [f64]> {
        match label {
            Label::Subclass(i) => {
                if i >= self.n_sub {
                    return Err(Error::invalid(format!("subclass {i} out of range")));
                }
                Ok(&self.sub[i * self.dim..(i + 1) * self.dim])
            }
            Label::Superclass(i) => {
                if i >= self.n_super {
                    return Err(Error::invalid(format!("superclass {i} out of range")));
                }
                Ok(&self.sup[i * self.dim..(i + 1) * self.dim])
            }
            Label::Null => Ok(self.null),
        }
    }

    pub fn sub_row(&self, i: usize) -> Result<&'a [f64]> {
        self.embed_label(Label::Subclass(i))
    }

    pub fn super_row(&self, i: usize) -> Result<&'a [f64]> {
        self.embed_label(Label::Superclass(i))
    }

    pub fn null_row(&self) -> &'a [f64] {
        self.null
    }
}
