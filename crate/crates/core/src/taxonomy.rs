//! Superclass/subclass label hierarchies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A two-level label hierarchy with contiguous integer ids.
///
/// Subclass ids live in `[0, n_sub)`, superclass ids in `[0, n_super)`, and
/// `parent[i]` is the superclass of subclass `i`. Every superclass has at
/// least one subclass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    n_super: usize,
    parent: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl Taxonomy {
    /// Validate an explicit parent table.
    pub fn new(n_super: usize, parent: Vec<usize>) -> Result<Self> {
        if n_super == 0 {
            return Err(Error::invalid("taxonomy needs at least one superclass"));
        }
        if parent.is_empty() {
            return Err(Error::invalid("taxonomy needs at least one subclass"));
        }
        let mut seen = vec![false; n_super];
        for (sub, &sup) in parent.iter().enumerate() {
            if sup >= n_super {
                return Err(Error::invalid(format!(
                    "subclass {sub} has parent {sup}, but n_super = {n_super}"
                )));
            }
            seen[sup] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("superclass {empty} has no subclasses")));
        }
        Ok(Self { n_super, parent, names: None })
    }

    /// The uniform layout: `subs_per_super` subclasses per superclass, with
    /// `parent(i) = i / subs_per_super`.
    pub fn uniform(n_super: usize, subs_per_super: usize) -> Result<Self> {
        if n_super == 0 || subs_per_super == 0 {
            return Err(Error::invalid("superclass and subclass counts must be nonzero"));
        }
        let parent = (0..n_super * subs_per_super).map(|i| i / subs_per_super).collect();
        Self::new(n_super, parent)
    }

    /// A coarse copy of this taxonomy in which each superclass becomes its
    /// own (single-subclass) class. Used as the pretraining hierarchy.
    pub fn coarse(&self) -> Taxonomy {
        Taxonomy {
            n_super: self.n_super,
            parent: (0..self.n_super).collect(),
            names: None,
        }
    }

    pub fn n_super(&self) -> usize {
        self.n_super
    }

    pub fn n_sub(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, subclass: usize) -> Result<usize> {
        self.parent
            .get(subclass)
            .copied()
            .ok_or_else(|| Error::invalid(format!("subclass {subclass} out of range")))
    }

    /// Subclass ids belonging to `superclass`, in increasing order.
    pub fn children(&self, superclass: usize) -> Result<Vec<usize>> {
        if superclass >= self.n_super {
            return Err(Error::invalid(format!("superclass {superclass} out of range")));
        }
        Ok(self
            .parent
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == superclass)
            .map(|(i, _)| i)
            .collect())
    }

    pub fn set_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.n_sub() {
            return Err(Error::invalid("one name per subclass required"));
        }
        self.names = Some(names);
        Ok(())
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }
}
