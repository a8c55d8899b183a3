use indexmap::IndexMap;

use crate::error::{PplError, Result};
use crate::random::RandomStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    Real,
    Positive,
}

impl Constraint {
    pub fn as_str(self) -> &'static str {
        match self {
            Constraint::Real => "real",
            Constraint::Positive => "positive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Constraint::Real),
            "positive" => Some(Constraint::Positive),
            _ => None,
        }
    }
}

/// Initial value for a param. Only consulted when the name is first created.
pub enum ParamInit {
    Value(Tensor),
    Lazy(Box<dyn FnOnce(&mut RandomStream) -> Tensor>),
}

impl ParamInit {
    pub fn lazy(f: impl FnOnce(&mut RandomStream) -> Tensor + 'static) -> Self {
        ParamInit::Lazy(Box::new(f))
    }

    fn resolve(self, rng: &mut RandomStream) -> Tensor {
        match self {
            ParamInit::Value(t) => t,
            ParamInit::Lazy(f) => f(rng),
        }
    }
}

impl From<Tensor> for ParamInit {
    fn from(t: Tensor) -> Self {
        ParamInit::Value(t)
    }
}

impl From<&Tensor> for ParamInit {
    fn from(t: &Tensor) -> Self {
        ParamInit::Value(t.clone())
    }
}

impl From<f64> for ParamInit {
    fn from(v: f64) -> Self {
        ParamInit::Value(Tensor::scalar(v))
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    unconstrained: Tensor,
    constraint: Constraint,
}

impl ParamEntry {
    /// Gradient-tracking leaf holding the unconstrained value.
    pub fn unconstrained(&self) -> &Tensor {
        &self.unconstrained
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    /// Constrained view, connected to the graph through the leaf.
    pub fn constrained(&self) -> Tensor {
        match self.constraint {
            Constraint::Real => self.unconstrained.clone(),
            Constraint::Positive => self.unconstrained.exp(),
        }
    }
}

/// Named learnable parameters, stored unconstrained.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Detached constrained values of a param.
    pub fn value(&self, name: &str) -> Option<Vec<f64>> {
        self.entries.get(name).map(|e| e.constrained().to_vec())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Returns the constrained tensor for `name`, creating the entry from
    /// `init` on first use. Later calls ignore `init`.
    pub fn get_or_create(
        &mut self,
        name: &str,
        init: ParamInit,
        constraint: Constraint,
        rng: &mut RandomStream,
    ) -> Result<Tensor> {
        if let Some(entry) = self.entries.get(name) {
            if entry.constraint != constraint {
                return Err(PplError::ConstraintMismatch {
                    name: name.to_string(),
                    existing: entry.constraint,
                    requested: constraint,
                });
            }
            return Ok(entry.constrained());
        }
        let init = init.resolve(rng);
        let unconstrained = match constraint {
            Constraint::Real => init.requires_grad_leaf(),
            Constraint::Positive => {
                if let Some(&value) = init.data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(PplError::NonPositiveInit {
                        name: name.to_string(),
                        value,
                    });
                }
                init.detach().log()?.requires_grad_leaf()
            }
        };
        let entry = ParamEntry {
            unconstrained,
            constraint,
        };
        let value = entry.constrained();
        self.entries.insert(name.to_string(), entry);
        Ok(value)
    }

    /// Inserts or replaces an entry from raw unconstrained values.
    pub fn insert_unconstrained(&mut self, name: &str, unconstrained: Tensor, constraint: Constraint) {
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                unconstrained: unconstrained.requires_grad_leaf(),
                constraint,
            },
        );
    }

    /// Copy with fresh leaves, so updating one store leaves the other intact.
    /// `clone` shares the underlying tensors.
    pub fn deep_copy(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, e)| {
                let fresh = Tensor::new(e.unconstrained.to_vec(), e.unconstrained.shape())
                    .expect("same shape")
                    .requires_grad_leaf();
                (
                    k.clone(),
                    ParamEntry {
                        unconstrained: fresh,
                        constraint: e.constraint,
                    },
                )
            })
            .collect();
        Self { entries }
    }

    pub fn zero_grad(&self) {
        for e in self.entries.values() {
            e.unconstrained.zero_grad();
        }
    }
}
