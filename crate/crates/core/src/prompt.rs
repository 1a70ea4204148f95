//! Trainable prompt components and how they enter a graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{compose, param_count, Codebook, ComposedPrompt, PromptDims, WeightSet};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Where a prompt component enters the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Concatenated before the token embeddings (SCPP).
    Prepended,
    /// Added elementwise to the token embeddings (SCAP).
    Added,
}

impl Role {
    pub fn prefix(self) -> &'static str {
        match self {
            Role::Prepended => "scpp",
            Role::Added => "scap",
        }
    }
}

/// One tensor of a prompt component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Codebook,
    Weights,
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PromptComponent<T> {
    /// Codebook-composed prompt. With `train_weights == false` the
    /// coefficients are held fixed and only the codebook learns.
    Factorized { codebook: Codebook<T>, weights: WeightSet<T>, train_weights: bool },
    /// Free `positions × d` prompt vectors.
    Plain(ComposedPrompt<T>),
}

impl<T: Scalar> PromptComponent<T> {
    pub fn factorized(codebook: Codebook<T>, weights: WeightSet<T>) -> Result<Self> {
        if codebook.k() != weights.k() || codebook.r() != weights.r() {
            return Err(Error::Contract(format!(
                "codebook (K={}, r={}) and weights (K={}, r={}) disagree",
                codebook.k(),
                codebook.r(),
                weights.k(),
                weights.r()
            )));
        }
        Ok(Self::Factorized { codebook, weights, train_weights: true })
    }

    pub fn positions(&self) -> usize {
        match self {
            Self::Factorized { weights, .. } => weights.positions(),
            Self::Plain(p) => p.positions(),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Self::Factorized { codebook, .. } => codebook.d(),
            Self::Plain(p) => p.d(),
        }
    }

    pub fn dims(&self) -> Option<PromptDims> {
        match self {
            Self::Factorized { codebook, weights, .. } => {
                Some(PromptDims { positions: weights.positions(), d: codebook.d(), k: codebook.k(), r: codebook.r() })
            }
            Self::Plain(_) => None,
        }
    }

    /// Trainable values in the codebook (or the whole plain prompt).
    pub fn codebook_params(&self) -> u64 {
        match self {
            Self::Factorized { codebook, .. } => codebook.num_params() as u64,
            Self::Plain(p) => (p.positions() * p.d()) as u64,
        }
    }

    pub fn weight_params(&self) -> u64 {
        match self {
            Self::Factorized { weights, train_weights: true, .. } => weights.num_params() as u64,
            _ => 0,
        }
    }

    /// Trainable parameter count, recomputed from the dimensions.
    pub fn trainable_params(&self) -> u64 {
        match self {
            Self::Factorized { codebook, weights, train_weights } => {
                let full = param_count(
                    codebook.r() as u64,
                    codebook.d() as u64,
                    weights.positions() as u64,
                    codebook.k() as u64,
                );
                if *train_weights {
                    full
                } else {
                    (codebook.r() * codebook.d()) as u64
                }
            }
            Self::Plain(p) => (p.positions() * p.d()) as u64,
        }
    }

    pub fn compose(&self) -> Result<ComposedPrompt<T>> {
        match self {
            Self::Factorized { codebook, weights, .. } => compose(codebook, weights),
            Self::Plain(p) => Ok(p.clone()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PromptComponent<U> {
        match self {
            Self::Factorized { codebook, weights, train_weights } => PromptComponent::Factorized {
                codebook: codebook.cast(),
                weights: weights.cast(),
                train_weights: *train_weights,
            },
            Self::Plain(p) => PromptComponent::Plain(
                ComposedPrompt::new(
                    p.positions(),
                    p.d(),
                    p.values().iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                )
                .expect("same shape"),
            ),
        }
    }

    /// Adds the component's leaves to `g`; returns the composed prompt node
    /// and the trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<(Var, Vec<(Slot, Var)>)> {
        match self {
            Self::Factorized { codebook, weights, train_weights } => {
                let c = g.param(codebook.to_tensor());
                let w = if *train_weights { g.param(weights.to_tensor()) } else { g.constant(weights.to_tensor()) };
                let p = g.compose(c, w)?;
                let mut leaves = vec![(Slot::Codebook, c)];
                if *train_weights {
                    leaves.push((Slot::Weights, w));
                }
                Ok((p, leaves))
            }
            Self::Plain(p) => {
                let v = g.param(p.to_tensor());
                Ok((v, vec![(Slot::Plain, v)]))
            }
        }
    }

    pub fn slot_data(&self, slot: Slot) -> Option<&[T]> {
        match (self, slot) {
            (Self::Factorized { codebook, .. }, Slot::Codebook) => Some(codebook.entries()),
            (Self::Factorized { weights, .. }, Slot::Weights) => Some(weights.entries()),
            (Self::Plain(p), Slot::Plain) => Some(p.values()),
            _ => None,
        }
    }

    /// Replaces the values of one slot; shape is preserved.
    pub fn set_slot(&mut self, slot: Slot, values: Vec<T>) -> Result<()> {
        match (self, slot) {
            (Self::Factorized { codebook, .. }, Slot::Codebook) => {
                *codebook = Codebook::new(codebook.k(), codebook.r(), codebook.t(), values)?;
            }
            (Self::Factorized { weights, .. }, Slot::Weights) => {
                *weights = WeightSet::new(weights.positions(), weights.k(), weights.r(), values)?;
            }
            (Self::Plain(p), Slot::Plain) => {
                *p = ComposedPrompt::new(p.positions(), p.d(), values)?;
            }
            (_, slot) => return Err(Error::Contract(format!("component has no {slot:?} slot"))),
        }
        Ok(())
    }
}

/// The prepended and added components of one adaptation. Either may be absent.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams<T> {
    pub scpp: Option<PromptComponent<T>>,
    pub scap: Option<PromptComponent<T>>,
}

/// Graph nodes for a bound [`PromptParams`].
pub struct BoundPrompts {
    pub prepended: Option<Var>,
    pub added: Option<Var>,
    pub leaves: Vec<(Role, Slot, Var)>,
}

impl<T: Scalar> PromptParams<T> {
    pub fn component(&self, role: Role) -> Option<&PromptComponent<T>> {
        match role {
            Role::Prepended => self.scpp.as_ref(),
            Role::Added => self.scap.as_ref(),
        }
    }

    pub fn component_mut(&mut self, role: Role) -> Option<&mut PromptComponent<T>> {
        match role {
            Role::Prepended => self.scpp.as_mut(),
            Role::Added => self.scap.as_mut(),
        }
    }

    pub fn trainable_params(&self) -> u64 {
        self.scpp.as_ref().map_or(0, |c| c.trainable_params()) + self.scap.as_ref().map_or(0, |c| c.trainable_params())
    }

    pub fn cast<U: Scalar>(&self) -> PromptParams<U> {
        PromptParams {
            scpp: self.scpp.as_ref().map(PromptComponent::cast),
            scap: self.scap.as_ref().map(PromptComponent::cast),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundPrompts> {
        let mut leaves = Vec::new();
        let mut bind_one = |c: &Option<PromptComponent<T>>, role: Role, g: &mut Graph<T>| -> Result<Option<Var>> {
            match c {
                Some(c) => {
                    let (v, ls) = c.bind(g)?;
                    leaves.extend(ls.into_iter().map(|(s, var)| (role, s, var)));
                    Ok(Some(v))
                }
                None => Ok(None),
            }
        };
        let prepended = bind_one(&self.scpp, Role::Prepended, g)?;
        let added = bind_one(&self.scap, Role::Added, g)?;
        Ok(BoundPrompts { prepended, added, leaves })
    }

    /// Checks the components against a backbone of width `d` and sequence length `l`.
    pub fn check_fits(&self, d: usize, l: usize) -> Result<()> {
        for (role, c) in [(Role::Prepended, &self.scpp), (Role::Added, &self.scap)] {
            let Some(c) = c else { continue };
            if c.d() != d {
                return Err(Error::Contract(format!(
                    "{} prompt has width {}, backbone has d={d}",
                    role.prefix(),
                    c.d()
                )));
            }
            if role == Role::Added && c.positions() != l {
                return Err(Error::Contract(format!(
                    "added prompt has {} positions, inputs have length {l}",
                    c.positions()
                )));
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<(Role, Slot, Tensor<T>)> {
        let mut out = Vec::new();
        for role in [Role::Prepended, Role::Added] {
            if let Some(c) = self.component(role) {
                for slot in [Slot::Codebook, Slot::Weights, Slot::Plain] {
                    if let Some(data) = c.slot_data(slot) {
                        out.push((role, slot, Tensor::new(&[data.len()], data.to_vec()).expect("1-d")));
                    }
                }
            }
        }
        out
    }
}
