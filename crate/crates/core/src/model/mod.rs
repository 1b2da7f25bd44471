// SPDX-License-Identifier: MIT OR Apache-2.0

//! Square-token policy networks.
//!
//! Every model maps a [`Position`] to a probability distribution over its
//! legal moves plus a scalar value. The [`Transformer`] treats each of the 64
//! squares as one token, records per-layer residual activations, attention
//! patterns and per-head outputs, and accepts an [`InterventionSpec`] that
//! patches or ablates those sites during the forward pass.

mod planted;
mod scripted;
mod tensor;
mod transformer;
pub mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::{Move, Position, Square};

pub use planted::{make_planted_model, PlantSpec, ReservedChannels};
pub use scripted::ScriptedPolicy;
pub use tensor::Matrix;
pub use transformer::{encode, make_toy_model, LayerWeights, Transformer, Weights, FEATURES};

/// Number of tokens: one per square.
pub const SEQ_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("d_model {d_model} is not divisible by heads {heads}")]
    HeadDivisibility { d_model: usize, heads: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("intervention index out of range: {0}")]
    OutOfRange(String),
    #[error("conflicting interventions at {0}")]
    Conflict(String),
    #[error("plant rejected: {0}")]
    Plant(String),
    #[error("no policy entry for {0}")]
    Missing(String),
    #[error("weight file: {0}")]
    Format(String),
    #[error("weight file shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("weight file truncated: expected {expected} bytes of tensor data, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    pub fn new(layers: usize, heads: usize, d_model: usize, d_ff: usize) -> Self {
        ModelConfig { layers, heads, d_model, d_ff }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(ModelError::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::HeadDivisibility { d_model: self.d_model, heads: self.heads });
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { layers: 4, heads: 4, d_model: 64, d_ff: 128 }
    }
}

/// A distribution over the legal moves of one position plus a value in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub moves: Vec<Move>,
    pub probs: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    /// Probability of `m`, zero if it is not in the support.
    pub fn prob(&self, m: Move) -> f64 {
        self.moves.iter().position(|&x| x == m).map_or(0.0, |i| self.probs[i])
    }

    pub fn best(&self) -> Option<(Move, f64)> {
        self.moves.iter().zip(&self.probs).fold(None, |acc: Option<(Move, f64)>, (&m, &p)| match acc {
            Some((_, bp)) if bp >= p => acc,
            _ => Some((m, p)),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (Move, f64)> + '_ {
        self.moves.iter().copied().zip(self.probs.iter().copied())
    }
}

/// Anything that scores positions. Implementations must be deterministic.
pub trait PolicyModel: Sync {
    fn evaluate(&self, position: &Position) -> Result<PolicyOutput, ModelError>;
}

/// Activations captured during one forward pass.
///
/// `residual[0]` is the embedding and `residual[l + 1]` the stream after
/// layer `l`. `attention[l][h]` rows are queries, columns keys.
/// `head_out[l][h]` is the head's contribution to the residual stream after
/// its slice of the output projection and before the heads are summed.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    pub residual: Vec<Matrix>,
    pub attention: Vec<Vec<Matrix>>,
    pub head_out: Vec<Vec<Matrix>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPatch {
    /// Residual index: 0 is the embedding, `l + 1` the output of layer `l`.
    pub layer: usize,
    pub square: Square,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadPatch {
    pub layer: usize,
    pub head: usize,
    pub slab: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EntryAblation {
    pub layer: usize,
    pub head: usize,
    pub query: Square,
    pub key: Square,
}

/// Interventions applied during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionSpec {
    pub residual_patches: Vec<ResidualPatch>,
    pub head_patches: Vec<HeadPatch>,
    pub head_zero_ablations: Vec<(usize, usize)>,
    pub attention_entry_zero_ablations: Vec<EntryAblation>,
    /// Renormalize an attention row after zeroing entries in it.
    pub renormalize_entries: bool,
}

impl Default for InterventionSpec {
    fn default() -> Self {
        InterventionSpec {
            residual_patches: Vec::new(),
            head_patches: Vec::new(),
            head_zero_ablations: Vec::new(),
            attention_entry_zero_ablations: Vec::new(),
            renormalize_entries: true,
        }
    }
}

impl InterventionSpec {
    pub fn is_empty(&self) -> bool {
        self.residual_patches.is_empty()
            && self.head_patches.is_empty()
            && self.head_zero_ablations.is_empty()
            && self.attention_entry_zero_ablations.is_empty()
    }

    pub fn patch_residual(mut self, layer: usize, square: Square, vector: Vec<f64>) -> Self {
        self.residual_patches.push(ResidualPatch { layer, square, vector });
        self
    }

    pub fn patch_head(mut self, layer: usize, head: usize, slab: Matrix) -> Self {
        self.head_patches.push(HeadPatch { layer, head, slab });
        self
    }

    pub fn zero_head(mut self, layer: usize, head: usize) -> Self {
        self.head_zero_ablations.push((layer, head));
        self
    }

    pub fn zero_entry(mut self, layer: usize, head: usize, query: Square, key: Square) -> Self {
        self.attention_entry_zero_ablations.push(EntryAblation { layer, head, query, key });
        self
    }

    /// Checks indices against `cfg` and rejects two interventions on one site.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        use std::collections::HashSet;

        let mut residual_sites = HashSet::new();
        for p in &self.residual_patches {
            if p.layer > cfg.layers || p.vector.len() != cfg.d_model {
                return Err(ModelError::OutOfRange(format!(
                    "residual patch at layer {} with {} values",
                    p.layer,
                    p.vector.len()
                )));
            }
            if !residual_sites.insert((p.layer, p.square)) {
                return Err(ModelError::Conflict(format!("residual layer {} square {}", p.layer, p.square)));
            }
        }
        let mut head_sites = HashSet::new();
        let head_ok = |l: usize, h: usize| l < cfg.layers && h < cfg.heads;
        for p in &self.head_patches {
            if !head_ok(p.layer, p.head) || p.slab.shape() != [SEQ_LEN, cfg.d_model] {
                return Err(ModelError::OutOfRange(format!("head patch L{}H{}", p.layer, p.head)));
            }
            if !head_sites.insert((p.layer, p.head)) {
                return Err(ModelError::Conflict(format!("head L{}H{}", p.layer, p.head)));
            }
        }
        for &(l, h) in &self.head_zero_ablations {
            if !head_ok(l, h) {
                return Err(ModelError::OutOfRange(format!("head ablation L{l}H{h}")));
            }
            if !head_sites.insert((l, h)) {
                return Err(ModelError::Conflict(format!("head L{l}H{h}")));
            }
        }
        let mut entries = HashSet::new();
        for e in &self.attention_entry_zero_ablations {
            if !head_ok(e.layer, e.head) {
                return Err(ModelError::OutOfRange(format!("entry ablation L{}H{}", e.layer, e.head)));
            }
            if !entries.insert(*e) {
                return Err(ModelError::Conflict(format!(
                    "attention entry L{}H{} {}<-{}",
                    e.layer, e.head, e.query, e.key
                )));
            }
        }
        Ok(())
    }
}
