// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use super::{ModelError, PolicyModel, PolicyOutput};
use crate::chess::{Move, Position};

#[derive(Clone, Debug, Default)]
struct Entry {
    probs: Vec<(Move, f64)>,
    value: f64,
}

/// A lookup-table policy for test fixtures.
///
/// Positions are keyed by placement, side to move, castling and en passant.
/// Listed moves get their scripted probability and unlisted legal moves share
/// whatever mass is left. Unknown positions are uniform with value 0 unless
/// the policy is strict.
#[derive(Clone, Debug, Default)]
pub struct ScriptedPolicy {
    entries: HashMap<String, Entry>,
    strict: bool,
}

fn key(p: &Position) -> String {
    p.to_fen().split(' ').take(4).collect::<Vec<_>>().join(" ")
}

impl ScriptedPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Unknown positions become an error instead of a uniform policy.
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn set(&mut self, position: &Position, probs: &[(Move, f64)], value: f64) -> &mut Self {
        self.entries.insert(key(position), Entry { probs: probs.to_vec(), value });
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl PolicyModel for ScriptedPolicy {
    fn evaluate(&self, position: &Position) -> Result<PolicyOutput, ModelError> {
        let moves = position.legal_moves();
        let entry = match self.entries.get(&key(position)) {
            Some(e) => e.clone(),
            None if self.strict => return Err(ModelError::Missing(position.to_fen())),
            None => Entry::default(),
        };
        let mut probs = vec![f64::NAN; moves.len()];
        let mut listed = 0.0;
        for &(m, p) in &entry.probs {
            if let Some(i) = moves.iter().position(|&x| x == m) {
                probs[i] = p;
                listed += p;
            }
        }
        let free = probs.iter().filter(|p| p.is_nan()).count();
        let rest = if free > 0 { (1.0 - listed).max(0.0) / free as f64 } else { 0.0 };
        for p in probs.iter_mut().filter(|p| p.is_nan()) {
            *p = rest;
        }
        // Scripted values are kept exact unless they overshoot.
        let total: f64 = probs.iter().sum();
        if listed > 1.0 || (free == 0 && total > 0.0) {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Ok(PolicyOutput { moves, probs, value: entry.value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leftover_mass_is_shared() {
        let start = Position::startpos();
        let mut s = ScriptedPolicy::new();
        s.set(&start, &[("e2e4".parse().unwrap(), 0.81)], 0.3);
        let out = s.evaluate(&start).unwrap();
        assert!((out.prob("e2e4".parse().unwrap()) - 0.81).abs() < 1e-12);
        assert!((out.prob("d2d4".parse().unwrap()) - 0.01).abs() < 1e-12);
        assert_eq!(out.value, 0.3);
        let other = start.apply_move("e2e4".parse().unwrap()).unwrap();
        assert!((s.evaluate(&other).unwrap().probs[0] - 0.05).abs() < 1e-12);
        assert!(s.clone().strict().evaluate(&other).is_err());
    }
}
