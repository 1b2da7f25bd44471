// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes that locate a future move square in the residual stream.
//!
//! A probe scores square `s` as `w · h_s + b_s` over one residual snapshot
//! and takes a softmax across the 64 squares. Training is full-batch
//! gradient descent on mean cross-entropy plus `l2/2 · |w|²`, halving the
//! step whenever a step would raise the loss.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::Square;
use crate::model::weights::TensorFile;
use crate::model::{make_toy_model, Matrix, ModelConfig, ModelError, Transformer, SEQ_LEN};
use crate::puzzle::Puzzle;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has a single target square; need at least two")]
    Degenerate,
    #[error("layer {layer} out of range for a {layers}-layer model")]
    Layer { layer: usize, layers: usize },
    #[error("snapshot width {found} does not match probe width {expected}")]
    Width { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    pub puzzle_id: String,
    /// `64 x d_model` residual at the dataset's layer.
    pub snapshot: Matrix,
    pub target: Square,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub layer: usize,
    pub ordinal: usize,
    pub samples: Vec<ProbeSample>,
    /// Puzzles dropped because their PV is shorter than `ordinal`.
    pub excluded: usize,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn with_samples(&self, samples: Vec<ProbeSample>) -> Self {
        ProbeDataset { layer: self.layer, ordinal: self.ordinal, samples, excluded: 0 }
    }

    /// Splits by puzzle id: a seeded shuffle of the distinct ids, the first
    /// `train_fraction` of them go to training.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (ProbeDataset, ProbeDataset) {
        let ids: BTreeSet<&str> = self.samples.iter().map(|s| s.puzzle_id.as_str()).collect();
        let mut ids: Vec<&str> = ids.into_iter().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((ids.len() as f64) * train_fraction).round() as usize;
        let train_ids: BTreeSet<&str> = ids[..n_train].iter().copied().collect();
        let (train, test): (Vec<_>, Vec<_>) =
            self.samples.iter().cloned().partition(|s| train_ids.contains(s.puzzle_id.as_str()));
        (self.with_samples(train), self.with_samples(test))
    }
}

/// One sample per puzzle: the residual at `layer` of an unintervened run on
/// the start position, labelled with the destination of PV move `ordinal`.
pub fn collect(
    model: &Transformer,
    puzzles: &[Puzzle],
    layer: usize,
    ordinal: usize,
) -> Result<ProbeDataset, ProbeError> {
    let layers = model.config().layers;
    if layer > layers {
        return Err(ProbeError::Layer { layer, layers });
    }
    let usable: Vec<&Puzzle> = puzzles.iter().filter(|p| ordinal >= 1 && p.pv.len() >= ordinal).collect();
    let samples = usable
        .par_iter()
        .map(|p| {
            let (_, rec) = model.forward(&p.start, None)?;
            Ok(ProbeSample {
                puzzle_id: p.id.clone(),
                snapshot: rec.residual[layer].clone(),
                target: p.pv[ordinal - 1].to,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(ProbeDataset { layer, ordinal, samples, excluded: puzzles.len() - usable.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyperparams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeHyperparams {
    fn default() -> Self {
        ProbeHyperparams { epochs: 300, learning_rate: 0.5, l2: 1e-4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub layer: usize,
    pub ordinal: usize,
    /// Loss before training and after every epoch.
    pub loss_history: Vec<f64>,
}

impl Probe {
    pub fn scores(&self, snapshot: &Matrix) -> Vec<f64> {
        (0..SEQ_LEN).map(|s| snapshot.row(s).iter().zip(&self.w).map(|(h, w)| h * w).sum::<f64>() + self.b[s]).collect()
    }

    pub fn predict(&self, snapshot: &Matrix) -> Square {
        let scores = self.scores(snapshot);
        let mut best = 0;
        for (i, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = i;
            }
        }
        Square::new(best).unwrap()
    }

    pub fn to_file(&self) -> TensorFile {
        let config = serde_json::json!({ "layer": self.layer, "ordinal": self.ordinal, "d_model": self.w.len() });
        let mut f = TensorFile::new("probe", config, serde_json::json!({}));
        f.push("w", vec![self.w.len()], &self.w);
        f.push("b", vec![SEQ_LEN], &self.b);
        f
    }

    pub fn from_file(f: &TensorFile) -> Result<Self, ModelError> {
        if f.kind != "probe" {
            return Err(ModelError::Format(format!("expected a probe file, found {}", f.kind)));
        }
        let field = |k: &str| {
            f.config
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| ModelError::Format(format!("probe config lacks {k}")))
        };
        let d = field("d_model")? as usize;
        Ok(Probe {
            w: f.get("w", &[d])?,
            b: f.get("b", &[SEQ_LEN])?,
            layer: field("layer")? as usize,
            ordinal: field("ordinal")? as usize,
            loss_history: Vec::new(),
        })
    }
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

/// Mean cross-entropy plus the L2 term, with gradients for `w` and `b`.
pub fn loss_and_grad(probe: &Probe, data: &ProbeDataset, l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let d = probe.w.len();
    let n = data.samples.len().max(1) as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; d];
    let mut gb = vec![0.0; SEQ_LEN];
    for s in &data.samples {
        let lp = log_softmax(&probe.scores(&s.snapshot));
        loss -= lp[s.target.index()];
        for (sq, l) in lp.iter().enumerate() {
            let g = l.exp() - if sq == s.target.index() { 1.0 } else { 0.0 };
            gb[sq] += g / n;
            for (gwi, h) in gw.iter_mut().zip(s.snapshot.row(sq)) {
                *gwi += g * h / n;
            }
        }
    }
    loss /= n;
    loss += 0.5 * l2 * probe.w.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in gw.iter_mut().zip(&probe.w) {
        *g += l2 * w;
    }
    (loss, gw, gb)
}

pub fn train(data: &ProbeDataset, hp: &ProbeHyperparams) -> Result<Probe, ProbeError> {
    let first = data.samples.first().ok_or(ProbeError::Empty)?;
    let targets: BTreeSet<Square> = data.samples.iter().map(|s| s.target).collect();
    if targets.len() < 2 {
        return Err(ProbeError::Degenerate);
    }
    let d = first.snapshot.cols();
    if let Some(bad) = data.samples.iter().find(|s| s.snapshot.cols() != d) {
        return Err(ProbeError::Width { expected: d, found: bad.snapshot.cols() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let w = (0..d).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut probe =
        Probe { w, b: vec![0.0; SEQ_LEN], layer: data.layer, ordinal: data.ordinal, loss_history: Vec::new() };
    let (mut loss, mut gw, mut gb) = loss_and_grad(&probe, data, hp.l2);
    probe.loss_history.push(loss);
    let mut lr = hp.learning_rate;
    for _ in 0..hp.epochs {
        loop {
            let mut next = probe.clone();
            next.w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
            next.b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
            let (l, ngw, ngb) = loss_and_grad(&next, data, hp.l2);
            if l <= loss || lr < 1e-12 {
                if l <= loss {
                    probe = next;
                    loss = l;
                    gw = ngw;
                    gb = ngb;
                }
                break;
            }
            lr *= 0.5;
        }
        probe.loss_history.push(loss);
    }
    Ok(probe)
}

/// Top-1 accuracy over the 64 squares.
pub fn evaluate(probe: &Probe, data: &ProbeDataset) -> Result<f64, ProbeError> {
    if data.samples.is_empty() {
        return Err(ProbeError::Empty);
    }
    let hits = data.samples.par_iter().filter(|s| probe.predict(&s.snapshot) == s.target).count();
    Ok(hits as f64 / data.samples.len() as f64)
}

/// Train on 80% of the puzzles and report accuracy on the rest.
pub fn train_and_evaluate(data: &ProbeDataset, hp: &ProbeHyperparams) -> Result<(Probe, f64), ProbeError> {
    let (tr, te) = data.split(0.8, hp.seed);
    let probe = train(&tr, hp)?;
    let acc = evaluate(&probe, &te)?;
    Ok((probe, acc))
}

/// Held-out accuracy of a probe trained on a freshly seeded random model.
pub fn random_baseline(
    cfg: ModelConfig,
    puzzles: &[Puzzle],
    layer: usize,
    ordinal: usize,
    seed: u64,
    hp: &ProbeHyperparams,
) -> Result<f64, ProbeError> {
    let model = make_toy_model(cfg, seed)?;
    let data = collect(&model, puzzles, layer, ordinal)?;
    Ok(train_and_evaluate(&data, hp)?.1)
}

/// One row of `probe.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub ordinal: usize,
    pub accuracy: f64,
    pub baseline: f64,
}

pub fn write_probe_csv(rows: &[ProbeRow], w: impl Write) -> Result<(), ProbeError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_probe_csv(r: impl Read) -> Result<Vec<ProbeRow>, ProbeError> {
    Ok(csv::Reader::from_reader(r).deserialize().collect::<Result<_, _>>()?)
}
