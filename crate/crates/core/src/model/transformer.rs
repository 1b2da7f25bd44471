// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-LN transformer over 64 square tokens with a bilinear move head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{dot, softmax_inplace, Matrix};
use super::{
    ActivationRecord, InterventionSpec, ModelConfig, ModelError, PlantSpec, PolicyModel, PolicyOutput, SEQ_LEN,
};
use crate::chess::{Color, Move, PieceKind, Position, Square};

/// Per-square input features: 12 piece planes, side to move, 4 castling
/// rights (broadcast), en-passant target flag.
pub const FEATURES: usize = 18;
const SIDE_FEATURE: usize = 12;
const CASTLING_FEATURE: usize = 13;
const EP_FEATURE: usize = 17;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    /// `d_model x d_model`; output columns `h*dh..(h+1)*dh` belong to head `h`.
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `d_model x d_model`; input rows `h*dh..(h+1)*dh` belong to head `h`.
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    /// `FEATURES x d_model`.
    pub embed: Matrix,
    /// `64 x d_model`.
    pub pos: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    pub final_bias: Vec<f64>,
    /// Move logit is `h_from · bilinear · h_to`.
    pub bilinear: Matrix,
    /// Indexed like [`PieceKind::PROMOTIONS`].
    pub promo_bias: Vec<f64>,
    pub value_w: Vec<f64>,
    pub value_b: f64,
}

/// Standard deviations used when drawing random weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct InitScales {
    pub embed: f64,
    pub attn: f64,
    pub mlp: f64,
    pub bias: f64,
    pub readout: f64,
    pub value: f64,
}

impl InitScales {
    pub(crate) fn toy(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model as f64;
        InitScales {
            embed: 0.5,
            attn: 1.0 / d.sqrt(),
            mlp: 1.0 / d.sqrt(),
            bias: 0.02,
            readout: 1.5 / d,
            value: 0.5 / d.sqrt(),
        }
    }
}

/// Draws are rounded through `f32` so that saved weights reload bit-exactly.
fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * scale) as f32 as f64
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn randv(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    randn(rng, 1, n, scale).as_slice().to_vec()
}

impl Weights {
    pub(crate) fn random(cfg: ModelConfig, seed: u64, s: InitScales) -> Result<Weights, ModelError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = randn(&mut rng, FEATURES, d, s.embed);
        let pos = randn(&mut rng, SEQ_LEN, d, s.embed);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                wq: randn(&mut rng, d, d, s.attn),
                wk: randn(&mut rng, d, d, s.attn),
                wv: randn(&mut rng, d, d, s.attn),
                wo: randn(&mut rng, d, d, s.attn),
                bo: randv(&mut rng, d, s.bias),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w1: randn(&mut rng, d, cfg.d_ff, s.mlp),
                b1: randv(&mut rng, cfg.d_ff, s.bias),
                w2: randn(&mut rng, cfg.d_ff, d, s.mlp * (d as f64 / cfg.d_ff as f64).sqrt()),
                b2: randv(&mut rng, d, s.bias),
            });
        }
        let bilinear = randn(&mut rng, d, d, s.readout);
        let promo_bias = randv(&mut rng, 4, 0.5);
        let value_w = randv(&mut rng, d, s.value);
        Ok(Weights {
            config: cfg,
            embed,
            pos,
            layers,
            final_gain: vec![1.0; d],
            final_bias: vec![0.0; d],
            bilinear,
            promo_bias,
            value_w,
            value_b: 0.0,
        })
    }

    /// Checks every tensor shape against `config`.
    pub fn validate(&self) -> Result<(), ModelError> {
        let cfg = self.config;
        cfg.validate()?;
        let d = cfg.d_model;
        let bad = |what: &str| Err(ModelError::Config(format!("{what} has the wrong shape for {cfg:?}")));
        if self.embed.shape() != [FEATURES, d] {
            return bad("embed");
        }
        if self.pos.shape() != [SEQ_LEN, d] {
            return bad("pos");
        }
        if self.layers.len() != cfg.layers {
            return bad("layer list");
        }
        for (l, lw) in self.layers.iter().enumerate() {
            let square = [&lw.wq, &lw.wk, &lw.wv, &lw.wo].iter().all(|m| m.shape() == [d, d]);
            let vecs =
                [&lw.ln1_gain, &lw.ln1_bias, &lw.bo, &lw.ln2_gain, &lw.ln2_bias, &lw.b2].iter().all(|v| v.len() == d);
            if !square
                || !vecs
                || lw.w1.shape() != [d, cfg.d_ff]
                || lw.w2.shape() != [cfg.d_ff, d]
                || lw.b1.len() != cfg.d_ff
            {
                return bad(&format!("layer {l}"));
            }
        }
        if self.final_gain.len() != d || self.final_bias.len() != d || self.value_w.len() != d {
            return bad("final vectors");
        }
        if self.bilinear.shape() != [d, d] || self.promo_bias.len() != 4 {
            return bad("readout");
        }
        Ok(())
    }
}

/// Per-square feature matrix (`64 x FEATURES`).
pub fn encode(position: &Position) -> Matrix {
    let mut f = Matrix::zeros(SEQ_LEN, FEATURES);
    let side = if position.side_to_move() == Color::White { 1.0 } else { 0.0 };
    let rights = position.castling().as_array();
    for sq in Square::all() {
        let i = sq.index();
        if let Some(p) = position.piece_at(sq) {
            f.set(i, p.plane(), 1.0);
        }
        f.set(i, SIDE_FEATURE, side);
        for (j, &r) in rights.iter().enumerate() {
            if r {
                f.set(i, CASTLING_FEATURE + j, 1.0);
            }
        }
    }
    if let Some(ep) = position.en_passant() {
        f.set(ep.index(), EP_FEATURE, 1.0);
    }
    f
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for ((o, &v), (&g, &b)) in out.row_mut(r).iter_mut().zip(row).zip(gain.iter().zip(bias)) {
            *o = (v - mean) * inv * g + b;
        }
    }
    out
}

fn add_row_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (o, b) in m.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn promo_index(kind: PieceKind) -> Option<usize> {
    PieceKind::PROMOTIONS.iter().position(|&k| k == kind)
}

/// A transformer policy network. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    weights: Weights,
    plant: Option<PlantSpec>,
}

impl Transformer {
    pub fn new(weights: Weights) -> Result<Self, ModelError> {
        weights.validate()?;
        Ok(Transformer { weights, plant: None })
    }

    pub(crate) fn with_plant(weights: Weights, plant: Option<PlantSpec>) -> Result<Self, ModelError> {
        weights.validate()?;
        Ok(Transformer { weights, plant })
    }

    pub fn config(&self) -> ModelConfig {
        self.weights.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// The planted circuit, if this model was built with one.
    pub fn plant(&self) -> Option<&PlantSpec> {
        self.plant.as_ref()
    }

    /// Residual stream before the first layer.
    pub fn embed(&self, position: &Position) -> Matrix {
        let mut x = encode(position).matmul(&self.weights.embed);
        x.add_assign(&self.weights.pos);
        x
    }

    /// Full forward pass with activation capture.
    pub fn forward(
        &self,
        position: &Position,
        spec: Option<&InterventionSpec>,
    ) -> Result<(PolicyOutput, ActivationRecord), ModelError> {
        if let Some(s) = spec {
            s.validate(&self.weights.config)?;
        }
        let cfg = self.weights.config;
        let mut rec = ActivationRecord {
            residual: Vec::with_capacity(cfg.layers + 1),
            attention: Vec::with_capacity(cfg.layers),
            head_out: Vec::with_capacity(cfg.layers),
        };
        let out = self.run(position, self.embed(position), 0, spec, Some(&mut rec));
        Ok((out, rec))
    }

    /// Resumes a forward pass from residual index `start` (0 is the
    /// embedding) given that residual. Interventions at earlier sites in
    /// `spec` are ignored; residual patches at `start` are applied.
    ///
    /// Runs exactly the operations the full pass runs from that point, so
    /// resuming from a clean record reproduces the clean output bit for bit.
    pub fn forward_from(
        &self,
        position: &Position,
        start: usize,
        residual: &Matrix,
        spec: Option<&InterventionSpec>,
    ) -> Result<PolicyOutput, ModelError> {
        let cfg = self.weights.config;
        if start > cfg.layers {
            return Err(ModelError::OutOfRange(format!("start layer {start} > {}", cfg.layers)));
        }
        if residual.shape() != [SEQ_LEN, cfg.d_model] {
            return Err(ModelError::OutOfRange(format!("residual shape {:?}", residual.shape())));
        }
        if let Some(s) = spec {
            s.validate(&cfg)?;
        }
        Ok(self.run(position, residual.clone(), start, spec, None))
    }

    fn apply_residual_patches(x: &mut Matrix, index: usize, spec: Option<&InterventionSpec>) {
        let Some(spec) = spec else { return };
        for p in spec.residual_patches.iter().filter(|p| p.layer == index) {
            x.row_mut(p.square.index()).copy_from_slice(&p.vector);
        }
    }

    fn run(
        &self,
        position: &Position,
        mut x: Matrix,
        start: usize,
        spec: Option<&InterventionSpec>,
        mut rec: Option<&mut ActivationRecord>,
    ) -> PolicyOutput {
        Self::apply_residual_patches(&mut x, start, spec);
        if let Some(r) = rec.as_deref_mut() {
            r.residual.push(x.clone());
        }
        for l in start..self.weights.config.layers {
            let (attn, heads) = self.layer(l, &mut x, spec, rec.is_some());
            Self::apply_residual_patches(&mut x, l + 1, spec);
            if let Some(r) = rec.as_deref_mut() {
                r.attention.push(attn);
                r.head_out.push(heads);
                r.residual.push(x.clone());
            }
        }
        self.readout(position, &x)
    }

    /// One transformer block, in place. Returns attention patterns and head
    /// outputs when `capture` is set.
    fn layer(
        &self,
        l: usize,
        x: &mut Matrix,
        spec: Option<&InterventionSpec>,
        capture: bool,
    ) -> (Vec<Matrix>, Vec<Matrix>) {
        let cfg = self.weights.config;
        let lw = &self.weights.layers[l];
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let a = layer_norm(x, &lw.ln1_gain, &lw.ln1_bias);
        let q = a.matmul(&lw.wq);
        let k = a.matmul(&lw.wk);
        let v = a.matmul(&lw.wv);

        let mut attn_rec = Vec::new();
        let mut head_rec = Vec::new();
        let mut update = Matrix::zeros(SEQ_LEN, cfg.d_model);
        for h in 0..cfg.heads {
            let c0 = h * dh;
            let c1 = c0 + dh;
            let zeroed = spec.is_some_and(|s| s.head_zero_ablations.contains(&(l, h)));
            let patched = spec.and_then(|s| s.head_patches.iter().find(|p| p.layer == l && p.head == h));

            let mut attn = Matrix::zeros(SEQ_LEN, SEQ_LEN);
            for i in 0..SEQ_LEN {
                let qi = &q.row(i)[c0..c1];
                let row = attn.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = dot(qi, &k.row(j)[c0..c1]) * scale;
                }
                softmax_inplace(row);
            }
            if let Some(s) = spec {
                let mut touched = Vec::new();
                for e in s.attention_entry_zero_ablations.iter().filter(|e| e.layer == l && e.head == h) {
                    attn.set(e.query.index(), e.key.index(), 0.0);
                    touched.push(e.query.index());
                }
                if s.renormalize_entries {
                    touched.sort_unstable();
                    touched.dedup();
                    for i in touched {
                        let row = attn.row_mut(i);
                        let sum: f64 = row.iter().sum();
                        if sum > 0.0 {
                            row.iter_mut().for_each(|w| *w /= sum);
                        }
                    }
                }
            }

            let head_out = if let Some(p) = patched {
                p.slab.clone()
            } else if zeroed {
                Matrix::zeros(SEQ_LEN, cfg.d_model)
            } else {
                let mut ctx = Matrix::zeros(SEQ_LEN, dh);
                for i in 0..SEQ_LEN {
                    let out = ctx.row_mut(i);
                    for (j, &w) in attn.row(i).iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for (o, &vv) in out.iter_mut().zip(&v.row(j)[c0..c1]) {
                            *o += w * vv;
                        }
                    }
                }
                ctx.matmul(&lw.wo.row_block(c0, c1))
            };
            update.add_assign(&head_out);
            if capture {
                attn_rec.push(attn);
                head_rec.push(head_out);
            }
        }
        add_row_bias(&mut update, &lw.bo);
        x.add_assign(&update);

        let a2 = layer_norm(x, &lw.ln2_gain, &lw.ln2_bias);
        let mut hidden = a2.matmul(&lw.w1);
        add_row_bias(&mut hidden, &lw.b1);
        hidden.map_inplace(|v| v.max(0.0));
        let mut mlp = hidden.matmul(&lw.w2);
        add_row_bias(&mut mlp, &lw.b2);
        x.add_assign(&mlp);

        (attn_rec, head_rec)
    }

    fn readout(&self, position: &Position, x: &Matrix) -> PolicyOutput {
        let w = &self.weights;
        let h = layer_norm(x, &w.final_gain, &w.final_bias);
        let hb = h.matmul(&w.bilinear);
        let moves = position.legal_moves();
        let mut probs: Vec<f64> = moves
            .iter()
            .map(|m: &Move| {
                let mut logit = dot(hb.row(m.from.index()), h.row(m.to.index()));
                if let Some(i) = m.promotion.and_then(promo_index) {
                    logit += w.promo_bias[i];
                }
                logit
            })
            .collect();
        softmax_inplace(&mut probs);

        let mut pooled = vec![0.0; w.config.d_model];
        for r in 0..SEQ_LEN {
            for (p, v) in pooled.iter_mut().zip(h.row(r)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= SEQ_LEN as f64);
        let value = (dot(&pooled, &w.value_w) + w.value_b).tanh();
        PolicyOutput { moves, probs, value }
    }
}

impl PolicyModel for Transformer {
    fn evaluate(&self, position: &Position) -> Result<PolicyOutput, ModelError> {
        Ok(self.run(position, self.embed(position), 0, None, None))
    }
}

/// Randomly initialised model; weights are a pure function of `(cfg, seed)`.
pub fn make_toy_model(cfg: ModelConfig, seed: u64) -> Result<Transformer, ModelError> {
    Transformer::new(Weights::random(cfg, seed, InitScales::toy(&cfg))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::parse_fen;

    fn small() -> Transformer {
        make_toy_model(ModelConfig::new(2, 2, 16, 32), 3).unwrap()
    }

    #[test]
    fn start_position_normalizes() {
        let m = make_toy_model(ModelConfig::default(), 1).unwrap();
        let (out, rec) = m.forward(&Position::startpos(), None).unwrap();
        assert_eq!(out.moves.len(), 20);
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(out.value.abs() <= 1.0);
        assert_eq!(rec.residual.len(), 5);
        assert_eq!(rec.attention.len(), 4);
        for layer in &rec.attention {
            for a in layer {
                for i in 0..SEQ_LEN {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn seeds_are_deterministic() {
        let cfg = ModelConfig::default();
        let a = make_toy_model(cfg, 9).unwrap().evaluate(&Position::startpos()).unwrap();
        let b = make_toy_model(cfg, 9).unwrap().evaluate(&Position::startpos()).unwrap();
        let c = make_toy_model(cfg, 10).unwrap().evaluate(&Position::startpos()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.probs, c.probs);
    }

    #[test]
    fn rejects_bad_head_count() {
        assert!(matches!(make_toy_model(ModelConfig::new(2, 3, 16, 32), 0), Err(ModelError::HeadDivisibility { .. })));
    }

    #[test]
    fn empty_spec_is_a_no_op() {
        let m = small();
        let p = Position::startpos();
        let (a, ra) = m.forward(&p, None).unwrap();
        let (b, rb) = m.forward(&p, Some(&InterventionSpec::default())).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(m.evaluate(&p).unwrap(), a);
    }

    #[test]
    fn resuming_matches_full_pass() {
        let m = small();
        let p = parse_fen("r1bqkbnr/pppp1ppp/2n5/4p3/2B1P3/5Q2/PPPP1PPP/RNB1K1NR w KQkq - 4 4").unwrap();
        let (full, rec) = m.forward(&p, None).unwrap();
        for start in 0..=2 {
            assert_eq!(m.forward_from(&p, start, &rec.residual[start], None).unwrap(), full);
        }
    }

    #[test]
    fn entry_ablation_keeps_rows_normalized() {
        let m = small();
        let p = Position::startpos();
        let sq = |s: &str| s.parse::<Square>().unwrap();
        let spec =
            InterventionSpec::default().zero_entry(1, 0, sq("e4"), sq("e2")).zero_entry(1, 0, sq("e4"), sq("d2"));
        let (_, rec) = m.forward(&p, Some(&spec)).unwrap();
        let a = &rec.attention[1][0];
        assert_eq!(a.get(sq("e4").index(), sq("e2").index()), 0.0);
        assert!((a.row(sq("e4").index()).iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let raw = InterventionSpec { renormalize_entries: false, ..spec };
        let (_, rec) = m.forward(&p, Some(&raw)).unwrap();
        assert!(rec.attention[1][0].row(sq("e4").index()).iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn conflicting_patches_are_rejected() {
        let m = small();
        let spec = InterventionSpec::default().zero_head(0, 1).zero_head(0, 1);
        assert!(matches!(m.forward(&Position::startpos(), Some(&spec)), Err(ModelError::Conflict(_))));
        let spec = InterventionSpec::default().zero_head(5, 0);
        assert!(matches!(m.forward(&Position::startpos(), Some(&spec)), Err(ModelError::OutOfRange(_))));
    }
}
