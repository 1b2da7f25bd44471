// SPDX-License-Identifier: MIT OR Apache-2.0

//! A transformer with one hand-wired look-ahead head.
//!
//! The last 21 residual channels are reserved and never written by the random
//! background weights: a file one-hot, a rank one-hot, a zero channel, two
//! constant channels at `+level`/`-level`, a marker channel and a boost
//! channel. The marker piece (a black pawn by default) sets the marker
//! channel in the embedding.
//!
//! Head `(layer, head)` attends from every query square `t` to its partner
//! `t + offset` (wrapping around the board edges) by matching one-hot coordinates,
//! copies the partner's marker channel and writes it into the boost channel.
//! The readout adds a large positive bilinear term to any move whose
//! destination carries the boost, and the value head reads the mean boost.
//! Every query and key dimension reads a channel minus the zero channel so
//! the layer-norm mean cancels out.

use serde::{Deserialize, Serialize};

use super::transformer::{InitScales, Weights};
use super::{ModelConfig, ModelError, Transformer};
use crate::chess::{Color, Piece, PieceKind, Square};

/// Parameters of the planted head and its readout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub layer: usize,
    pub head: usize,
    /// `source = target + offset` as (files, ranks).
    pub offset: (i8, i8),
    /// Piece plane (see [`Piece::plane`]) that carries the marker.
    pub marker_plane: usize,
    pub sharpness: f64,
    pub copy_gain: f64,
    pub readout_gain: f64,
    pub value_gain: f64,
    pub value_bias: f64,
    pub level: f64,
    pub background: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            layer: 1,
            head: 2,
            offset: (2, -1),
            marker_plane: Piece::new(Color::Black, PieceKind::Pawn).plane(),
            sharpness: 40.0,
            copy_gain: 3.0,
            readout_gain: 0.25,
            value_gain: 4.0,
            value_bias: 0.1,
            level: 4.0,
            background: 0.15,
        }
    }
}

impl PlantSpec {
    pub fn at(layer: usize, head: usize) -> Self {
        PlantSpec { layer, head, ..PlantSpec::default() }
    }

    /// Square the head reads when writing to `target`, wrapping at the edges.
    pub fn source_of(&self, target: Square) -> Square {
        shift(target, self.offset.0, self.offset.1)
    }

    /// Square whose boost is driven by a marker on `source`.
    pub fn target_of(&self, source: Square) -> Square {
        shift(source, -self.offset.0, -self.offset.1)
    }

    pub fn marker_piece(&self) -> Piece {
        let color = if self.marker_plane < 6 { Color::White } else { Color::Black };
        Piece::new(color, PieceKind::ALL[self.marker_plane % 6])
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        cfg.validate()?;
        let fail = |why: String| Err(ModelError::Plant(why));
        if self.layer + 1 >= cfg.layers {
            return fail(format!("plant layer {} must be below the last layer of {}", self.layer, cfg.layers));
        }
        if self.head >= cfg.heads {
            return fail(format!("plant head {} out of range", self.head));
        }
        if cfg.head_dim() < 16 {
            return fail(format!("head dim {} is below the 16 the plant needs", cfg.head_dim()));
        }
        if cfg.d_model < ReservedChannels::COUNT + 8 {
            return fail(format!("d_model {} leaves no background channels", cfg.d_model));
        }
        if self.marker_plane >= 12 {
            return fail(format!("marker plane {}", self.marker_plane));
        }
        if self.offset == (0, 0) || self.offset.0.abs() > 7 || self.offset.1.abs() > 7 {
            return fail(format!("offset {:?}", self.offset));
        }
        Ok(())
    }
}

/// Indices of the reserved residual channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReservedChannels {
    pub base: usize,
    pub file: usize,
    pub rank: usize,
    pub zero: usize,
    pub plus: usize,
    pub minus: usize,
    pub marker: usize,
    pub boost: usize,
}

impl ReservedChannels {
    pub const COUNT: usize = 21;

    pub fn new(d_model: usize) -> Self {
        let base = d_model - Self::COUNT;
        ReservedChannels {
            base,
            file: base,
            rank: base + 8,
            zero: base + 16,
            plus: base + 17,
            minus: base + 18,
            marker: base + 19,
            boost: base + 20,
        }
    }
}

/// Weight files store `f32`, so hand-set constants are rounded the same way.
fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

fn wrap(v: i32) -> usize {
    v.rem_euclid(8) as usize
}

fn shift(sq: Square, df: i8, dr: i8) -> Square {
    let f = wrap(sq.file() as i32 + df as i32);
    let r = wrap(sq.rank() as i32 + dr as i32);
    Square::new(f + 8 * r).unwrap()
}

/// Builds the planted model. Background weights are drawn from `seed` at small
/// scale and kept off the reserved channels.
pub fn make_planted_model(cfg: ModelConfig, plant: PlantSpec, seed: u64) -> Result<Transformer, ModelError> {
    plant.validate(&cfg)?;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let bg = plant.background;
    let scales = InitScales {
        embed: bg,
        attn: 1.0 / (d as f64).sqrt(),
        mlp: bg / (d as f64).sqrt(),
        bias: bg * 0.1,
        readout: 1.5 / d as f64,
        value: bg / (d as f64).sqrt(),
    };
    let mut w = Weights::random(cfg, seed, scales)?;
    let rc = ReservedChannels::new(d);
    let reserved = rc.base..d;

    for c in reserved.clone() {
        for f in 0..w.embed.rows() {
            w.embed.set(f, c, 0.0);
        }
        for s in 0..w.pos.rows() {
            w.pos.set(s, c, 0.0);
        }
        for lw in &mut w.layers {
            for r in 0..d {
                lw.wo.set(r, c, 0.0);
            }
            lw.bo[c] = 0.0;
            for r in 0..cfg.d_ff {
                lw.w2.set(r, c, 0.0);
            }
            lw.b2[c] = 0.0;
        }
        for i in 0..d {
            w.bilinear.set(i, c, 0.0);
            w.bilinear.set(c, i, 0.0);
        }
        w.value_w[c] = 0.0;
    }
    // Background head outputs are damped relative to their attention inputs.
    for lw in &mut w.layers {
        lw.wo.map_inplace(|v| (v * bg) as f32 as f64);
    }

    for sq in Square::all() {
        let s = sq.index();
        w.pos.set(s, rc.file + sq.file() as usize, 1.0);
        w.pos.set(s, rc.rank + sq.rank() as usize, 1.0);
        w.pos.set(s, rc.plus, f32r(plant.level));
        w.pos.set(s, rc.minus, -f32r(plant.level));
    }
    w.embed.set(plant.marker_plane, rc.marker, 1.0);

    let lw = &mut w.layers[plant.layer];
    let c0 = plant.head * dh;
    for r in 0..d {
        for c in c0..c0 + dh {
            lw.wq.set(r, c, 0.0);
            lw.wk.set(r, c, 0.0);
            lw.wv.set(r, c, 0.0);
        }
    }
    for r in c0..c0 + dh {
        for c in 0..d {
            lw.wo.set(r, c, 0.0);
        }
    }
    let (df, dr) = (plant.offset.0 as i32, plant.offset.1 as i32);
    let sharp = f32r(plant.sharpness);
    for j in 0..8 {
        // Query dim j fires for queries whose partner has file (rank) j.
        let qf = rc.file + wrap(j as i32 - df);
        let qr = rc.rank + wrap(j as i32 - dr);
        lw.wq.set(qf, c0 + j, sharp);
        lw.wq.set(rc.zero, c0 + j, -sharp);
        lw.wq.set(qr, c0 + 8 + j, sharp);
        lw.wq.set(rc.zero, c0 + 8 + j, -sharp);
        lw.wk.set(rc.file + j, c0 + j, 1.0);
        lw.wk.set(rc.zero, c0 + j, -1.0);
        lw.wk.set(rc.rank + j, c0 + 8 + j, 1.0);
        lw.wk.set(rc.zero, c0 + 8 + j, -1.0);
    }
    lw.wv.set(rc.marker, c0, 1.0);
    lw.wv.set(rc.zero, c0, -1.0);
    lw.wo.set(c0, rc.boost, f32r(plant.copy_gain));

    let beta = f32r(plant.readout_gain);
    w.bilinear.set(rc.plus, rc.boost, beta);
    w.bilinear.set(rc.minus, rc.boost, -beta);
    w.bilinear.set(rc.plus, rc.zero, -beta);
    w.bilinear.set(rc.minus, rc.zero, beta);
    w.value_w[rc.boost] = f32r(plant.value_gain);
    w.value_w[rc.zero] = -f32r(plant.value_gain);
    w.value_b = f32r(plant.value_bias);

    Transformer::with_plant(w, Some(plant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::parse_fen;
    use crate::model::{InterventionSpec, PolicyModel};

    fn log_odds(p: f64) -> f64 {
        let p = p.clamp(1e-9, 1.0 - 1e-9);
        (p / (1.0 - p)).ln()
    }

    fn sq(s: &str) -> Square {
        s.parse().unwrap()
    }

    #[test]
    fn marker_on_f7_boosts_d8() {
        let plant = PlantSpec::default();
        assert_eq!(plant.target_of(sq("f7")), sq("d8"));
        assert_eq!(plant.source_of(sq("b3")), sq("d2"));
        assert_eq!(plant.target_of(sq("a2")), sq("g3"));
        let m = make_planted_model(ModelConfig::default(), plant, 7).unwrap();
        let p = parse_fen("7k/5p2/8/8/8/8/8/K2R4 w - - 0 1").unwrap();
        let best = "d1d8".parse().unwrap();
        let (clean, rec) = m.forward(&p, None).unwrap();
        assert!(clean.prob(best) >= 0.9, "p = {}", clean.prob(best));
        let a = &rec.attention[plant.layer][plant.head];
        assert!(a.get(sq("d8").index(), sq("f7").index()) > 0.99);

        let head = InterventionSpec::default().zero_head(plant.layer, plant.head);
        let ablated = m.forward(&p, Some(&head)).unwrap().0;
        let head_drop = log_odds(clean.prob(best)) - log_odds(ablated.prob(best));
        assert!(head_drop >= 2.0, "head drop {head_drop}");

        let entry = InterventionSpec::default().zero_entry(plant.layer, plant.head, sq("d8"), sq("f7"));
        let ablated = m.forward(&p, Some(&entry)).unwrap().0;
        let entry_drop = log_odds(clean.prob(best)) - log_odds(ablated.prob(best));
        assert!(entry_drop >= 0.9 * head_drop, "entry {entry_drop} head {head_drop}");

        let without = parse_fen("7k/8/8/8/8/8/8/K2R4 w - - 0 1").unwrap();
        let corrupted = m.evaluate(&without).unwrap();
        assert!(corrupted.prob(best) < 0.1);
        let drop = clean.value - corrupted.value;
        assert!(drop > 0.0 && drop < 0.5, "value drop {drop}");
    }

    #[test]
    fn reserved_channels_untouched_by_background() {
        let plant = PlantSpec::default();
        let cfg = ModelConfig::default();
        let m = make_planted_model(cfg, plant, 3).unwrap();
        let rc = ReservedChannels::new(cfg.d_model);
        let p = parse_fen("7k/5p2/8/8/8/8/8/K2R4 w - - 0 1").unwrap();
        let (_, rec) = m.forward(&p, None).unwrap();
        for (i, r) in rec.residual.iter().enumerate() {
            for s in 0..64 {
                assert_eq!(r.get(s, rc.plus), f32r(plant.level));
                assert_eq!(r.get(s, rc.zero), 0.0);
                if i <= plant.layer {
                    assert_eq!(r.get(s, rc.boost), 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_late_plant_and_narrow_heads() {
        let cfg = ModelConfig::default();
        assert!(make_planted_model(cfg, PlantSpec::at(3, 0), 0).is_err());
        assert!(make_planted_model(ModelConfig::new(4, 8, 64, 128), PlantSpec::default(), 0).is_err());
    }
}
