// SPDX-License-Identifier: MIT OR Apache-2.0

use lookahead_lab_core::chess::{Move, Position, Square};
use lookahead_lab_core::fixtures::{plant_fixtures, random_playouts};
use lookahead_lab_core::interventions::log_odds_reduction;
use lookahead_lab_core::model::encode;
use lookahead_lab_core::model::weights::{read_weights, write_weights};
use lookahead_lab_core::model::{
    make_planted_model, make_toy_model, InterventionSpec, ModelConfig, PlantSpec, PolicyModel, Transformer,
};

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &lookahead_lab_core::model::Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matmul(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

fn norm(x: &Rows, g: &[f64], b: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().zip(g.iter().zip(b)).map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b).collect()
        })
        .collect()
}

/// Reference forward with every attention head removed: only the output
/// bias, the MLPs and the readout remain.
fn feed_forward_only(model: &Transformer, p: &Position) -> (Vec<Move>, Vec<f64>, f64) {
    let w = model.weights();
    let mut x = matmul(&to_rows(&encode(p)), &to_rows(&w.embed));
    for (row, pos) in x.iter_mut().zip(to_rows(&w.pos)) {
        row.iter_mut().zip(pos).for_each(|(a, b)| *a += b);
    }
    for lw in &w.layers {
        for row in x.iter_mut() {
            row.iter_mut().zip(&lw.bo).for_each(|(a, b)| *a += b);
        }
        let a = norm(&x, &lw.ln2_gain, &lw.ln2_bias);
        let mut hidden = matmul(&a, &to_rows(&lw.w1));
        for row in hidden.iter_mut() {
            row.iter_mut().zip(&lw.b1).for_each(|(v, b)| *v = (*v + b).max(0.0));
        }
        let out = matmul(&hidden, &to_rows(&lw.w2));
        for (row, o) in x.iter_mut().zip(out) {
            row.iter_mut().zip(o.iter().zip(&lw.b2)).for_each(|(a, (o, b))| *a += o + b);
        }
    }
    let h = norm(&x, &w.final_gain, &w.final_bias);
    let hb = matmul(&h, &to_rows(&w.bilinear));
    let moves = p.legal_moves();
    let logits: Vec<f64> = moves
        .iter()
        .map(|m| {
            let mut l: f64 = hb[m.from.index()].iter().zip(&h[m.to.index()]).map(|(a, b)| a * b).sum();
            if let Some(k) = m.promotion {
                let i = lookahead_lab_core::chess::PieceKind::PROMOTIONS.iter().position(|&x| x == k).unwrap();
                l += w.promo_bias[i];
            }
            l
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let d = h[0].len();
    let pooled: Vec<f64> = (0..d).map(|j| h.iter().map(|r| r[j]).sum::<f64>() / 64.0).collect();
    let value = (pooled.iter().zip(&w.value_w).map(|(a, b)| a * b).sum::<f64>() + w.value_b).tanh();
    (moves, exps.iter().map(|e| e / z).collect(), value)
}

#[test]
fn zeroing_every_head_matches_the_feed_forward_oracle() {
    let cfg = ModelConfig::new(3, 2, 32, 48);
    let model = make_toy_model(cfg, 17).unwrap();
    let mut spec = InterventionSpec::default();
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            spec = spec.zero_head(l, h);
        }
    }
    for p in random_playouts(12, 30, 5) {
        let (out, _) = model.forward(&p, Some(&spec)).unwrap();
        let (moves, probs, value) = feed_forward_only(&model, &p);
        assert_eq!(out.moves, moves);
        for (a, b) in out.probs.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((out.value - value).abs() < 1e-12);
    }
}

#[test]
fn support_is_the_legal_move_set_and_sums_to_one() {
    let model = make_toy_model(ModelConfig::default(), 1).unwrap();
    for p in random_playouts(1000, 60, 9) {
        let out = model.evaluate(&p).unwrap();
        assert_eq!(out.moves, p.legal_moves());
        if !out.moves.is_empty() {
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((-1.0..=1.0).contains(&out.value));
    }
}

#[test]
fn replaying_captured_residuals_reproduces_an_intervention() {
    let model = make_toy_model(ModelConfig::default(), 2).unwrap();
    let p = &random_playouts(1, 20, 4)[0];
    let s1 = InterventionSpec::default().zero_head(1, 3).zero_entry(
        2,
        0,
        Square::new(12).unwrap(),
        Square::new(40).unwrap(),
    );
    let (out1, rec) = model.forward(p, Some(&s1)).unwrap();
    let mut replay = InterventionSpec::default();
    for sq in Square::all() {
        replay = replay.patch_residual(3, sq, rec.residual[3].row(sq.index()).to_vec());
    }
    let (out2, _) = model.forward(p, Some(&replay)).unwrap();
    for (a, b) in out1.probs.iter().zip(&out2.probs) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn attention_rows_stay_normalized_under_entry_ablation() {
    let model = make_toy_model(ModelConfig::default(), 3).unwrap();
    let p = Position::startpos();
    let mut spec = InterventionSpec::default();
    for k in 0..10 {
        spec = spec.zero_entry(1, 2, Square::new(5).unwrap(), Square::new(k * 6).unwrap());
    }
    let (_, rec) = model.forward(&p, Some(&spec)).unwrap();
    for layer in &rec.attention {
        for head in layer {
            for r in 0..64 {
                assert!((head.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
    assert_eq!(rec.attention[1][2].get(5, 0), 0.0);
}

#[test]
fn reloaded_planted_model_keeps_its_guarantees() {
    let plant = PlantSpec::default();
    let model = make_planted_model(ModelConfig::default(), plant, 7).unwrap();
    let mut bytes = Vec::new();
    write_weights(&model, &mut bytes).unwrap();
    let loaded = read_weights(bytes.as_slice()).unwrap();
    for f in plant_fixtures(&plant, 5, 8) {
        let m = f.puzzle.pv[0];
        let clean = loaded.evaluate(&f.puzzle.start).unwrap();
        assert!(clean.prob(m) >= 0.9);
        let spec = InterventionSpec::default().zero_head(plant.layer, plant.head);
        let (ablated, _) = loaded.forward(&f.puzzle.start, Some(&spec)).unwrap();
        assert!(log_odds_reduction(&clean, &ablated, m) >= 2.0);
        assert_eq!(clean, model.evaluate(&f.puzzle.start).unwrap());
    }
}
