// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use proptest::prelude::*;

use lookahead_lab_core::chess::{parse_fen, Position, Square};
use lookahead_lab_core::corruption::js_divergence;
use lookahead_lab_core::fixtures::random_playouts;
use lookahead_lab_core::interventions::{log_odds, read_patch_csv};
use lookahead_lab_core::model::weights::{read_weights, write_weights};
use lookahead_lab_core::model::{make_toy_model, InterventionSpec, ModelConfig, PolicyModel, Transformer};
use lookahead_lab_core::report::{aggregate_curves, percentile_band, quantile_sorted, LabeledResult};
use lookahead_lab_core::setlabel::{classify, SetLabel, SetPattern};

fn toy() -> &'static Transformer {
    static MODEL: OnceLock<Transformer> = OnceLock::new();
    MODEL.get_or_init(|| make_toy_model(ModelConfig::new(2, 2, 16, 32), 4).unwrap())
}

fn position(seed: u64, plies: usize) -> Position {
    random_playouts(1, plies, seed).remove(0)
}

fn distribution(raw: Vec<f64>) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fen_round_trips(seed in any::<u64>(), plies in 0usize..120) {
        let p = position(seed, plies);
        let back = parse_fen(&p.to_fen()).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_fen(), p.to_fen());
    }

    #[test]
    fn legal_moves_give_valid_positions(seed in any::<u64>(), plies in 0usize..80) {
        let p = position(seed, plies);
        for m in p.legal_moves() {
            let q = p.apply_move(m).unwrap();
            prop_assert!(q.validate().is_ok());
            prop_assert_eq!(q.side_to_move(), p.side_to_move().opposite());
            prop_assert_eq!(q.piece_at(m.to).map(|x| x.color), Some(p.side_to_move()));
            prop_assert!(q.piece_at(m.from).is_none());
        }
    }

    #[test]
    fn classify_depends_only_on_equality_pattern(items in prop::collection::vec(0usize..6, 1..9), shift in 0usize..64) {
        let a: Vec<Square> = items.iter().map(|&i| Square::new(i).unwrap()).collect();
        let b: Vec<Square> = items.iter().map(|&i| Square::new((i * 7 + shift) % 64).unwrap()).collect();
        prop_assert_eq!(classify(&a).unwrap(), classify(&b).unwrap());
    }

    #[test]
    fn labels_match_themselves(items in prop::collection::vec(0usize..5, 1..8), mate in 0u8..3) {
        let squares: Vec<Square> = items.iter().map(|&i| Square::new(i).unwrap()).collect();
        let mut label = classify(&squares).unwrap();
        if mate > 0 {
            let text = format!("{}{}", if mate == 1 { "M" } else { "N" }, label);
            label = text.parse::<SetLabel>().unwrap();
        }
        prop_assert!(SetPattern::literal(&label).matches(&label));
        prop_assert!(label.to_string().parse::<SetPattern>().unwrap().matches(&label));
    }

    #[test]
    fn log_odds_is_antisymmetric(p in 0.001f64..0.999) {
        prop_assert!((log_odds(p) + log_odds(1.0 - p)).abs() < 1e-9);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(
        raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
    ) {
        let p = distribution(raw.iter().map(|x| x.0 + 1e-3).collect());
        let q = distribution(raw.iter().map(|x| x.1 + 1e-3).collect());
        let d = js_divergence(&p, &q);
        prop_assert_eq!(d, js_divergence(&q, &p));
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&d));
        prop_assert!(js_divergence(&p, &p) <= 1e-12);
    }

    #[test]
    fn median_lies_inside_nested_bands(samples in prop::collection::vec(-50.0f64..50.0, 1..60)) {
        let (lo50, hi50) = percentile_band(&samples, 0.5).unwrap();
        let (lo90, hi90) = percentile_band(&samples, 0.9).unwrap();
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let median = quantile_sorted(&sorted, 0.5);
        prop_assert!(lo90 <= lo50 && lo50 <= median && median <= hi50 && hi50 <= hi90);
    }

    #[test]
    fn curves_ignore_input_order(values in prop::collection::vec(-2.0f64..2.0, 6..40), rotate in 0usize..40) {
        let results: Vec<LabeledResult> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let text = format!("puzzle_id,kind,layer,index,role,reduction\np{},residual,{},3,other,{v}\n", i / 2, i % 2);
                LabeledResult::new(if i % 3 == 0 { "11" } else { "12" }, read_patch_csv(text.as_bytes()).unwrap().remove(0))
            })
            .collect();
        let mut shuffled = results.clone();
        shuffled.rotate_left(rotate % results.len());
        shuffled.reverse();
        prop_assert_eq!(aggregate_curves(&results, 1), aggregate_curves(&shuffled, 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn policy_covers_exactly_the_legal_moves(seed in any::<u64>(), plies in 0usize..100) {
        let p = position(seed, plies);
        let out = toy().evaluate(&p).unwrap();
        prop_assert_eq!(&out.moves, &p.legal_moves());
        if !out.moves.is_empty() {
            prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(out.probs.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn entry_ablation_keeps_attention_rows_normalized(seed in any::<u64>(), q in 0usize..64, keys in prop::collection::btree_set(0usize..64, 1..20)) {
        let p = position(seed, 30);
        let mut spec = InterventionSpec::default();
        for &k in &keys {
            spec = spec.zero_entry(1, 0, Square::new(q).unwrap(), Square::new(k).unwrap());
        }
        let (_, rec) = toy().forward(&p, Some(&spec)).unwrap();
        for r in 0..64 {
            prop_assert!((rec.attention[1][0].row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for &k in &keys {
            prop_assert_eq!(rec.attention[1][0].get(q, k), 0.0);
        }
    }

    #[test]
    fn weight_files_round_trip(seed in any::<u64>(), layers in 1usize..3, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let model = make_toy_model(ModelConfig::new(layers, heads, 8, 12), seed).unwrap();
        let mut first = Vec::new();
        write_weights(&model, &mut first).unwrap();
        let loaded = read_weights(first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_weights(&loaded, &mut second).unwrap();
        prop_assert_eq!(first, second);
        prop_assert_eq!(loaded.weights(), model.weights());
    }
}
