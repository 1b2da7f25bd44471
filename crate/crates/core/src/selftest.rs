// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end battery on a planted model: build it, generate fixtures, run
//! every sweep and probe, and check that the planted head is recovered.
//!
//! All outputs are returned as in-memory files so that callers decide where
//! they go; nothing here depends on the worker count.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::chess::Square;
use crate::fixtures::{plant_fixtures, PlantFixture};
use crate::interventions::{
    ablate_entries, log_odds_reduction, sweep_heads, sweep_residual, write_patch_csv, InterventionError, PatchResult,
};
use crate::model::{make_planted_model, InterventionSpec, ModelConfig, ModelError, PlantSpec, Transformer};
use crate::probing::{self, ProbeError, ProbeHyperparams, ProbeRow};
use crate::report::{self, LabeledResult, ReportError};
use crate::setlabel::classify;

#[derive(Debug, Error)]
pub enum SelftestError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("fixture generation produced {found} of {wanted} puzzles")]
    Fixtures { wanted: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelftestConfig {
    pub model: ModelConfig,
    pub plant: PlantSpec,
    pub model_seed: u64,
    pub fixture_seed: u64,
    pub fixtures: usize,
    pub probe_fixtures: usize,
    pub probe_seed: u64,
    pub baseline_seed: u64,
    pub min_reduction: f64,
    pub min_entry_share: f64,
    pub min_probe_accuracy: f64,
    pub max_baseline_accuracy: f64,
}

impl SelftestConfig {
    pub fn new(seed: u64) -> Self {
        SelftestConfig {
            model: ModelConfig::default(),
            plant: PlantSpec::default(),
            model_seed: seed,
            fixture_seed: seed.wrapping_add(1),
            fixtures: 12,
            probe_fixtures: 1000,
            probe_seed: seed.wrapping_add(2),
            baseline_seed: seed.wrapping_add(3),
            min_reduction: 2.0,
            min_entry_share: 0.9,
            min_probe_accuracy: 0.95,
            max_baseline_accuracy: 3.0 / 64.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: String,
    pub expected: String,
    pub passed: bool,
}

impl Check {
    fn at_least(name: &str, value: f64, min: f64) -> Self {
        Check {
            name: name.into(),
            value: format!("{value:.4}"),
            expected: format!(">= {min:.4}"),
            passed: value >= min,
        }
    }

    fn at_most(name: &str, value: f64, max: f64) -> Self {
        Check {
            name: name.into(),
            value: format!("{value:.4}"),
            expected: format!("<= {max:.4}"),
            passed: value <= max,
        }
    }
}

/// Per-fixture attribution summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub puzzle_id: String,
    pub full_head: f64,
    pub planted_entry: f64,
    pub share: f64,
    pub best_key: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    /// `(file name, contents)` in a fixed order.
    pub files: Vec<(String, Vec<u8>)>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<34} {:>14} {:>14}  status\n", "check", "value", "expected");
        for c in &self.checks {
            let status = if c.passed { "pass" } else { "FAIL" };
            let _ = writeln!(s, "{:<34} {:>14} {:>14}  {status}", c.name, c.value, c.expected);
        }
        s
    }
}

fn ablation_row(model: &Transformer, plant: &PlantSpec, f: &PlantFixture) -> Result<AblationRow, SelftestError> {
    let start = &f.puzzle.start;
    let target = f.puzzle.pv[0];
    let row: Vec<_> = Square::all().map(|k| (f.target, k)).collect();
    let entries = ablate_entries(model, start, plant.layer, plant.head, target, &row)?;
    let (clean, rec) = model.forward(start, None)?;
    let spec = InterventionSpec::default().zero_head(plant.layer, plant.head);
    let ablated = model.forward_from(start, plant.layer, &rec.residual[plant.layer], Some(&spec))?;
    let full_head = log_odds_reduction(&clean, &ablated, target);
    let planted_entry = entries[f.source.index()];
    let best = (0..entries.len()).fold(0, |b, i| if entries[i] > entries[b] { i } else { b });
    Ok(AblationRow {
        puzzle_id: f.puzzle.id.clone(),
        full_head,
        planted_entry,
        share: planted_entry / full_head,
        best_key: row[best].1.name(),
    })
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, csv::Error> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

pub fn run_selftest(cfg: &SelftestConfig) -> Result<SelftestReport, SelftestError> {
    let plant = cfg.plant;
    let model = make_planted_model(cfg.model, plant, cfg.model_seed)?;
    let fixtures = plant_fixtures(&plant, cfg.fixtures, cfg.fixture_seed);
    if fixtures.len() < cfg.fixtures {
        return Err(SelftestError::Fixtures { wanted: cfg.fixtures, found: fixtures.len() });
    }
    let mut checks = Vec::new();

    let mut heads = Vec::new();
    let mut residual = Vec::new();
    for f in &fixtures {
        heads.extend(sweep_heads(&model, &f.puzzle, &f.corrupted)?);
        residual.extend(sweep_residual(&model, &f.puzzle, &f.corrupted)?);
    }
    let grid = report::aggregate_head_grid(&heads, "planted", cfg.model.layers, cfg.model.heads)?;
    let (gl, gh, _) = grid.argmax();
    checks.push(Check {
        name: "head sweep argmax".into(),
        value: format!("({gl}, {gh})"),
        expected: format!("({}, {})", plant.layer, plant.head),
        passed: (gl, gh) == (plant.layer, plant.head),
    });

    let ablations: Vec<AblationRow> =
        fixtures.par_iter().map(|f| ablation_row(&model, &plant, f)).collect::<Result<_, _>>()?;
    let min_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
    checks.push(Check::at_least(
        "head zero-ablation reduction (min)",
        min_of(&mut ablations.iter().map(|a| a.full_head)),
        cfg.min_reduction,
    ));
    checks.push(Check::at_least(
        "planted entry share (min)",
        min_of(&mut ablations.iter().map(|a| a.share)),
        cfg.min_entry_share,
    ));

    let at = |r: &PatchResult, want_source: bool| {
        let f = fixtures.iter().find(|f| f.puzzle.id == r.puzzle_id).unwrap();
        let sq = if want_source { f.source } else { f.target };
        r.site.index == sq.index()
    };
    let early =
        min_of(&mut residual.iter().filter(|r| r.site.layer <= plant.layer && at(r, true)).map(|r| r.reduction));
    let late = min_of(&mut residual.iter().filter(|r| r.site.layer > plant.layer && at(r, false)).map(|r| r.reduction));
    checks.push(Check::at_least("residual at source, early layers", early, cfg.min_reduction));
    checks.push(Check::at_least("residual at target, late layers", late, cfg.min_reduction));

    let probe_puzzles: Vec<_> =
        plant_fixtures(&plant, cfg.probe_fixtures, cfg.probe_seed).into_iter().map(|f| f.puzzle).collect();
    let layer = plant.layer + 1;
    let hp = ProbeHyperparams::default();
    let data = probing::collect(&model, &probe_puzzles, layer, 1)?;
    let (_, accuracy) = probing::train_and_evaluate(&data, &hp)?;
    let baseline = probing::random_baseline(cfg.model, &probe_puzzles, layer, 1, cfg.baseline_seed, &hp)?;
    checks.push(Check::at_least("probe accuracy after plant layer", accuracy, cfg.min_probe_accuracy));
    checks.push(Check::at_most("random-weights probe baseline", baseline, cfg.max_baseline_accuracy));

    let labeled: Vec<LabeledResult> = residual
        .iter()
        .map(|r| {
            let f = fixtures.iter().find(|f| f.puzzle.id == r.puzzle_id).unwrap();
            let label = classify(&f.puzzle.destinations()).map(|l| l.to_string()).unwrap_or_default();
            LabeledResult::new(label, r.clone())
        })
        .collect();
    let curves = report::aggregate_curves(&labeled, 1);

    let mut files = Vec::new();
    let mut buf = Vec::new();
    write_patch_csv(&heads, &mut buf)?;
    files.push(("heads.csv".to_string(), std::mem::take(&mut buf)));
    write_patch_csv(&residual, &mut buf)?;
    files.push(("residual.csv".to_string(), std::mem::take(&mut buf)));
    report::write_grid_csv(&grid, &mut buf)?;
    files.push(("grid.csv".to_string(), std::mem::take(&mut buf)));
    report::write_curves_csv(&curves, &mut buf)?;
    files.push(("curves.csv".to_string(), std::mem::take(&mut buf)));
    files.push(("ablation.csv".to_string(), csv_bytes(&ablations).map_err(ReportError::from)?));
    let probe_rows = [ProbeRow { layer, ordinal: 1, accuracy, baseline }];
    probing::write_probe_csv(&probe_rows, &mut buf)?;
    files.push(("probe.csv".to_string(), std::mem::take(&mut buf)));
    let mut out = SelftestReport { checks, files };
    let summary = serde_json::json!({ "config": cfg, "checks": out.checks, "passed": out.passed() });
    let table = out.table();
    out.files.push(("summary.json".to_string(), serde_json::to_vec_pretty(&summary).expect("serializable")));
    out.files.push(("table.txt".to_string(), table.into_bytes()));
    Ok(out)
}
