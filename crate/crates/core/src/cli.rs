// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `lookahead-lab` command line. One subcommand per pipeline stage.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::corruption::{
    read_pairs, select_corruption, select_dual_branch, write_pairs, CorruptionError, CorruptionRecord,
    CorruptionThresholds,
};
use crate::interventions::{
    ablate_entries, ablate_head_attribution, read_patch_csv, sweep_branches, sweep_heads, sweep_residual,
    write_patch_csv, InterventionError, PatchResult, Site, SiteKind,
};
use crate::model::weights::{load_weights, save_weights};
use crate::model::{make_planted_model, make_toy_model, ModelConfig, ModelError, PlantSpec, Transformer};
use crate::parallel::{threads_from_env, with_threads, ThreadsError};
use crate::probing::{self, ProbeError, ProbeHyperparams, ProbeRow};
use crate::puzzle::{
    filter_alternative, filter_standard, ingest_puzzles, read_records, write_branches, write_puzzles, AltConfig,
    BranchPuzzle, FilterConfig, Puzzle, PuzzleError, PuzzleRecord,
};
use crate::report::{self, LabeledResult, ReportError, DEFAULT_MIN_SET_SIZE};
use crate::selftest::{run_selftest, SelftestConfig, SelftestError};
use crate::setlabel::{branch_label, classify, mate_prefix, LabelError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_MODEL: i32 = 4;
pub const EXIT_SELFTEST: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Model(String),
    #[error("self-test failed")]
    Selftest,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Model(_) => EXIT_MODEL,
            CliError::Selftest => EXIT_SELFTEST,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(e) => CliError::Input(e.to_string()),
            other => CliError::Model(other.to_string()),
        }
    }
}

impl From<PuzzleError> for CliError {
    fn from(e: PuzzleError) -> Self {
        match e {
            PuzzleError::Model { .. } => CliError::Model(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<CorruptionError> for CliError {
    fn from(e: CorruptionError) -> Self {
        match e {
            CorruptionError::Model(m) => m.into(),
            CorruptionError::Thresholds(m) => CliError::Usage(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<InterventionError> for CliError {
    fn from(e: InterventionError) -> Self {
        match e {
            InterventionError::Model(m) => m.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Model(m) => m.into(),
            ProbeError::Layer { .. } | ProbeError::Width { .. } => CliError::Model(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ThreadsError> for CliError {
    fn from(e: ThreadsError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SelftestError> for CliError {
    fn from(e: SelftestError) -> Self {
        match e {
            SelftestError::Model(m) => m.into(),
            other => CliError::Model(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lookahead-lab", version, about = "Look-ahead analysis for square-token chess policy networks")]
pub struct Cli {
    /// Worker threads; overrides LOOKAHEAD_LAB_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a puzzle CSV export to puzzles.jsonl.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the set label of every puzzle.
    Classify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep puzzles the strong model solves and the weak model misses.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        strong: PathBuf,
        #[arg(long)]
        weak: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FilterMode::Three)]
        mode: FilterMode,
    },
    /// Pick a minimally corrupted position for every puzzle.
    Corrupt {
        #[arg(long)]
        puzzles: PathBuf,
        #[arg(long)]
        strong: PathBuf,
        #[arg(long)]
        weak: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Require both branches of alternative-move puzzles to pass.
        #[arg(long)]
        dual: bool,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Activation patching sweeps.
    Patch {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        puzzles: PathBuf,
        #[arg(long)]
        corruptions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepKind::Residual)]
        sweep: SweepKind,
    },
    /// Zero-ablate one head and its attention entries.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        puzzles: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
        /// Only ablate entries whose query is the first move's destination.
        #[arg(long)]
        target_row: bool,
    },
    /// Train linear probes for a move's destination.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        puzzles: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        ordinal: usize,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the random-weights baseline model.
        #[arg(long, default_value_t = 99)]
        baseline_seed: u64,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate patch results into curves.csv and grid.csv.
    Report {
        /// `PATH` or `SERIES=PATH`; may be repeated.
        #[arg(long, required = true)]
        patch: Vec<String>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_MIN_SET_SIZE)]
        min_set_size: usize,
    },
    /// Run the planted-model battery end to end.
    PlantSelftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        fixtures: usize,
        #[arg(long, default_value_t = 1000)]
        probe_fixtures: usize,
    },
    /// Write a toy or planted weight file.
    MakeModel {
        #[arg(long, value_enum)]
        kind: ModelKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 128)]
        d_ff: usize,
        #[arg(long)]
        plant_layer: Option<usize>,
        #[arg(long)]
        plant_head: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FilterMode {
    Three,
    Seven,
    Alternative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Residual,
    Heads,
    BranchA,
    BranchB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Toy,
    Planted,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = 0.5)]
    prob_drop_factor: f64,
    #[arg(long, default_value_t = 0.1)]
    prob_abs_max: f64,
    #[arg(long, default_value_t = 0.0)]
    value_drop_min: f64,
    #[arg(long, default_value_t = 0.5)]
    value_drop_max: f64,
    #[arg(long, default_value_t = 0.5)]
    jsd_max: f64,
}

impl From<ThresholdArgs> for CorruptionThresholds {
    fn from(a: ThresholdArgs) -> Self {
        CorruptionThresholds {
            prob_drop_factor: a.prob_drop_factor,
            prob_abs_max: a.prob_abs_max,
            value_drop_min: a.value_drop_min,
            value_drop_max: a.value_drop_max,
            jsd_max: a.jsd_max,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn model(path: &Path) -> Result<Transformer, CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!("{}: no such file", path.display())));
    }
    Ok(load_weights(path)?)
}

fn records(path: &Path) -> Result<Vec<PuzzleRecord>, CliError> {
    Ok(read_records(open(path)?)?)
}

fn puzzles(path: &Path) -> Result<Vec<Puzzle>, CliError> {
    records(path)?.iter().map(|r| r.to_puzzle().map_err(CliError::from)).collect()
}

fn branches(path: &Path) -> Result<Vec<BranchPuzzle>, CliError> {
    records(path)?.iter().map(|r| r.to_branch().map_err(CliError::from)).collect()
}

/// Parses argv, runs one subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if !matches!(e, CliError::Selftest) {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    with_threads(threads, move || dispatch(cli.command))?
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { csv, out } => {
            let report = ingest_puzzles(open(&csv)?)?;
            let mut w = create(&out)?;
            write_puzzles(&report.puzzles, &mut w)?;
            w.flush()?;
            for (row, reason) in &report.skipped_rows {
                eprintln!("skipped row {row}: {reason}");
            }
            println!("ingested {} puzzles, skipped {}", report.puzzles.len(), report.skipped);
        }
        Command::Classify { input, out } => classify_cmd(&input, &out)?,
        Command::Filter { input, strong, weak, out, mode } => {
            let (strong, weak) = (model(&strong)?, model(&weak)?);
            let all = puzzles(&input)?;
            let mut w = create(&out)?;
            let kept = match mode {
                FilterMode::Alternative => {
                    let found = filter_alternative(&all, &strong, &weak, &AltConfig::default())?;
                    write_branches(&found, &mut w)?;
                    found.len()
                }
                FilterMode::Three | FilterMode::Seven => {
                    let cfg =
                        if mode == FilterMode::Three { FilterConfig::three_move() } else { FilterConfig::seven_move() };
                    let found = filter_standard(&all, &strong, &weak, &cfg)?;
                    write_puzzles(&found, &mut w)?;
                    found.len()
                }
            };
            w.flush()?;
            println!("kept {kept} of {} puzzles", all.len());
        }
        Command::Corrupt { puzzles: path, strong, weak, out, dual, thresholds } => {
            let th = CorruptionThresholds::from(thresholds);
            th.validate()?;
            let (strong, weak) = (model(&strong)?, model(&weak)?);
            let mut found = Vec::new();
            let total;
            if dual {
                let all = branches(&path)?;
                total = all.len();
                for b in &all {
                    if let Some(s) = select_dual_branch(b, &strong, &weak, &th)? {
                        found.push(CorruptionRecord::new(&b.base.id, &b.base.start, &s));
                    }
                }
            } else {
                let all = puzzles(&path)?;
                total = all.len();
                for p in &all {
                    if let Some(s) = select_corruption(&p.start, p.pv[0], &strong, &weak, &th)? {
                        found.push(CorruptionRecord::new(&p.id, &p.start, &s));
                    }
                }
            }
            let mut w = create(&out)?;
            write_pairs(&found, &mut w)?;
            w.flush()?;
            println!("corrupted {} of {total} puzzles, dropped {}", found.len(), total - found.len());
        }
        Command::Patch { model: m, puzzles: path, corruptions, out, sweep } => {
            let m = model(&m)?;
            let pairs: HashMap<String, CorruptionRecord> =
                read_pairs(open(&corruptions)?)?.into_iter().map(|r| (r.id.clone(), r)).collect();
            let mut results = Vec::new();
            let mut missing = 0;
            for r in records(&path)? {
                let Some(pair) = pairs.get(&r.id) else {
                    missing += 1;
                    continue;
                };
                let (_, corrupted) = pair.positions().map_err(CliError::Input)?;
                results.extend(match sweep {
                    SweepKind::Residual => sweep_residual(&m, &r.to_puzzle()?, &corrupted)?,
                    SweepKind::Heads => sweep_heads(&m, &r.to_puzzle()?, &corrupted)?,
                    SweepKind::BranchA => sweep_branches(&m, &r.to_branch()?, &corrupted)?.0,
                    SweepKind::BranchB => sweep_branches(&m, &r.to_branch()?, &corrupted)?.1,
                });
            }
            let mut w = create(&out)?;
            write_patch_csv(&results, &mut w)?;
            w.flush()?;
            if missing > 0 {
                eprintln!("{missing} puzzles have no corruption and were skipped");
            }
        }
        Command::Ablate { model: m, puzzles: path, layer, head, out, target_row } => {
            let m = model(&m)?;
            let cfg = m.config();
            if layer >= cfg.layers || head >= cfg.heads {
                return Err(CliError::Usage(format!(
                    "head ({layer}, {head}) outside a {}x{} model",
                    cfg.layers, cfg.heads
                )));
            }
            let mut results = Vec::new();
            for p in puzzles(&path)? {
                results.extend(ablate_cmd(&m, &p, layer, head, target_row)?);
            }
            let mut w = create(&out)?;
            write_patch_csv(&results, &mut w)?;
            w.flush()?;
        }
        Command::Probe {
            model: m,
            puzzles: path,
            layers,
            ordinal,
            out,
            baseline_seed,
            epochs,
            learning_rate,
            l2,
            seed,
        } => {
            let m = model(&m)?;
            let all = puzzles(&path)?;
            let hp = ProbeHyperparams { epochs, learning_rate, l2, seed };
            let mut rows = Vec::new();
            for layer in layers {
                let data = probing::collect(&m, &all, layer, ordinal)?;
                let (_, accuracy) = probing::train_and_evaluate(&data, &hp)?;
                let baseline = probing::random_baseline(m.config(), &all, layer, ordinal, baseline_seed, &hp)?;
                println!("layer {layer}: accuracy {accuracy:.4}, random baseline {baseline:.4}");
                rows.push(ProbeRow { layer, ordinal, accuracy, baseline });
            }
            let mut w = create(&out)?;
            probing::write_probe_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Command::Report { patch, labels, curves, grid, layers, heads, min_set_size } => {
            report_cmd(&patch, &labels, &curves, grid.as_deref(), layers, heads, min_set_size)?
        }
        Command::PlantSelftest { seed, out_dir, fixtures, probe_fixtures } => {
            let mut cfg = SelftestConfig::new(seed);
            cfg.fixtures = fixtures;
            cfg.probe_fixtures = probe_fixtures;
            let report = run_selftest(&cfg)?;
            print!("{}", report.table());
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                for (name, bytes) in &report.files {
                    std::fs::write(dir.join(name), bytes)?;
                }
            }
            if !report.passed() {
                return Err(CliError::Selftest);
            }
        }
        Command::MakeModel { kind, seed, out, layers, heads, d_model, d_ff, plant_layer, plant_head } => {
            let cfg = ModelConfig::new(layers, heads, d_model, d_ff);
            let m = match kind {
                ModelKind::Toy => make_toy_model(cfg, seed),
                ModelKind::Planted => {
                    let d = PlantSpec::default();
                    let plant =
                        PlantSpec { layer: plant_layer.unwrap_or(d.layer), head: plant_head.unwrap_or(d.head), ..d };
                    make_planted_model(cfg, plant, seed)
                }
            }
            .map_err(|e| CliError::Usage(e.to_string()))?;
            save_weights(&m, &out)?;
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct LabelRow {
    id: String,
    label: String,
    extended: String,
}

fn classify_cmd(input: &Path, out: &Path) -> Result<(), CliError> {
    let mut wtr = csv::Writer::from_writer(create(out)?);
    for r in records(input)? {
        let (label, extended) = match &r.alt_pv {
            Some(_) => {
                let b = r.to_branch()?;
                (branch_label(b.branch_a(), b.branch_b())?.to_string(), String::new())
            }
            None => {
                let p = r.to_puzzle()?;
                let mate = mate_prefix(&p.start, &p.pv)?;
                let label = classify(&p.destinations())?.with_mate(mate);
                (label.to_string(), crate::setlabel::classify_with_starts(&p.pv)?.to_string())
            }
        };
        wtr.serialize(LabelRow { id: r.id, label, extended })?;
    }
    wtr.flush()?;
    Ok(())
}

fn ablate_cmd(
    m: &Transformer,
    p: &Puzzle,
    layer: usize,
    head: usize,
    target_row: bool,
) -> Result<Vec<PatchResult>, CliError> {
    let target = p.pv[0];
    if !target_row {
        return Ok(ablate_head_attribution(m, &p.start, layer, head, target)?.to_results(&p.id));
    }
    let row: Vec<_> = crate::chess::Square::all().map(|k| (target.to, k)).collect();
    let values = ablate_entries(m, &p.start, layer, head, target, &row)?;
    let full = zero_head_result(m, p, layer, head)?;
    let mut out = vec![full];
    for ((q, k), v) in row.into_iter().zip(values) {
        out.push(PatchResult {
            puzzle_id: p.id.clone(),
            site: Site::entry(layer, head, q, k),
            role: None,
            delta_logodds: -v,
            reduction: v,
        });
    }
    Ok(out)
}

fn zero_head_result(m: &Transformer, p: &Puzzle, layer: usize, head: usize) -> Result<PatchResult, CliError> {
    let spec = crate::model::InterventionSpec::default().zero_head(layer, head);
    let (clean, rec) = m.forward(&p.start, None)?;
    let ablated = m.forward_from(&p.start, layer, &rec.residual[layer], Some(&spec))?;
    let v = crate::interventions::log_odds_reduction(&clean, &ablated, p.pv[0]);
    Ok(PatchResult {
        puzzle_id: p.id.clone(),
        site: Site { kind: SiteKind::HeadZero, layer, index: head },
        role: None,
        delta_logodds: -v,
        reduction: v,
    })
}

#[derive(serde::Deserialize)]
struct LabelIn {
    id: String,
    label: String,
}

fn report_cmd(
    patch: &[String],
    labels: &Path,
    curves: &Path,
    grid: Option<&Path>,
    layers: Option<usize>,
    heads: Option<usize>,
    min_set_size: usize,
) -> Result<(), CliError> {
    let mut rdr = csv::Reader::from_reader(open(labels)?);
    let labels: HashMap<String, String> =
        rdr.deserialize::<LabelIn>().map(|r| r.map(|r| (r.id, r.label))).collect::<Result<_, _>>()?;
    let mut labeled = Vec::new();
    let mut head_results = Vec::new();
    for spec in patch {
        let (series, path) = match spec.split_once('=') {
            Some((s, p)) => (Some(s.to_string()), PathBuf::from(p)),
            None => (None, PathBuf::from(spec)),
        };
        for r in read_patch_csv(open(&path)?)? {
            if matches!(r.site.kind, SiteKind::Head | SiteKind::HeadZero) {
                head_results.push(r);
                continue;
            }
            let Some(label) = labels.get(&r.puzzle_id) else {
                return Err(CliError::Input(format!("puzzle {} has no label", r.puzzle_id)));
            };
            let mut l = LabeledResult::new(label.clone(), r);
            if let Some(s) = &series {
                l = l.with_series(s.clone());
            }
            labeled.push(l);
        }
    }
    let out = report::aggregate_curves(&labeled, min_set_size);
    let mut w = create(curves)?;
    report::write_curves_csv(&out, &mut w)?;
    w.flush()?;
    println!("{} curves written", out.len());
    if let Some(grid_path) = grid {
        let layers = layers.or_else(|| head_results.iter().map(|r| r.site.layer + 1).max()).unwrap_or(0);
        let heads = heads.or_else(|| head_results.iter().map(|r| r.site.index + 1).max()).unwrap_or(0);
        if head_results.is_empty() {
            return Err(CliError::Input("no head results for --grid".into()));
        }
        let g = report::aggregate_head_grid(&head_results, "all", layers, heads)?;
        let mut w = create(grid_path)?;
        report::write_grid_csv(&g, &mut w)?;
        w.flush()?;
        let (l, h, v) = g.argmax();
        println!("strongest head: layer {l}, head {h}, mean reduction {v:.4}");
    }
    Ok(())
}
