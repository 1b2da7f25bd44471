// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plot data: per-layer curves with percentile bands and per-head grids.
//!
//! Every sample is first averaged within its puzzle, so a puzzle with many
//! `other` squares still counts once. Values written to CSV are rounded to
//! 9 significant digits.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interventions::{PatchResult, SiteKind, SquareRole};

pub const DEFAULT_MIN_SET_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no samples")]
    Empty,
    #[error("band mass must lie in (0, 1), got {0}")]
    Mass(f64),
    #[error("head grid expects head sweep results, found {0}")]
    Kind(&'static str),
    #[error("site ({layer}, {head}) outside a {layers}x{heads} grid")]
    OutOfGrid { layer: usize, head: usize, layers: usize, heads: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid row: {0}")]
    Row(String),
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Central interval holding `mass` of the samples.
pub fn percentile_band(samples: &[f64], mass: f64) -> Result<(f64, f64), ReportError> {
    if samples.is_empty() {
        return Err(ReportError::Empty);
    }
    if !(mass > 0.0 && mass < 1.0) {
        return Err(ReportError::Mass(mass));
    }
    let s = sorted(samples);
    let tail = (1.0 - mass) / 2.0;
    Ok((quantile_sorted(&s, tail), quantile_sorted(&s, 1.0 - tail)))
}

/// Rounds to 9 significant digits, the precision of every CSV we write.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap()
}

fn fmt9(x: f64) -> String {
    format!("{}", round_sig9(x))
}

/// A patch result together with the puzzle set it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledResult {
    pub set_label: String,
    /// Which curve family the sample belongs to, e.g. `residual` or `branch_a`.
    pub series: String,
    pub result: PatchResult,
}

impl LabeledResult {
    pub fn new(set_label: impl Into<String>, result: PatchResult) -> Self {
        let series = result.site.kind.as_str().to_string();
        Self { set_label: set_label.into(), series, result }
    }

    pub fn with_series(mut self, series: impl Into<String>) -> Self {
        self.series = series.into();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub layer: usize,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub band50: (f64, f64),
    pub band90: (f64, f64),
    /// Standard error of the mean, used for the branch plots.
    pub sem: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSeries {
    pub set_label: String,
    pub series: String,
    pub role: SquareRole,
    /// Opponent moves are drawn dashed.
    pub dashed: bool,
    pub points: Vec<CurvePoint>,
}

fn mean_sorted(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(layer: usize, samples: &[f64]) -> CurvePoint {
    let s = sorted(samples);
    let n = s.len();
    let mean = mean_sorted(&s);
    let sem = if n > 1 {
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let band = |mass: f64| {
        let t = (1.0 - mass) / 2.0;
        (quantile_sorted(&s, t), quantile_sorted(&s, 1.0 - t))
    };
    CurvePoint { layer, n, mean, median: quantile_sorted(&s, 0.5), band50: band(0.5), band90: band(0.9), sem }
}

type CurveKey = (String, String, SquareRole);

/// Groups square-indexed results by set label, series, role and layer.
/// Groups with fewer than `min_set_size` puzzles are dropped.
pub fn aggregate_curves(results: &[LabeledResult], min_set_size: usize) -> Vec<CurveSeries> {
    let mut groups: BTreeMap<CurveKey, BTreeMap<usize, BTreeMap<&str, Vec<f64>>>> = BTreeMap::new();
    for r in results {
        let Some(role) = r.result.role else { continue };
        groups
            .entry((r.set_label.clone(), r.series.clone(), role))
            .or_default()
            .entry(r.result.site.layer)
            .or_default()
            .entry(r.result.puzzle_id.as_str())
            .or_default()
            .push(r.result.reduction);
    }
    let mut out = Vec::new();
    for ((set_label, series, role), layers) in groups {
        let points: Vec<CurvePoint> = layers
            .into_iter()
            .filter(|(_, per_puzzle)| per_puzzle.len() >= min_set_size.max(1))
            .map(|(layer, per_puzzle)| {
                let means: Vec<f64> = per_puzzle.values().map(|v| mean_sorted(&sorted(v))).collect();
                summarize(layer, &means)
            })
            .collect();
        if !points.is_empty() {
            out.push(CurveSeries { set_label, series, dashed: role.is_opponent(), role, points });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrid {
    pub set_label: String,
    pub layers: usize,
    pub heads: usize,
    /// `mean[layer][head]`, averaged over puzzles.
    pub mean: Vec<Vec<f64>>,
    pub n: usize,
}

impl HeadGrid {
    /// Largest mean reduction; the first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (l, row) in self.mean.iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (l, h, v);
                }
            }
        }
        best
    }
}

/// Mean head-sweep reduction per `(layer, head)` for one puzzle set.
pub fn aggregate_head_grid(
    results: &[PatchResult],
    set_label: &str,
    layers: usize,
    heads: usize,
) -> Result<HeadGrid, ReportError> {
    let mut cells: BTreeMap<(usize, usize), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in results {
        if !matches!(r.site.kind, SiteKind::Head | SiteKind::HeadZero) {
            return Err(ReportError::Kind(r.site.kind.as_str()));
        }
        let (layer, head) = (r.site.layer, r.site.index);
        if layer >= layers || head >= heads {
            return Err(ReportError::OutOfGrid { layer, head, layers, heads });
        }
        cells.entry((layer, head)).or_default().entry(r.puzzle_id.as_str()).or_default().push(r.reduction);
    }
    let mut mean = vec![vec![0.0; heads]; layers];
    for (&(l, h), per_puzzle) in &cells {
        let means: Vec<f64> = per_puzzle.values().map(|v| mean_sorted(&sorted(v))).collect();
        mean[l][h] = mean_sorted(&sorted(&means));
    }
    let mut puzzles: Vec<&str> = results.iter().map(|r| r.puzzle_id.as_str()).collect();
    puzzles.sort_unstable();
    puzzles.dedup();
    Ok(HeadGrid { set_label: set_label.to_string(), layers, heads, mean, n: puzzles.len() })
}

#[derive(Serialize, Deserialize)]
struct CurveRow {
    set_label: String,
    series: String,
    role: String,
    dashed: bool,
    layer: usize,
    n: usize,
    mean: String,
    median: String,
    p50_lo: String,
    p50_hi: String,
    p90_lo: String,
    p90_hi: String,
    sem: String,
}

fn num(s: &str) -> Result<f64, ReportError> {
    s.parse().map_err(|_| ReportError::Row(format!("not a number: {s:?}")))
}

/// One row per curve point.
pub fn write_curves_csv(curves: &[CurveSeries], w: impl Write) -> Result<(), ReportError> {
    let mut wtr = csv::Writer::from_writer(w);
    for c in curves {
        for p in &c.points {
            wtr.serialize(CurveRow {
                set_label: c.set_label.clone(),
                series: c.series.clone(),
                role: c.role.to_string(),
                dashed: c.dashed,
                layer: p.layer,
                n: p.n,
                mean: fmt9(p.mean),
                median: fmt9(p.median),
                p50_lo: fmt9(p.band50.0),
                p50_hi: fmt9(p.band50.1),
                p90_lo: fmt9(p.band90.0),
                p90_hi: fmt9(p.band90.1),
                sem: fmt9(p.sem),
            })?;
        }
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_curves_csv(r: impl Read) -> Result<Vec<CurveSeries>, ReportError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out: Vec<CurveSeries> = Vec::new();
    for row in rdr.deserialize::<CurveRow>() {
        let row = row?;
        let role: SquareRole = row.role.parse().map_err(ReportError::Row)?;
        let point = CurvePoint {
            layer: row.layer,
            n: row.n,
            mean: num(&row.mean)?,
            median: num(&row.median)?,
            band50: (num(&row.p50_lo)?, num(&row.p50_hi)?),
            band90: (num(&row.p90_lo)?, num(&row.p90_hi)?),
            sem: num(&row.sem)?,
        };
        match out.last_mut() {
            Some(c) if c.set_label == row.set_label && c.series == row.series && c.role == role => c.points.push(point),
            _ => out.push(CurveSeries {
                set_label: row.set_label,
                series: row.series,
                role,
                dashed: row.dashed,
                points: vec![point],
            }),
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct GridRow {
    set_label: String,
    layer: usize,
    head: usize,
    mean: String,
    n: usize,
    is_max: bool,
}

pub fn write_grid_csv(grid: &HeadGrid, w: impl Write) -> Result<(), ReportError> {
    let mut wtr = csv::Writer::from_writer(w);
    let (ml, mh, _) = grid.argmax();
    for (l, row) in grid.mean.iter().enumerate() {
        for (h, &v) in row.iter().enumerate() {
            wtr.serialize(GridRow {
                set_label: grid.set_label.clone(),
                layer: l,
                head: h,
                mean: fmt9(v),
                n: grid.n,
                is_max: (l, h) == (ml, mh),
            })?;
        }
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_grid_csv(r: impl Read) -> Result<HeadGrid, ReportError> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows: Vec<GridRow> = rdr.deserialize().collect::<Result<_, _>>()?;
    let first = rows.first().ok_or(ReportError::Empty)?;
    let layers = rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let heads = rows.iter().map(|r| r.head + 1).max().unwrap_or(0);
    let mut grid = HeadGrid {
        set_label: first.set_label.clone(),
        layers,
        heads,
        mean: vec![vec![0.0; heads]; layers],
        n: first.n,
    };
    for r in &rows {
        grid.mean[r.layer][r.head] = num(&r.mean)?;
    }
    Ok(grid)
}

impl CurveSeries {
    /// Copy with every value rounded the way the CSV writer rounds it.
    pub fn rounded(&self) -> CurveSeries {
        let r = |(a, b): (f64, f64)| (round_sig9(a), round_sig9(b));
        let mut c = self.clone();
        for p in &mut c.points {
            p.mean = round_sig9(p.mean);
            p.median = round_sig9(p.median);
            p.band50 = r(p.band50);
            p.band90 = r(p.band90);
            p.sem = round_sig9(p.sem);
        }
        c
    }
}
