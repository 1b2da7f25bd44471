// SPDX-License-Identifier: MIT OR Apache-2.0

//! Puzzle ingestion, the dataset filters and JSON-lines persistence.
//!
//! Lichess rows list the opponent's setup move first; it is played onto the
//! FEN to get the position the solver faces, and the remaining moves form the
//! principal variation (ordinal 1 is the solver's move).

use std::io::{BufRead, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::{parse_fen, parse_uci, FenError, Move, Position, Square};
use crate::model::{ModelError, PolicyModel, PolicyOutput};

#[derive(Debug, Error)]
pub enum PuzzleError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv header is missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("puzzle {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("puzzle {id}: {source}")]
    Model {
        id: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Puzzle {
    pub id: String,
    pub start: Position,
    pub pv: Vec<Move>,
    pub rating: i32,
    pub themes: Vec<String>,
}

impl Puzzle {
    /// Validates that `pv` is nonempty and legal move by move.
    pub fn new(
        id: impl Into<String>,
        start: Position,
        pv: Vec<Move>,
        rating: i32,
        themes: Vec<String>,
    ) -> Result<Self, PuzzleError> {
        let id = id.into();
        if pv.is_empty() {
            return Err(PuzzleError::Invalid { id, message: "empty principal variation".into() });
        }
        let mut pos = start.clone();
        for (k, &m) in pv.iter().enumerate() {
            pos = pos
                .apply_move(m)
                .map_err(|e| PuzzleError::Invalid { id: id.clone(), message: format!("move {}: {e}", k + 1) })?;
        }
        Ok(Puzzle { id, start, pv, rating, themes })
    }

    /// Positions before each PV move followed by the final position.
    pub fn positions(&self) -> Vec<Position> {
        let mut out = Vec::with_capacity(self.pv.len() + 1);
        out.push(self.start.clone());
        for &m in &self.pv {
            let next = out.last().unwrap().apply_move(m).expect("validated line");
            out.push(next);
        }
        out
    }

    pub fn final_position(&self) -> Position {
        self.positions().pop().unwrap()
    }

    pub fn destinations(&self) -> Vec<Square> {
        self.pv.iter().map(|m| m.to).collect()
    }
}

/// Rows parsed and rows skipped by [`ingest_puzzles`].
#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub puzzles: Vec<Puzzle>,
    pub skipped: usize,
    /// `(1-based data row, reason)` for every skipped row.
    pub skipped_rows: Vec<(usize, String)>,
}

fn parse_row(id: &str, fen: &str, moves: &str, rating: &str, themes: Option<&str>) -> Result<Puzzle, String> {
    let board = parse_fen(fen).map_err(|e: FenError| e.to_string())?;
    let mut uci = moves.split_whitespace();
    let setup = uci.next().ok_or("empty Moves field")?;
    let setup = parse_uci(setup).map_err(|e| e.to_string())?;
    let start = board.apply_move(setup).map_err(|e| format!("setup move: {e}"))?;
    let pv = uci.map(|t| parse_uci(t).map_err(|e| e.to_string())).collect::<Result<Vec<_>, _>>()?;
    let rating = rating.trim().parse::<i32>().map_err(|e| format!("rating: {e}"))?;
    let themes = themes.map(|t| t.split_whitespace().map(String::from).collect()).unwrap_or_default();
    Puzzle::new(id, start, pv, rating, themes).map_err(|e| e.to_string())
}

/// Reads a Lichess puzzle export. Rows that fail to parse or replay are
/// skipped and counted; a bad header or unreadable stream is an error.
pub fn ingest_puzzles(reader: impl Read) -> Result<IngestReport, PuzzleError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &'static str| col(name).ok_or(PuzzleError::MissingColumn(name));
    let (id_c, fen_c, moves_c, rating_c) = (need("PuzzleId")?, need("FEN")?, need("Moves")?, need("Rating")?);
    let themes_c = col("Themes");

    let mut report = IngestReport::default();
    for (row, rec) in rdr.records().enumerate() {
        let row = row + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(e) => {
                report.skipped += 1;
                report.skipped_rows.push((row, e.to_string()));
                continue;
            }
        };
        let field = |c: usize| rec.get(c).ok_or_else(|| format!("row has {} fields", rec.len()));
        let parsed = (|| {
            parse_row(field(id_c)?, field(fen_c)?, field(moves_c)?, field(rating_c)?, themes_c.and_then(|c| rec.get(c)))
        })();
        match parsed {
            Ok(p) => report.puzzles.push(p),
            Err(reason) => {
                report.skipped += 1;
                report.skipped_rows.push((row, reason));
            }
        }
    }
    Ok(report)
}

/// Thresholds of the standard dataset filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// The weak model must give the first move strictly less than this.
    pub weak_first_move_max: f64,
    /// The strong model must give each of moves 1-3 at least this.
    pub strong_move_min: f64,
    pub weak_second_move_min: Option<f64>,
    pub pv_length: Option<usize>,
}

impl FilterConfig {
    /// The 3- and 5-move dataset thresholds.
    pub fn three_move() -> Self {
        FilterConfig {
            weak_first_move_max: 0.05,
            strong_move_min: 0.5,
            weak_second_move_min: Some(0.7),
            pv_length: None,
        }
    }

    /// The relaxed 7-move dataset thresholds.
    pub fn seven_move() -> Self {
        FilterConfig { weak_first_move_max: 0.20, strong_move_min: 0.5, weak_second_move_min: None, pv_length: Some(7) }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [Some(self.weak_first_move_max), Some(self.strong_move_min), self.weak_second_move_min];
        if probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(format!("probability thresholds must lie in [0, 1]: {self:?}"));
        }
        Ok(())
    }
}

fn eval(model: &dyn PolicyModel, id: &str, p: &Position) -> Result<PolicyOutput, PuzzleError> {
    model.evaluate(p).map_err(|source| PuzzleError::Model { id: id.to_string(), source })
}

fn keep_standard(
    pz: &Puzzle,
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    cfg: &FilterConfig,
) -> Result<bool, PuzzleError> {
    if pz.pv.len() < 3 || cfg.pv_length.is_some_and(|n| pz.pv.len() != n) {
        return Ok(false);
    }
    let pos = pz.positions();
    if eval(weak, &pz.id, &pos[0])?.prob(pz.pv[0]) >= cfg.weak_first_move_max {
        return Ok(false);
    }
    for (p, &m) in pos.iter().zip(&pz.pv).take(3) {
        if eval(strong, &pz.id, p)?.prob(m) < cfg.strong_move_min {
            return Ok(false);
        }
    }
    if let Some(min) = cfg.weak_second_move_min {
        if eval(weak, &pz.id, &pos[1])?.prob(pz.pv[1]) < min {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Keeps puzzles the strong model solves and the weak model does not.
/// The probability of move `k` is read on the position after moves `1..k`.
/// Puzzles with fewer than three moves are dropped. Output keeps input order.
pub fn filter_standard(
    puzzles: &[Puzzle],
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    cfg: &FilterConfig,
) -> Result<Vec<Puzzle>, PuzzleError> {
    let keep: Vec<bool> = puzzles.par_iter().map(|p| keep_standard(p, strong, weak, cfg)).collect::<Result<_, _>>()?;
    Ok(puzzles.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p.clone()).collect())
}

/// Thresholds of the alternative-branch filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltConfig {
    pub first_move_min: f64,
    pub continuation_min: f64,
    /// Weak-model first-move probability must be strictly below this.
    pub hardness_max: f64,
    pub forcing_min: f64,
}

impl Default for AltConfig {
    fn default() -> Self {
        AltConfig { first_move_min: 0.3, continuation_min: 0.7, hardness_max: 0.05, forcing_min: 0.7 }
    }
}

/// A 3-move puzzle with two candidate branches. `base.pv` is branch A, the
/// branch whose first move the strong model prefers (the PV on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchPuzzle {
    pub base: Puzzle,
    pub alt_pv: Vec<Move>,
    pub p_first_a: f64,
    pub p_first_b: f64,
    /// Whether branch A is the puzzle's principal variation.
    pub pv_is_a: bool,
}

impl BranchPuzzle {
    pub fn branch_a(&self) -> &[Move] {
        &self.base.pv
    }

    pub fn branch_b(&self) -> &[Move] {
        &self.alt_pv
    }

    /// The PV-derived puzzle with branch B as its line.
    pub fn alt_puzzle(&self) -> Puzzle {
        Puzzle { pv: self.alt_pv.clone(), ..self.base.clone() }
    }
}

fn argmax(out: &PolicyOutput) -> Option<(Move, f64)> {
    out.best()
}

fn alt_branch(
    pz: &Puzzle,
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    cfg: &AltConfig,
) -> Result<Option<BranchPuzzle>, PuzzleError> {
    if pz.pv.len() != 3 {
        return Ok(None);
    }
    let pos = pz.positions();
    if pos[3].is_checkmate() {
        return Ok(None);
    }
    let first = eval(strong, &pz.id, &pos[0])?;
    let p_pv = first.prob(pz.pv[0]);
    if p_pv < cfg.first_move_min {
        return Ok(None);
    }
    // The strongest other first move; earlier legal-move order wins ties.
    let mut alt: Option<(Move, f64)> = None;
    for (m, p) in first.iter() {
        if m != pz.pv[0] && p >= cfg.first_move_min && alt.is_none_or(|(_, best)| p > best) {
            alt = Some((m, p));
        }
    }
    let Some((b1, p_alt)) = alt else { return Ok(None) };

    for (p, &m) in pos.iter().zip(&pz.pv).take(3).skip(1) {
        if eval(strong, &pz.id, p)?.prob(m) < cfg.continuation_min {
            return Ok(None);
        }
    }
    let mut alt_pv = vec![b1];
    let mut cur = pos[0].apply_move(b1).expect("legal by construction");
    for _ in 0..2 {
        let Some((m, p)) = argmax(&eval(strong, &pz.id, &cur)?) else { return Ok(None) };
        if p < cfg.continuation_min {
            return Ok(None);
        }
        alt_pv.push(m);
        cur = cur.apply_move(m).expect("legal by construction");
    }

    let (a, b) = (&pz.pv, &alt_pv);
    let four = [a[0].to, a[2].to, b[0].to, b[2].to];
    if (0..4).any(|i| (i + 1..4).any(|j| four[i] == four[j])) {
        return Ok(None);
    }
    if a[1].to == a[2].to || b[1].to == b[2].to {
        return Ok(None);
    }

    if eval(weak, &pz.id, &pos[0])?.prob(pz.pv[0]) >= cfg.hardness_max
        || eval(weak, &pz.id, &pos[1])?.prob(pz.pv[1]) < cfg.forcing_min
    {
        return Ok(None);
    }

    let pv_is_a = p_pv >= p_alt;
    let (main, other, pa, pb) =
        if pv_is_a { (pz.pv.clone(), alt_pv, p_pv, p_alt) } else { (alt_pv, pz.pv.clone(), p_alt, p_pv) };
    Ok(Some(BranchPuzzle {
        base: Puzzle { pv: main, ..pz.clone() },
        alt_pv: other,
        p_first_a: pa,
        p_first_b: pb,
        pv_is_a,
    }))
}

/// Finds puzzles with two near-equiprobable branches, one of them the PV.
pub fn filter_alternative(
    puzzles: &[Puzzle],
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    cfg: &AltConfig,
) -> Result<Vec<BranchPuzzle>, PuzzleError> {
    let found: Vec<Option<BranchPuzzle>> =
        puzzles.par_iter().map(|p| alt_branch(p, strong, weak, cfg)).collect::<Result<_, _>>()?;
    Ok(found.into_iter().flatten().collect())
}

/// One line of `puzzles.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PuzzleRecord {
    pub id: String,
    pub fen: String,
    pub pv: Vec<String>,
    #[serde(default)]
    pub rating: i32,
    #[serde(default)]
    pub themes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alt_pv: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_first_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_first_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pv_is_a: Option<bool>,
}

fn uci_line(moves: &[Move]) -> Vec<String> {
    moves.iter().map(|m| m.to_uci()).collect()
}

impl From<&Puzzle> for PuzzleRecord {
    fn from(p: &Puzzle) -> Self {
        PuzzleRecord {
            id: p.id.clone(),
            fen: p.start.to_fen(),
            pv: uci_line(&p.pv),
            rating: p.rating,
            themes: p.themes.clone(),
            alt_pv: None,
            p_first_a: None,
            p_first_b: None,
            pv_is_a: None,
        }
    }
}

impl From<&BranchPuzzle> for PuzzleRecord {
    fn from(b: &BranchPuzzle) -> Self {
        PuzzleRecord {
            alt_pv: Some(uci_line(&b.alt_pv)),
            p_first_a: Some(b.p_first_a),
            p_first_b: Some(b.p_first_b),
            pv_is_a: Some(b.pv_is_a),
            ..PuzzleRecord::from(&b.base)
        }
    }
}

fn parse_line(id: &str, moves: &[String]) -> Result<Vec<Move>, PuzzleError> {
    moves
        .iter()
        .map(|t| parse_uci(t).map_err(|e| PuzzleError::Invalid { id: id.into(), message: e.to_string() }))
        .collect()
}

impl PuzzleRecord {
    pub fn to_puzzle(&self) -> Result<Puzzle, PuzzleError> {
        let start =
            parse_fen(&self.fen).map_err(|e| PuzzleError::Invalid { id: self.id.clone(), message: e.to_string() })?;
        Puzzle::new(self.id.clone(), start, parse_line(&self.id, &self.pv)?, self.rating, self.themes.clone())
    }

    pub fn to_branch(&self) -> Result<BranchPuzzle, PuzzleError> {
        let base = self.to_puzzle()?;
        let alt = self
            .alt_pv
            .as_ref()
            .ok_or_else(|| PuzzleError::Invalid { id: self.id.clone(), message: "record has no alt_pv".into() })?;
        let alt_pv = parse_line(&self.id, alt)?;
        Puzzle::new(self.id.clone(), base.start.clone(), alt_pv.clone(), 0, Vec::new())?;
        Ok(BranchPuzzle {
            base,
            alt_pv,
            p_first_a: self.p_first_a.unwrap_or(f64::NAN),
            p_first_b: self.p_first_b.unwrap_or(f64::NAN),
            pv_is_a: self.pv_is_a.unwrap_or(true),
        })
    }
}

pub fn write_records(records: &[PuzzleRecord], mut w: impl Write) -> Result<(), PuzzleError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| PuzzleError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<Vec<PuzzleRecord>, PuzzleError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PuzzleError::Json { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn write_puzzles(puzzles: &[Puzzle], w: impl Write) -> Result<(), PuzzleError> {
    write_records(&puzzles.iter().map(PuzzleRecord::from).collect::<Vec<_>>(), w)
}

pub fn read_puzzles(r: impl BufRead) -> Result<Vec<Puzzle>, PuzzleError> {
    read_records(r)?.iter().map(PuzzleRecord::to_puzzle).collect()
}

pub fn write_branches(branches: &[BranchPuzzle], w: impl Write) -> Result<(), PuzzleError> {
    write_records(&branches.iter().map(PuzzleRecord::from).collect::<Vec<_>>(), w)
}

pub fn read_branches(r: impl BufRead) -> Result<Vec<BranchPuzzle>, PuzzleError> {
    read_records(r)?.iter().map(PuzzleRecord::to_branch).collect()
}
