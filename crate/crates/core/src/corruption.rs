// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-edit corrupted positions.
//!
//! Candidates come from three edit families: removing a pawn, adding a pawn
//! of either colour, and teleporting a non-pawn piece to an empty square.
//! Survivors of the filter battery are ranked by the weak model's
//! Jensen-Shannon divergence and the smallest one wins.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::{parse_fen, Color, Move, Piece, PieceKind, Position, Square};
use crate::model::{ModelError, PolicyModel, PolicyOutput};
use crate::puzzle::BranchPuzzle;

#[derive(Debug, Error)]
pub enum CorruptionError {
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionThresholds {
    pub prob_drop_factor: f64,
    pub prob_abs_max: f64,
    pub value_drop_min: f64,
    pub value_drop_max: f64,
    pub jsd_max: f64,
}

impl Default for CorruptionThresholds {
    fn default() -> Self {
        Self { prob_drop_factor: 0.5, prob_abs_max: 0.1, value_drop_min: 0.0, value_drop_max: 0.5, jsd_max: 0.5 }
    }
}

impl CorruptionThresholds {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        let all = [self.prob_drop_factor, self.prob_abs_max, self.value_drop_min, self.value_drop_max, self.jsd_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(CorruptionError::Thresholds("all bounds must be finite".into()));
        }
        if self.prob_drop_factor <= 0.0 || self.prob_abs_max <= 0.0 || self.jsd_max <= 0.0 {
            return Err(CorruptionError::Thresholds("probability and divergence bounds must be positive".into()));
        }
        if self.value_drop_min > self.value_drop_max {
            return Err(CorruptionError::Thresholds("value_drop_min exceeds value_drop_max".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    RemovePawn,
    AddPawn,
    MovePiece,
}

impl fmt::Display for EditKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditKind::RemovePawn => "remove_pawn",
            EditKind::AddPawn => "add_pawn",
            EditKind::MovePiece => "move_piece",
        })
    }
}

/// One board edit. `squares` is `[sq]` for pawn edits and `[from, to]` for moves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edit {
    pub kind: EditKind,
    pub squares: Vec<Square>,
    pub piece: Piece,
}

impl Edit {
    /// Applies the edit; side to move, castling and clocks are inherited.
    pub fn apply(&self, p: &Position) -> Option<Position> {
        let mut board = *p.board();
        let mut ep = p.en_passant();
        match self.kind {
            EditKind::RemovePawn => {
                let sq = self.squares[0];
                board[sq.index()] = None;
                let pusher_rank_offset = if p.side_to_move() == Color::White { -1 } else { 1 };
                if ep.and_then(|e| e.offset(0, pusher_rank_offset)) == Some(sq) {
                    ep = None;
                }
            }
            EditKind::AddPawn => board[self.squares[0].index()] = Some(self.piece),
            EditKind::MovePiece => {
                board[self.squares[0].index()] = None;
                board[self.squares[1].index()] = Some(self.piece);
            }
        }
        Position::from_parts(board, p.side_to_move(), p.castling(), ep, p.halfmove_clock(), p.fullmove_number()).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub edit: Edit,
    pub position: Position,
}

/// Every raw edit in generation order, valid or not.
pub fn candidate_edits(p: &Position) -> Vec<Edit> {
    let board = p.board();
    let mut out = Vec::new();
    for sq in Square::all() {
        if let Some(piece) = board[sq.index()].filter(|x| x.kind == PieceKind::Pawn) {
            out.push(Edit { kind: EditKind::RemovePawn, squares: vec![sq], piece });
        }
    }
    for sq in Square::all() {
        if board[sq.index()].is_none() && (1..=6).contains(&sq.rank()) {
            for color in [Color::White, Color::Black] {
                out.push(Edit {
                    kind: EditKind::AddPawn,
                    squares: vec![sq],
                    piece: Piece::new(color, PieceKind::Pawn),
                });
            }
        }
    }
    for from in Square::all() {
        let Some(piece) = board[from.index()].filter(|x| x.kind != PieceKind::Pawn) else { continue };
        for to in Square::all().filter(|t| board[t.index()].is_none()) {
            out.push(Edit { kind: EditKind::MovePiece, squares: vec![from, to], piece });
        }
    }
    out
}

/// Edits whose result satisfies the position invariants.
pub fn candidates(p: &Position) -> Vec<Candidate> {
    candidate_edits(p)
        .into_iter()
        .filter_map(|edit| edit.apply(p).map(|position| Candidate { edit, position }))
        .collect()
}

/// Jensen-Shannon divergence of two aligned distributions, natural log.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    let half_kl = |a: f64, m: f64| if a > 0.0 { 0.5 * a * (a / m).ln() } else { 0.0 };
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            half_kl(a, m) + half_kl(b, m)
        })
        .sum::<f64>()
        .max(0.0)
}

/// JSD of two policies over the union of their moves.
pub fn policy_divergence(a: &PolicyOutput, b: &PolicyOutput) -> f64 {
    let mut support: BTreeMap<Move, (f64, f64)> = BTreeMap::new();
    for (m, p) in a.iter() {
        support.entry(m).or_default().0 += p;
    }
    for (m, p) in b.iter() {
        support.entry(m).or_default().1 += p;
    }
    let (p, q): (Vec<f64>, Vec<f64>) = support.into_values().unzip();
    js_divergence(&p, &q)
}

/// Per-filter outcome for one candidate and one target move.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterReport {
    pub valid: bool,
    pub best_legal: bool,
    pub prob: f64,
    pub prob_ok: bool,
    pub value_drop: f64,
    pub value_ok: bool,
    pub jsd: f64,
    pub jsd_ok: bool,
}

impl FilterReport {
    pub fn passes(&self) -> bool {
        self.valid && self.best_legal && self.prob_ok && self.value_ok && self.jsd_ok
    }
}

struct Reference {
    strong: PolicyOutput,
    weak: PolicyOutput,
}

impl Reference {
    fn new(original: &Position, strong: &dyn PolicyModel, weak: &dyn PolicyModel) -> Result<Self, ModelError> {
        Ok(Self { strong: strong.evaluate(original)?, weak: weak.evaluate(original)? })
    }

    fn prob_ok(&self, best: Move, cand: &PolicyOutput, th: &CorruptionThresholds) -> bool {
        cand.prob(best) <= th.prob_abs_max.min(th.prob_drop_factor * self.strong.prob(best))
    }

    fn value_ok(&self, cand: &PolicyOutput, th: &CorruptionThresholds) -> bool {
        let drop = self.strong.value - cand.value;
        (th.value_drop_min..=th.value_drop_max).contains(&drop)
    }
}

/// Runs all five filters without short-circuiting.
pub fn check_candidate(
    original: &Position,
    best: Move,
    candidate: &Position,
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    th: &CorruptionThresholds,
) -> Result<FilterReport, ModelError> {
    let r = Reference::new(original, strong, weak)?;
    let s = strong.evaluate(candidate)?;
    let w = weak.evaluate(candidate)?;
    let jsd = policy_divergence(&r.weak, &w);
    Ok(FilterReport {
        valid: candidate.validate().is_ok(),
        best_legal: candidate.is_legal(best),
        prob: s.prob(best),
        prob_ok: r.prob_ok(best, &s, th),
        value_drop: r.strong.value - s.value,
        value_ok: r.value_ok(&s, th),
        jsd,
        jsd_ok: jsd <= th.jsd_max,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Survivor {
    pub candidate: Candidate,
    pub jsd: f64,
}

fn battery(
    original: &Position,
    bests: &[Move],
    cands: Vec<Candidate>,
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    th: &CorruptionThresholds,
) -> Result<Vec<Survivor>, CorruptionError> {
    th.validate()?;
    let r = Reference::new(original, strong, weak)?;
    let judged: Result<Vec<Option<Survivor>>, ModelError> = cands
        .into_par_iter()
        .map(|c| {
            if c.position.validate().is_err() || !bests.iter().all(|&m| c.position.is_legal(m)) {
                return Ok(None);
            }
            let s = strong.evaluate(&c.position)?;
            if !bests.iter().all(|&m| r.prob_ok(m, &s, th)) || !r.value_ok(&s, th) {
                return Ok(None);
            }
            let jsd = policy_divergence(&r.weak, &weak.evaluate(&c.position)?);
            Ok((jsd <= th.jsd_max).then_some(Survivor { candidate: c, jsd }))
        })
        .collect();
    Ok(judged?.into_iter().flatten().collect())
}

/// Candidates passing every filter for `best`, in generation order.
pub fn filter_candidates(
    original: &Position,
    best: Move,
    cands: Vec<Candidate>,
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    th: &CorruptionThresholds,
) -> Result<Vec<Survivor>, CorruptionError> {
    battery(original, &[best], cands, strong, weak, th)
}

/// Minimal divergence; ties keep the earliest candidate.
fn pick(survivors: Vec<Survivor>) -> Option<Survivor> {
    survivors.into_iter().fold(None, |acc: Option<Survivor>, s| match acc {
        Some(a) if a.jsd <= s.jsd => Some(a),
        _ => Some(s),
    })
}

pub fn select_corruption(
    original: &Position,
    best: Move,
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    th: &CorruptionThresholds,
) -> Result<Option<Survivor>, CorruptionError> {
    Ok(pick(filter_candidates(original, best, candidates(original), strong, weak, th)?))
}

/// Both branches' first moves must pass the full battery.
pub fn select_dual_branch(
    branch: &BranchPuzzle,
    strong: &dyn PolicyModel,
    weak: &dyn PolicyModel,
    th: &CorruptionThresholds,
) -> Result<Option<Survivor>, CorruptionError> {
    let start = &branch.base.start;
    let bests = [branch.branch_a()[0], branch.branch_b()[0]];
    Ok(pick(battery(start, &bests, candidates(start), strong, weak, th)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modification {
    pub kind: EditKind,
    pub squares: Vec<String>,
    pub piece: String,
}

/// One line of the pairs file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub id: String,
    pub original: String,
    pub corrupted: String,
    pub modification: Modification,
    pub jsd: f64,
}

impl CorruptionRecord {
    pub fn new(id: impl Into<String>, original: &Position, s: &Survivor) -> Self {
        let e = &s.candidate.edit;
        Self {
            id: id.into(),
            original: original.to_fen(),
            corrupted: s.candidate.position.to_fen(),
            modification: Modification {
                kind: e.kind,
                squares: e.squares.iter().map(|q| q.name()).collect(),
                piece: e.piece.fen_char().to_string(),
            },
            jsd: s.jsd,
        }
    }

    pub fn positions(&self) -> Result<(Position, Position), String> {
        let o = parse_fen(&self.original).map_err(|e| e.to_string())?;
        let c = parse_fen(&self.corrupted).map_err(|e| e.to_string())?;
        Ok((o, c))
    }
}

pub fn write_pairs(records: &[CorruptionRecord], mut w: impl Write) -> Result<(), CorruptionError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CorruptionError::Json { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs(r: impl BufRead) -> Result<Vec<CorruptionRecord>, CorruptionError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorruptionRecord =
            serde_json::from_str(&line).map_err(|e| CorruptionError::Json { line: i + 1, message: e.to_string() })?;
        rec.positions().map_err(|message| CorruptionError::Json { line: i + 1, message })?;
        out.push(rec);
    }
    Ok(out)
}
