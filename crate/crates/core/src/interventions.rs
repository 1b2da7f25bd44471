// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patching sweeps, zero-ablation attributions and square roles.
//!
//! All measurements are log-odds reductions of a target move: the clean
//! run's log odds minus the intervened run's, so positive values mean the
//! intervention hurt the move.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::{Move, Position, Square};
use crate::model::{InterventionSpec, Matrix, ModelError, PolicyOutput, Transformer, SEQ_LEN};
use crate::puzzle::{BranchPuzzle, Puzzle};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking log odds.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("puzzle {id}: move {mv} is not legal in the corrupted position")]
    BestMoveIllegal { id: String, mv: Move },
    #[error("puzzle {id}: move {mv} is not legal in the clean position")]
    TargetIllegal { id: String, mv: Move },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid result row: {0}")]
    Row(String),
}

pub fn log_odds(p: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    (p / (1.0 - p)).ln()
}

/// `log_odds(clean[m]) - log_odds(patched[m])`.
pub fn log_odds_reduction(clean: &PolicyOutput, patched: &PolicyOutput, m: Move) -> f64 {
    log_odds(clean.prob(m)) - log_odds(patched.prob(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Single,
    A,
    B,
    /// Same ordinal lands on this square in both branches.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SquareRole {
    /// Destination of PV move `ordinal` (1-based).
    Move {
        ordinal: u8,
        branch: Branch,
    },
    /// A square whose contents differ between clean and corrupted boards.
    Corrupted,
    Other,
}

impl SquareRole {
    pub fn single(ordinal: u8) -> Self {
        SquareRole::Move { ordinal, branch: Branch::Single }
    }

    /// Opponent moves (even ordinals) are drawn dashed.
    pub fn is_opponent(self) -> bool {
        matches!(self, SquareRole::Move { ordinal, .. } if ordinal % 2 == 0)
    }
}

impl fmt::Display for SquareRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SquareRole::Move { ordinal, branch } => {
                let suffix = match branch {
                    Branch::Single => "",
                    Branch::A => "A",
                    Branch::B => "B",
                    Branch::Shared => "AB",
                };
                write!(f, "move{ordinal}{suffix}")
            }
            SquareRole::Corrupted => f.write_str("corrupted"),
            SquareRole::Other => f.write_str("other"),
        }
    }
}

impl FromStr for SquareRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "corrupted" => return Ok(SquareRole::Corrupted),
            "other" => return Ok(SquareRole::Other),
            _ => {}
        }
        let rest = s.strip_prefix("move").ok_or_else(|| format!("unknown role {s:?}"))?;
        let split = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
        let ordinal: u8 = rest[..split].parse().map_err(|_| format!("unknown role {s:?}"))?;
        let branch = match &rest[split..] {
            "" => Branch::Single,
            "A" => Branch::A,
            "B" => Branch::B,
            "AB" => Branch::Shared,
            _ => return Err(format!("unknown role {s:?}")),
        };
        if ordinal == 0 {
            return Err(format!("unknown role {s:?}"));
        }
        Ok(SquareRole::Move { ordinal, branch })
    }
}

fn corrupted_squares(clean: &Position, corrupted: &Position) -> Vec<Square> {
    Square::all().filter(|&s| clean.piece_at(s) != corrupted.piece_at(s)).collect()
}

/// Roles of all 64 squares for a single line. Earlier ordinals win, move
/// roles beat the corrupted role, which beats other.
pub fn square_roles(pv: &[Move], clean: &Position, corrupted: &Position) -> [SquareRole; 64] {
    branch_roles(&[(pv, Branch::Single)], clean, corrupted)
}

/// Roles for two branches; a square reached at the same ordinal by both is
/// [`Branch::Shared`], otherwise the smaller ordinal wins (A on ties).
pub fn branch_square_roles(a: &[Move], b: &[Move], clean: &Position, corrupted: &Position) -> [SquareRole; 64] {
    branch_roles(&[(a, Branch::A), (b, Branch::B)], clean, corrupted)
}

fn branch_roles(lines: &[(&[Move], Branch)], clean: &Position, corrupted: &Position) -> [SquareRole; 64] {
    let mut roles = [SquareRole::Other; 64];
    for s in corrupted_squares(clean, corrupted) {
        roles[s.index()] = SquareRole::Corrupted;
    }
    for (sq, role) in roles.iter_mut().enumerate() {
        let mut best: Option<(u8, Branch)> = None;
        for &(line, branch) in lines {
            let Some(k) = line.iter().position(|m| m.to.index() == sq) else { continue };
            let k = (k + 1) as u8;
            best = match best {
                None => Some((k, branch)),
                Some((bk, _)) if k < bk => Some((k, branch)),
                Some((bk, bb)) if k == bk && bb != branch => Some((k, Branch::Shared)),
                keep => keep,
            };
        }
        if let Some((ordinal, branch)) = best {
            *role = SquareRole::Move { ordinal, branch };
        }
    }
    roles
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Residual,
    Head,
    HeadZero,
    AttentionEntry,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Residual => "residual",
            SiteKind::Head => "head",
            SiteKind::HeadZero => "head_zero",
            SiteKind::AttentionEntry => "attention_entry",
        }
    }
}

impl FromStr for SiteKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "residual" => SiteKind::Residual,
            "head" => SiteKind::Head,
            "head_zero" => SiteKind::HeadZero,
            "attention_entry" => SiteKind::AttentionEntry,
            _ => return Err(format!("unknown site kind {s:?}")),
        })
    }
}

/// An intervention site. `index` is the square for residual sites, the head
/// for head sites, and `head * 4096 + query * 64 + key` for attention entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub kind: SiteKind,
    pub layer: usize,
    pub index: usize,
}

impl Site {
    pub fn entry(layer: usize, head: usize, query: Square, key: Square) -> Self {
        Site { kind: SiteKind::AttentionEntry, layer, index: head * 4096 + query.index() * 64 + key.index() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchResult {
    pub puzzle_id: String,
    pub site: Site,
    /// Square role for square-indexed sites; `None` for heads.
    pub role: Option<SquareRole>,
    pub delta_logodds: f64,
    pub reduction: f64,
}

impl PatchResult {
    fn new(puzzle_id: &str, site: Site, role: Option<SquareRole>, reduction: f64) -> Self {
        PatchResult { puzzle_id: puzzle_id.to_string(), site, role, delta_logodds: -reduction, reduction }
    }
}

type SiteOutputs = Vec<(usize, usize, PolicyOutput)>;

/// Patched policies for every residual site `(layer 0..=L, square)`, in that order.
fn residual_outputs(
    model: &Transformer,
    clean: &Position,
    corrupted: &Position,
) -> Result<(PolicyOutput, SiteOutputs), ModelError> {
    let (clean_out, clean_rec) = model.forward(clean, None)?;
    let (_, corr_rec) = model.forward(corrupted, None)?;
    let sites: Vec<(usize, usize)> =
        (0..=model.config().layers).flat_map(|l| (0..SEQ_LEN).map(move |s| (l, s))).collect();
    let outs = sites
        .par_iter()
        .map(|&(l, s)| {
            let mut x = clean_rec.residual[l].clone();
            x.row_mut(s).copy_from_slice(corr_rec.residual[l].row(s));
            model.forward_from(clean, l, &x, None).map(|o| (l, s, o))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((clean_out, outs))
}

fn check_legal(id: &str, clean: &Position, corrupted: &Position, m: Move) -> Result<(), InterventionError> {
    if !clean.is_legal(m) {
        return Err(InterventionError::TargetIllegal { id: id.into(), mv: m });
    }
    if !corrupted.is_legal(m) {
        return Err(InterventionError::BestMoveIllegal { id: id.into(), mv: m });
    }
    Ok(())
}

/// Patches each residual site of the clean run with the corrupted run's
/// activation and measures the first PV move.
pub fn sweep_residual(
    model: &Transformer,
    puzzle: &Puzzle,
    corrupted: &Position,
) -> Result<Vec<PatchResult>, InterventionError> {
    let m = puzzle.pv[0];
    check_legal(&puzzle.id, &puzzle.start, corrupted, m)?;
    let roles = square_roles(&puzzle.pv, &puzzle.start, corrupted);
    let (clean, outs) = residual_outputs(model, &puzzle.start, corrupted)?;
    Ok(outs
        .iter()
        .map(|(l, s, o)| {
            let site = Site { kind: SiteKind::Residual, layer: *l, index: *s };
            PatchResult::new(&puzzle.id, site, Some(roles[*s]), log_odds_reduction(&clean, o, m))
        })
        .collect())
}

/// Patches each head's whole output slab with the corrupted run's.
pub fn sweep_heads(
    model: &Transformer,
    puzzle: &Puzzle,
    corrupted: &Position,
) -> Result<Vec<PatchResult>, InterventionError> {
    let m = puzzle.pv[0];
    check_legal(&puzzle.id, &puzzle.start, corrupted, m)?;
    let cfg = model.config();
    let (clean, clean_rec) = model.forward(&puzzle.start, None)?;
    let (_, corr_rec) = model.forward(corrupted, None)?;
    let sites: Vec<(usize, usize)> = (0..cfg.layers).flat_map(|l| (0..cfg.heads).map(move |h| (l, h))).collect();
    sites
        .par_iter()
        .map(|&(l, h)| {
            let spec = InterventionSpec::default().patch_head(l, h, corr_rec.head_out[l][h].clone());
            let out = model.forward_from(&puzzle.start, l, &clean_rec.residual[l], Some(&spec))?;
            let site = Site { kind: SiteKind::Head, layer: l, index: h };
            Ok(PatchResult::new(&puzzle.id, site, None, log_odds_reduction(&clean, &out, m)))
        })
        .collect()
}

/// Zero-ablation effects of one head on one move.
#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    pub layer: usize,
    pub head: usize,
    /// `entries[q][k]`: reduction from zeroing attention weight `(q, k)`.
    pub entries: Matrix,
    /// Reduction from zeroing the whole head.
    pub full_head: f64,
}

impl Attribution {
    pub fn get(&self, query: Square, key: Square) -> f64 {
        self.entries.get(query.index(), key.index())
    }

    /// The entry with the largest reduction, first in row-major order on ties.
    pub fn argmax(&self) -> (Square, Square, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &v) in self.entries.as_slice().iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        (Square::new(best.0 / 64).unwrap(), Square::new(best.0 % 64).unwrap(), best.1)
    }

    pub fn to_results(&self, puzzle_id: &str) -> Vec<PatchResult> {
        let mut out = Vec::with_capacity(4097);
        let site = Site { kind: SiteKind::HeadZero, layer: self.layer, index: self.head };
        out.push(PatchResult::new(puzzle_id, site, None, self.full_head));
        for q in Square::all() {
            for k in Square::all() {
                let site = Site::entry(self.layer, self.head, q, k);
                out.push(PatchResult::new(puzzle_id, site, None, self.get(q, k)));
            }
        }
        out
    }
}

/// Reduction of `target` from zero-ablating each given attention entry of
/// `(layer, head)`, resuming from the cached residual.
pub fn ablate_entries(
    model: &Transformer,
    position: &Position,
    layer: usize,
    head: usize,
    target: Move,
    entries: &[(Square, Square)],
) -> Result<Vec<f64>, InterventionError> {
    if !position.is_legal(target) {
        return Err(InterventionError::TargetIllegal { id: position.to_fen(), mv: target });
    }
    let (clean, rec) = model.forward(position, None)?;
    entries
        .par_iter()
        .map(|&(q, k)| {
            let spec = InterventionSpec::default().zero_entry(layer, head, q, k);
            let out = model.forward_from(position, layer, &rec.residual[layer], Some(&spec))?;
            Ok(log_odds_reduction(&clean, &out, target))
        })
        .collect()
}

/// Full 64x64 entry attribution plus the whole-head ablation.
pub fn ablate_head_attribution(
    model: &Transformer,
    position: &Position,
    layer: usize,
    head: usize,
    target: Move,
) -> Result<Attribution, InterventionError> {
    let pairs: Vec<(Square, Square)> = Square::all().flat_map(|q| Square::all().map(move |k| (q, k))).collect();
    let values = ablate_entries(model, position, layer, head, target, &pairs)?;
    let (clean, rec) = model.forward(position, None)?;
    let spec = InterventionSpec::default().zero_head(layer, head);
    let ablated = model.forward_from(position, layer, &rec.residual[layer], Some(&spec))?;
    Ok(Attribution {
        layer,
        head,
        entries: Matrix::from_vec(SEQ_LEN, SEQ_LEN, values),
        full_head: log_odds_reduction(&clean, &ablated, target),
    })
}

/// Residual sweep measured once against each branch's first move. Both
/// first moves must stay legal in the corrupted position.
pub fn sweep_branches(
    model: &Transformer,
    bp: &BranchPuzzle,
    corrupted: &Position,
) -> Result<(Vec<PatchResult>, Vec<PatchResult>), InterventionError> {
    let start = &bp.base.start;
    let (ma, mb) = (bp.branch_a()[0], bp.branch_b()[0]);
    check_legal(&bp.base.id, start, corrupted, ma)?;
    check_legal(&bp.base.id, start, corrupted, mb)?;
    let roles = branch_square_roles(bp.branch_a(), bp.branch_b(), start, corrupted);
    let (clean, outs) = residual_outputs(model, start, corrupted)?;
    let make = |m: Move| {
        outs.iter()
            .map(|(l, s, o)| {
                let site = Site { kind: SiteKind::Residual, layer: *l, index: *s };
                PatchResult::new(&bp.base.id, site, Some(roles[*s]), log_odds_reduction(&clean, o, m))
            })
            .collect()
    };
    Ok((make(ma), make(mb)))
}

#[derive(Serialize, Deserialize)]
struct PatchRow {
    puzzle_id: String,
    kind: String,
    layer: usize,
    index: usize,
    role: String,
    reduction: f64,
}

/// Writes `puzzle_id,kind,layer,index,role,reduction`.
pub fn write_patch_csv(results: &[PatchResult], w: impl Write) -> Result<(), InterventionError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in results {
        wtr.serialize(PatchRow {
            puzzle_id: r.puzzle_id.clone(),
            kind: r.site.kind.as_str().to_string(),
            layer: r.site.layer,
            index: r.site.index,
            role: r.role.map(|x| x.to_string()).unwrap_or_default(),
            reduction: r.reduction,
        })?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_patch_csv(r: impl Read) -> Result<Vec<PatchResult>, InterventionError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize::<PatchRow>() {
        let row = row?;
        let kind = row.kind.parse().map_err(InterventionError::Row)?;
        let role = if row.role.is_empty() { None } else { Some(row.role.parse().map_err(InterventionError::Row)?) };
        out.push(PatchResult::new(
            &row.puzzle_id,
            Site { kind, layer: row.layer, index: row.index },
            role,
            row.reduction,
        ));
    }
    Ok(out)
}
