// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random puzzles shaped for a planted model.
//!
//! A single fixture has one marker piece on a source square `s`, an empty
//! target `t` with exactly one legal move into it (PV move 1), a quiet reply
//! (move 2) and a capture on `s` (move 3). The corrupted position removes the
//! marker. Dual fixtures carry two markers and share the reply.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chess::{CastlingRights, Color, Move, Piece, PieceKind, Position, Square};
use crate::model::{ModelError, PlantSpec, PolicyModel};
use crate::puzzle::{BranchPuzzle, Puzzle};

#[derive(Clone, Debug, PartialEq)]
pub struct PlantFixture {
    pub puzzle: Puzzle,
    pub corrupted: Position,
    pub source: Square,
    pub target: Square,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualFixture {
    pub branch: BranchPuzzle,
    /// Branch A's marker removed.
    pub corrupted: Position,
    pub source_a: Square,
    pub source_b: Square,
}

const MAX_ATTEMPTS: usize = 1_000_000;

fn random_position(rng: &mut ChaCha8Rng, marker: Piece, sources: &[Square]) -> Option<Position> {
    let mut board = [None; 64];
    for s in sources {
        board[s.index()] = Some(marker);
    }
    let empty = |rng: &mut ChaCha8Rng, board: &[Option<Piece>; 64], pawn: bool| -> Square {
        loop {
            let s = Square::new(rng.random_range(0..64)).unwrap();
            if board[s.index()].is_none() && (!pawn || (1..=6).contains(&s.rank())) {
                return s;
            }
        }
    };
    let wk = empty(rng, &board, false);
    board[wk.index()] = Some(Piece::new(Color::White, PieceKind::King));
    let bk = empty(rng, &board, false);
    if (wk.file() as i8 - bk.file() as i8).abs() <= 1 && (wk.rank() as i8 - bk.rank() as i8).abs() <= 1 {
        return None;
    }
    board[bk.index()] = Some(Piece::new(Color::Black, PieceKind::King));

    let officers =
        [PieceKind::Queen, PieceKind::Rook, PieceKind::Rook, PieceKind::Bishop, PieceKind::Knight, PieceKind::Knight];
    let mut extra = Vec::new();
    for _ in 0..rng.random_range(2..=4) {
        extra.push(Piece::new(Color::White, *officers.choose(rng).unwrap()));
    }
    for _ in 0..rng.random_range(0..=3) {
        extra.push(Piece::new(Color::White, PieceKind::Pawn));
    }
    for _ in 0..rng.random_range(0..=2) {
        extra.push(Piece::new(Color::Black, officers[rng.random_range(1..officers.len())]));
    }
    for p in extra {
        if p == marker {
            continue;
        }
        let s = empty(rng, &board, p.kind == PieceKind::Pawn);
        board[s.index()] = Some(p);
    }
    Position::from_parts(board, Color::White, CastlingRights::default(), None, 0, 1).ok()
}

fn unique_move_to(p: &Position, t: Square) -> Option<Move> {
    let mut it = p.legal_moves().into_iter().filter(|m| m.to == t);
    let m = it.next()?;
    if it.next().is_some() || m.promotion.is_some() {
        return None;
    }
    Some(m)
}

fn without(p: &Position, sq: Square) -> Option<Position> {
    let mut board = *p.board();
    board[sq.index()] = None;
    Position::from_parts(board, p.side_to_move(), p.castling(), p.en_passant(), p.halfmove_clock(), p.fullmove_number())
        .ok()
}

fn capture_on(rng: &mut ChaCha8Rng, p: &Position, s: Square) -> Option<Move> {
    let caps: Vec<Move> = p.legal_moves().into_iter().filter(|m| m.to == s).collect();
    caps.choose(rng).copied()
}

fn source_candidates() -> Vec<Square> {
    Square::all().filter(|s| (1..=6).contains(&s.rank())).collect()
}

fn try_single(rng: &mut ChaCha8Rng, plant: &PlantSpec, sources: &[Square], id: String) -> Option<PlantFixture> {
    let s = *sources.choose(rng)?;
    let t = plant.target_of(s);
    let start = random_position(rng, plant.marker_piece(), &[s])?;
    if start.piece_at(t).is_some() {
        return None;
    }
    let m1 = unique_move_to(&start, t)?;
    let p1 = start.apply_move(m1).ok()?;
    let mut replies: Vec<Move> =
        p1.legal_moves().into_iter().filter(|m| m.from != s && m.to != s && m.to != t).collect();
    replies.shuffle(rng);
    for m2 in replies {
        let p2 = p1.apply_move(m2).ok()?;
        let Some(m3) = capture_on(rng, &p2, s) else { continue };
        let corrupted = without(&start, s)?;
        if !corrupted.is_legal(m1) {
            return None;
        }
        let puzzle = Puzzle::new(id, start, vec![m1, m2, m3], 1500, vec!["planted".into()]).ok()?;
        return Some(PlantFixture { puzzle, corrupted, source: s, target: t });
    }
    None
}

/// `count` single-marker fixtures; a pure function of its arguments.
pub fn plant_fixtures(plant: &PlantSpec, count: usize, seed: u64) -> Vec<PlantFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = source_candidates();
    let mut out = Vec::with_capacity(count);
    for _ in 0..MAX_ATTEMPTS {
        if out.len() == count {
            break;
        }
        let id = format!("plant-{seed}-{:04}", out.len());
        if let Some(f) = try_single(&mut rng, plant, &sources, id) {
            out.push(f);
        }
    }
    out
}

fn try_dual(
    rng: &mut ChaCha8Rng,
    plant: &PlantSpec,
    sources: &[Square],
    model: &dyn PolicyModel,
    id: String,
) -> Result<Option<DualFixture>, ModelError> {
    let (Some(&sa), Some(&sb)) = (sources.choose(rng), sources.choose(rng)) else { return Ok(None) };
    if sa.file() == sb.file() || sa.rank() == sb.rank() {
        return Ok(None);
    }
    let (ta, tb) = (plant.target_of(sa), plant.target_of(sb));
    let four = [sa, sb, ta, tb];
    if (0..4).any(|i| (i + 1..4).any(|j| four[i] == four[j])) {
        return Ok(None);
    }
    let Some(start) = random_position(rng, plant.marker_piece(), &[sa, sb]) else { return Ok(None) };
    if start.piece_at(ta).is_some() || start.piece_at(tb).is_some() {
        return Ok(None);
    }
    let (Some(a1), Some(b1)) = (unique_move_to(&start, ta), unique_move_to(&start, tb)) else { return Ok(None) };
    let (pa, pb) = (start.apply_move(a1).unwrap(), start.apply_move(b1).unwrap());
    let mut replies: Vec<Move> = pa
        .legal_moves()
        .into_iter()
        .filter(|m| !four.contains(&m.from) && !four.contains(&m.to) && pb.is_legal(*m))
        .collect();
    replies.shuffle(rng);
    for m2 in replies {
        let (qa, qb) = (pa.apply_move(m2).unwrap(), pb.apply_move(m2).unwrap());
        let (Some(a3), Some(b3)) = (capture_on(rng, &qa, sa), capture_on(rng, &qb, sb)) else { continue };
        let out = model.evaluate(&start)?;
        let (p_a, p_b) = (out.prob(a1), out.prob(b1));
        let line_a = vec![a1, m2, a3];
        let line_b = vec![b1, m2, b3];
        // Branch A is the more likely first move; the first-generated line is the PV.
        let (main, alt, src_a, src_b, first, second, pv_is_a) = if p_a >= p_b {
            (line_a, line_b, sa, sb, p_a, p_b, true)
        } else {
            (line_b, line_a, sb, sa, p_b, p_a, false)
        };
        let Some(corrupted) = without(&start, src_a) else { return Ok(None) };
        if !corrupted.is_legal(main[0]) || !corrupted.is_legal(alt[0]) {
            return Ok(None);
        }
        let Ok(base) = Puzzle::new(id, start, main, 1500, vec!["planted".into(), "dual".into()]) else {
            return Ok(None);
        };
        let branch = BranchPuzzle { base, alt_pv: alt, p_first_a: first, p_first_b: second, pv_is_a };
        return Ok(Some(DualFixture { branch, corrupted, source_a: src_a, source_b: src_b }));
    }
    Ok(None)
}

/// `count` two-marker fixtures whose sources share neither file nor rank.
/// `model` orders the branches so that A has the higher first-move probability.
pub fn dual_fixtures(
    plant: &PlantSpec,
    model: &dyn PolicyModel,
    count: usize,
    seed: u64,
) -> Result<Vec<DualFixture>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = source_candidates();
    let mut out = Vec::with_capacity(count);
    for _ in 0..MAX_ATTEMPTS {
        if out.len() == count {
            break;
        }
        let id = format!("dual-{seed}-{:04}", out.len());
        if let Some(f) = try_dual(&mut rng, plant, &sources, model, id)? {
            out.push(f);
        }
    }
    Ok(out)
}

/// Random legal positions reached by uniformly random playouts from the start.
pub fn random_playouts(count: usize, max_plies: usize, seed: u64) -> Vec<Position> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut p = Position::startpos();
        let plies = rng.random_range(0..=max_plies);
        for _ in 0..plies {
            let moves = p.legal_moves();
            let Some(&m) = moves.choose(&mut rng) else { break };
            p = p.apply_move(m).expect("legal move");
        }
        out.push(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_planted_model, ModelConfig};

    #[test]
    fn single_fixtures_have_the_planted_shape() {
        let plant = PlantSpec::default();
        let fx = plant_fixtures(&plant, 20, 1);
        assert_eq!(fx.len(), 20);
        for f in &fx {
            let pv = &f.puzzle.pv;
            assert_eq!(pv[0].to, f.target);
            assert_eq!(pv[2].to, f.source);
            assert_eq!(plant.source_of(f.target), f.source);
            assert_eq!(f.puzzle.start.count(plant.marker_piece()), 1);
            assert_eq!(f.corrupted.count(plant.marker_piece()), 0);
            assert!(f.corrupted.is_legal(pv[0]));
        }
        assert_eq!(plant_fixtures(&plant, 5, 1), fx[..5].to_vec());
    }

    #[test]
    fn dual_fixtures_share_the_reply() {
        let plant = PlantSpec::default();
        let model = make_planted_model(ModelConfig::default(), plant, 0).unwrap();
        let fx = dual_fixtures(&plant, &model, 5, 2).unwrap();
        assert_eq!(fx.len(), 5);
        for f in &fx {
            let (a, b) = (f.branch.branch_a(), f.branch.branch_b());
            assert_eq!(a[1], b[1]);
            assert_eq!(a[2].to, f.source_a);
            assert_eq!(b[2].to, f.source_b);
            assert!(f.branch.p_first_a >= f.branch.p_first_b);
            assert_eq!(f.corrupted.piece_at(f.source_a), None);
            assert!(f.corrupted.piece_at(f.source_b).is_some());
        }
    }

    #[test]
    fn playouts_are_valid() {
        for p in random_playouts(50, 40, 3) {
            assert!(p.validate().is_ok());
        }
    }
}
