// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mailbox move generation: pseudo-legal moves filtered by king safety.

use super::{Color, Move, Piece, PieceKind, Position, Square};

const KNIGHT: [(i8, i8); 8] = [(1, 2), (2, 1), (2, -1), (1, -2), (-1, -2), (-2, -1), (-2, 1), (-1, 2)];
const KING: [(i8, i8); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
const ROOK_DIRS: [(i8, i8); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
const BISHOP_DIRS: [(i8, i8); 4] = [(1, 1), (-1, 1), (-1, -1), (1, -1)];

impl Position {
    /// Whether `sq` is attacked by any piece of color `by`.
    pub fn is_attacked(&self, sq: Square, by: Color) -> bool {
        let has = |s: Option<Square>, kinds: &[PieceKind]| matches!(s.and_then(|s| self.board[s.index()]), Some(p) if p.color == by && kinds.contains(&p.kind));
        // Pawns attack diagonally forward, so look backward from the target.
        let pawn_dr = match by {
            Color::White => -1,
            Color::Black => 1,
        };
        if has(sq.offset(-1, pawn_dr), &[PieceKind::Pawn]) || has(sq.offset(1, pawn_dr), &[PieceKind::Pawn]) {
            return true;
        }
        if KNIGHT.iter().any(|&(df, dr)| has(sq.offset(df, dr), &[PieceKind::Knight])) {
            return true;
        }
        if KING.iter().any(|&(df, dr)| has(sq.offset(df, dr), &[PieceKind::King])) {
            return true;
        }
        let slides = |dirs: &[(i8, i8)], kinds: &[PieceKind]| {
            dirs.iter().any(|&(df, dr)| {
                let mut cur = sq.offset(df, dr);
                while let Some(s) = cur {
                    if let Some(p) = self.board[s.index()] {
                        return p.color == by && kinds.contains(&p.kind);
                    }
                    cur = s.offset(df, dr);
                }
                false
            })
        };
        slides(&ROOK_DIRS, &[PieceKind::Rook, PieceKind::Queen])
            || slides(&BISHOP_DIRS, &[PieceKind::Bishop, PieceKind::Queen])
    }
}

fn pseudo_legal(p: &Position) -> Vec<Move> {
    let us = p.side_to_move;
    let mut out = Vec::with_capacity(48);
    for from in Square::all() {
        let Some(piece) = p.board[from.index()] else { continue };
        if piece.color != us {
            continue;
        }
        match piece.kind {
            PieceKind::Pawn => pawn_moves(p, from, us, &mut out),
            PieceKind::Knight => steps(p, from, us, &KNIGHT, &mut out),
            PieceKind::King => {
                steps(p, from, us, &KING, &mut out);
                castling_moves(p, from, us, &mut out);
            }
            PieceKind::Bishop => slides(p, from, us, &BISHOP_DIRS, &mut out),
            PieceKind::Rook => slides(p, from, us, &ROOK_DIRS, &mut out),
            PieceKind::Queen => {
                slides(p, from, us, &ROOK_DIRS, &mut out);
                slides(p, from, us, &BISHOP_DIRS, &mut out);
            }
        }
    }
    out
}

fn push_pawn_move(from: Square, to: Square, out: &mut Vec<Move>) {
    if to.rank() == 0 || to.rank() == 7 {
        for kind in PieceKind::PROMOTIONS {
            out.push(Move::with_promotion(from, to, kind));
        }
    } else {
        out.push(Move::new(from, to));
    }
}

fn pawn_moves(p: &Position, from: Square, us: Color, out: &mut Vec<Move>) {
    let (dr, start_rank) = match us {
        Color::White => (1, 1),
        Color::Black => (-1, 6),
    };
    if let Some(one) = from.offset(0, dr) {
        if p.board[one.index()].is_none() {
            push_pawn_move(from, one, out);
            if from.rank() == start_rank {
                if let Some(two) = one.offset(0, dr) {
                    if p.board[two.index()].is_none() {
                        out.push(Move::new(from, two));
                    }
                }
            }
        }
    }
    for df in [-1, 1] {
        let Some(to) = from.offset(df, dr) else { continue };
        match p.board[to.index()] {
            Some(target) if target.color != us => push_pawn_move(from, to, out),
            None if p.en_passant == Some(to) => out.push(Move::new(from, to)),
            _ => {}
        }
    }
}

fn steps(p: &Position, from: Square, us: Color, deltas: &[(i8, i8)], out: &mut Vec<Move>) {
    for &(df, dr) in deltas {
        if let Some(to) = from.offset(df, dr) {
            if p.board[to.index()].is_none_or(|t| t.color != us) {
                out.push(Move::new(from, to));
            }
        }
    }
}

fn slides(p: &Position, from: Square, us: Color, dirs: &[(i8, i8)], out: &mut Vec<Move>) {
    for &(df, dr) in dirs {
        let mut cur = from.offset(df, dr);
        while let Some(to) = cur {
            match p.board[to.index()] {
                None => out.push(Move::new(from, to)),
                Some(t) => {
                    if t.color != us {
                        out.push(Move::new(from, to));
                    }
                    break;
                }
            }
            cur = to.offset(df, dr);
        }
    }
}

fn castling_moves(p: &Position, from: Square, us: Color, out: &mut Vec<Move>) {
    let back = match us {
        Color::White => 0,
        Color::Black => 7,
    };
    let home = Square::from_coords(4, back).unwrap();
    if from != home || p.is_attacked(home, us.opposite()) {
        return;
    }
    let rights = p.castling;
    let (king_side, queen_side) = match us {
        Color::White => (rights.white_king, rights.white_queen),
        Color::Black => (rights.black_king, rights.black_queen),
    };
    let rook = Some(Piece::new(us, PieceKind::Rook));
    let sq = |f| Square::from_coords(f, back).unwrap();
    let empty = |f| p.board[sq(f).index()].is_none();
    let safe = |f| !p.is_attacked(sq(f), us.opposite());
    if king_side && p.board[sq(7).index()] == rook && empty(5) && empty(6) && safe(5) && safe(6) {
        out.push(Move::new(home, sq(6)));
    }
    if queen_side && p.board[sq(0).index()] == rook && empty(1) && empty(2) && empty(3) && safe(3) && safe(2) {
        out.push(Move::new(home, sq(2)));
    }
}

/// Applies a pseudo-legal move without checking legality.
pub(super) fn make_move(p: &Position, m: Move) -> Position {
    let mut next = p.clone();
    let us = p.side_to_move;
    let piece = p.board[m.from.index()].expect("move from an empty square");
    let captured = p.board[m.to.index()];
    let is_pawn = piece.kind == PieceKind::Pawn;

    next.board[m.from.index()] = None;
    next.board[m.to.index()] = Some(match m.promotion {
        Some(kind) => Piece::new(us, kind),
        None => piece,
    });

    let mut ep_capture = false;
    if is_pawn && Some(m.to) == p.en_passant && captured.is_none() {
        let victim = Square::from_coords(m.to.file(), m.from.rank()).unwrap();
        next.board[victim.index()] = None;
        ep_capture = true;
    }

    if piece.kind == PieceKind::King && (m.from.file() as i8 - m.to.file() as i8).abs() == 2 {
        let back = m.from.rank();
        let (rook_from, rook_to) = if m.to.file() == 6 { (7, 5) } else { (0, 3) };
        let rf = Square::from_coords(rook_from, back).unwrap();
        let rt = Square::from_coords(rook_to, back).unwrap();
        next.board[rt.index()] = next.board[rf.index()].take();
    }

    // Rights are lost when the king moves or a rook leaves/is captured on its corner.
    let touched = |sq: usize| m.from.index() == sq || m.to.index() == sq;
    if touched(4) {
        next.castling.white_king = false;
        next.castling.white_queen = false;
    }
    if touched(60) {
        next.castling.black_king = false;
        next.castling.black_queen = false;
    }
    if touched(7) {
        next.castling.white_king = false;
    }
    if touched(0) {
        next.castling.white_queen = false;
    }
    if touched(63) {
        next.castling.black_king = false;
    }
    if touched(56) {
        next.castling.black_queen = false;
    }

    next.en_passant = None;
    if is_pawn && (m.to.rank() as i8 - m.from.rank() as i8).abs() == 2 {
        next.en_passant = Square::from_coords(m.from.file(), (m.from.rank() + m.to.rank()) / 2);
    }

    next.halfmove_clock = if is_pawn || captured.is_some() || ep_capture { 0 } else { p.halfmove_clock + 1 };
    if us == Color::Black {
        next.fullmove_number = p.fullmove_number + 1;
    }
    next.side_to_move = us.opposite();
    next
}

pub(super) fn legal_moves(p: &Position) -> Vec<Move> {
    let us = p.side_to_move;
    pseudo_legal(p)
        .into_iter()
        .filter(|&m| {
            let next = make_move(p, m);
            match next.king_square(us) {
                Some(k) => !next.is_attacked(k, us.opposite()),
                None => false,
            }
        })
        .collect()
}
