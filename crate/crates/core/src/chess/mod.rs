// SPDX-License-Identifier: MIT OR Apache-2.0

//! Chess rules, board representation and the FEN / UCI text formats.
//!
//! Squares are indexed `file + 8 * rank` with a1 = 0, b1 = 1 and h8 = 63.
//! Every other module in the crate shares this indexing.

mod fen;
mod movegen;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use fen::FenError;

/// A board square, `file + 8 * rank`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Square(u8);

impl Square {
    pub const COUNT: usize = 64;

    pub fn new(index: usize) -> Option<Self> {
        (index < 64).then_some(Square(index as u8))
    }

    pub fn from_coords(file: u8, rank: u8) -> Option<Self> {
        (file < 8 && rank < 8).then_some(Square(file + 8 * rank))
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn file(self) -> u8 {
        self.0 % 8
    }

    #[inline]
    pub fn rank(self) -> u8 {
        self.0 / 8
    }

    /// The square displaced by `(df, dr)`, if it is still on the board.
    pub fn offset(self, df: i8, dr: i8) -> Option<Self> {
        let f = self.file() as i8 + df;
        let r = self.rank() as i8 + dr;
        if (0..8).contains(&f) && (0..8).contains(&r) {
            Some(Square(f as u8 + 8 * r as u8))
        } else {
            None
        }
    }

    pub fn all() -> impl Iterator<Item = Square> {
        (0..64u8).map(Square)
    }

    pub fn name(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Square {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", (b'a' + self.file()) as char, (b'1' + self.rank()) as char)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid square name {0:?}")]
pub struct SquareParseError(pub String);

impl FromStr for Square {
    type Err = SquareParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != 2 || !(b'a'..=b'h').contains(&b[0]) || !(b'1'..=b'8').contains(&b[1]) {
            return Err(SquareParseError(s.to_string()));
        }
        Ok(Square((b[0] - b'a') + 8 * (b[1] - b'1')))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    White,
    Black,
}

impl Color {
    #[inline]
    pub fn opposite(self) -> Color {
        match self {
            Color::White => Color::Black,
            Color::Black => Color::White,
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::White => "white",
            Color::Black => "black",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PieceKind {
    Pawn,
    Knight,
    Bishop,
    Rook,
    Queen,
    King,
}

impl PieceKind {
    pub const ALL: [PieceKind; 6] =
        [PieceKind::Pawn, PieceKind::Knight, PieceKind::Bishop, PieceKind::Rook, PieceKind::Queen, PieceKind::King];
    pub const PROMOTIONS: [PieceKind; 4] = [PieceKind::Knight, PieceKind::Bishop, PieceKind::Rook, PieceKind::Queen];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Lowercase letter used by FEN and UCI.
    pub fn letter(self) -> char {
        match self {
            PieceKind::Pawn => 'p',
            PieceKind::Knight => 'n',
            PieceKind::Bishop => 'b',
            PieceKind::Rook => 'r',
            PieceKind::Queen => 'q',
            PieceKind::King => 'k',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Some(match c.to_ascii_lowercase() {
            'p' => PieceKind::Pawn,
            'n' => PieceKind::Knight,
            'b' => PieceKind::Bishop,
            'r' => PieceKind::Rook,
            'q' => PieceKind::Queen,
            'k' => PieceKind::King,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Piece {
    pub color: Color,
    pub kind: PieceKind,
}

impl Piece {
    pub const fn new(color: Color, kind: PieceKind) -> Self {
        Piece { color, kind }
    }

    /// Plane index in `0..12`: white pawn .. white king, black pawn .. black king.
    #[inline]
    pub fn plane(self) -> usize {
        self.color.index() * 6 + self.kind.index()
    }

    pub fn fen_char(self) -> char {
        let c = self.kind.letter();
        match self.color {
            Color::White => c.to_ascii_uppercase(),
            Color::Black => c,
        }
    }

    pub fn from_fen_char(c: char) -> Option<Self> {
        let kind = PieceKind::from_letter(c)?;
        let color = if c.is_ascii_uppercase() { Color::White } else { Color::Black };
        Some(Piece { color, kind })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct CastlingRights {
    pub white_king: bool,
    pub white_queen: bool,
    pub black_king: bool,
    pub black_queen: bool,
}

impl CastlingRights {
    pub const ALL: CastlingRights =
        CastlingRights { white_king: true, white_queen: true, black_king: true, black_queen: true };

    pub fn as_array(self) -> [bool; 4] {
        [self.white_king, self.white_queen, self.black_king, self.black_queen]
    }
}

/// A move in coordinate form. Castling is encoded as the king's two-square move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Move {
    pub from: Square,
    pub to: Square,
    pub promotion: Option<PieceKind>,
}

impl Move {
    pub fn new(from: Square, to: Square) -> Self {
        Move { from, to, promotion: None }
    }

    pub fn with_promotion(from: Square, to: Square, kind: PieceKind) -> Self {
        Move { from, to, promotion: Some(kind) }
    }

    pub fn to_uci(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.from, self.to)?;
        if let Some(p) = self.promotion {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UciError {
    #[error("UCI move {0:?} must be 4 or 5 characters")]
    Length(String),
    #[error("UCI move {text:?} has an invalid square {square:?}")]
    Square { text: String, square: String },
    #[error("UCI move {0:?} has an invalid promotion letter")]
    Promotion(String),
    #[error("UCI move {0:?} has identical source and destination")]
    NullMove(String),
}

/// Parses a move in UCI coordinate notation (`e2e4`, `e7e8q`).
pub fn parse_uci(text: &str) -> Result<Move, UciError> {
    if !text.is_ascii() || !(4..=5).contains(&text.len()) {
        return Err(UciError::Length(text.to_string()));
    }
    let square =
        |s: &str| s.parse::<Square>().map_err(|_| UciError::Square { text: text.to_string(), square: s.to_string() });
    let from = square(&text[0..2])?;
    let to = square(&text[2..4])?;
    if from == to {
        return Err(UciError::NullMove(text.to_string()));
    }
    let promotion = match text[4..].chars().next() {
        None => None,
        Some(c) => match PieceKind::from_letter(c) {
            Some(k) if PieceKind::PROMOTIONS.contains(&k) && c.is_ascii_lowercase() => Some(k),
            _ => return Err(UciError::Promotion(text.to_string())),
        },
    };
    Ok(Move { from, to, promotion })
}

impl FromStr for Move {
    type Err = UciError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_uci(s)
    }
}

/// Violations of the structural position invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PositionError {
    #[error("{color} has {count} kings, expected exactly one")]
    KingCount { color: Color, count: usize },
    #[error("{color} has {count} pawns, at most 8 allowed")]
    TooManyPawns { color: Color, count: usize },
    #[error("pawn on back rank square {0}")]
    PawnOnBackRank(Square),
    #[error("side not to move ({0}) is in check")]
    OpponentInCheck(Color),
    #[error("en-passant square {0} is inconsistent with the board")]
    EnPassant(Square),
    #[error("fullmove number must be at least 1")]
    FullmoveNumber,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MoveError {
    #[error("illegal move {mv} in position {fen}")]
    Illegal { mv: Move, fen: String },
}

/// Full chess state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Position {
    board: [Option<Piece>; 64],
    side_to_move: Color,
    castling: CastlingRights,
    en_passant: Option<Square>,
    halfmove_clock: u32,
    fullmove_number: u32,
}

pub const START_FEN: &str = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1";

impl Position {
    pub fn startpos() -> Self {
        parse_fen(START_FEN).expect("start FEN is valid")
    }

    /// Builds a position and checks every invariant.
    pub fn from_parts(
        board: [Option<Piece>; 64],
        side_to_move: Color,
        castling: CastlingRights,
        en_passant: Option<Square>,
        halfmove_clock: u32,
        fullmove_number: u32,
    ) -> Result<Self, PositionError> {
        let p = Position { board, side_to_move, castling, en_passant, halfmove_clock, fullmove_number };
        p.validate()?;
        Ok(p)
    }

    #[inline]
    pub fn piece_at(&self, sq: Square) -> Option<Piece> {
        self.board[sq.index()]
    }

    pub fn board(&self) -> &[Option<Piece>; 64] {
        &self.board
    }

    pub fn side_to_move(&self) -> Color {
        self.side_to_move
    }

    pub fn castling(&self) -> CastlingRights {
        self.castling
    }

    pub fn en_passant(&self) -> Option<Square> {
        self.en_passant
    }

    pub fn halfmove_clock(&self) -> u32 {
        self.halfmove_clock
    }

    pub fn fullmove_number(&self) -> u32 {
        self.fullmove_number
    }

    pub fn king_square(&self, color: Color) -> Option<Square> {
        Square::all().find(|&sq| self.board[sq.index()] == Some(Piece::new(color, PieceKind::King)))
    }

    pub fn count(&self, piece: Piece) -> usize {
        self.board.iter().filter(|p| **p == Some(piece)).count()
    }

    /// Whether `en_passant` is consistent with the placement: correct rank,
    /// empty target and origin squares, and the double-pushed pawn present.
    fn en_passant_consistent(&self, ep: Square) -> bool {
        let (rank, pawn_dr, pusher) = match self.side_to_move {
            Color::White => (5, -1, Color::Black),
            Color::Black => (2, 1, Color::White),
        };
        if ep.rank() != rank || self.board[ep.index()].is_some() {
            return false;
        }
        let pawn_sq = ep.offset(0, pawn_dr);
        let origin = ep.offset(0, -pawn_dr);
        matches!(pawn_sq.and_then(|s| self.board[s.index()]), Some(p) if p == Piece::new(pusher, PieceKind::Pawn))
            && origin.is_some_and(|s| self.board[s.index()].is_none())
    }

    pub fn validate(&self) -> Result<(), PositionError> {
        for color in [Color::White, Color::Black] {
            let kings = self.count(Piece::new(color, PieceKind::King));
            if kings != 1 {
                return Err(PositionError::KingCount { color, count: kings });
            }
            let pawns = self.count(Piece::new(color, PieceKind::Pawn));
            if pawns > 8 {
                return Err(PositionError::TooManyPawns { color, count: pawns });
            }
        }
        for sq in Square::all() {
            if matches!(self.board[sq.index()], Some(p) if p.kind == PieceKind::Pawn)
                && (sq.rank() == 0 || sq.rank() == 7)
            {
                return Err(PositionError::PawnOnBackRank(sq));
            }
        }
        if let Some(ep) = self.en_passant {
            if !self.en_passant_consistent(ep) {
                return Err(PositionError::EnPassant(ep));
            }
        }
        if self.fullmove_number == 0 {
            return Err(PositionError::FullmoveNumber);
        }
        let them = self.side_to_move.opposite();
        if self.in_check_color(them) {
            return Err(PositionError::OpponentInCheck(them));
        }
        Ok(())
    }

    pub fn in_check(&self) -> bool {
        self.in_check_color(self.side_to_move)
    }

    fn in_check_color(&self, color: Color) -> bool {
        match self.king_square(color) {
            Some(k) => self.is_attacked(k, color.opposite()),
            None => false,
        }
    }

    pub fn legal_moves(&self) -> Vec<Move> {
        movegen::legal_moves(self)
    }

    pub fn is_legal(&self, m: Move) -> bool {
        self.legal_moves().contains(&m)
    }

    pub fn is_checkmate(&self) -> bool {
        self.in_check() && self.legal_moves().is_empty()
    }

    pub fn is_stalemate(&self) -> bool {
        !self.in_check() && self.legal_moves().is_empty()
    }

    /// Plays a legal move.
    pub fn apply_move(&self, m: Move) -> Result<Position, MoveError> {
        if !self.is_legal(m) {
            return Err(MoveError::Illegal { mv: m, fen: self.to_fen() });
        }
        Ok(movegen::make_move(self, m))
    }

    pub fn to_fen(&self) -> String {
        fen::emit_fen(self)
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_fen())
    }
}

impl FromStr for Position {
    type Err = FenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_fen(s)
    }
}

pub fn parse_fen(text: &str) -> Result<Position, FenError> {
    fen::parse_fen(text)
}

pub fn emit_fen(p: &Position) -> String {
    fen::emit_fen(p)
}

pub fn legal_moves(p: &Position) -> Vec<Move> {
    p.legal_moves()
}

pub fn apply_move(p: &Position, m: Move) -> Result<Position, MoveError> {
    p.apply_move(m)
}

pub fn is_checkmate(p: &Position) -> bool {
    p.is_checkmate()
}

/// Counts leaf nodes of the legal move tree to `depth`.
pub fn perft(p: &Position, depth: u32) -> u64 {
    if depth == 0 {
        return 1;
    }
    let moves = p.legal_moves();
    if depth == 1 {
        return moves.len() as u64;
    }
    moves.iter().map(|&m| perft(&movegen::make_move(p, m), depth - 1)).sum()
}
