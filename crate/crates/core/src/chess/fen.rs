// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

use super::{CastlingRights, Color, Piece, Position, PositionError, Square};

/// FEN parse failures. Each variant names the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FenError {
    #[error("FEN must have 6 space-separated fields, found {0}")]
    FieldCount(usize),
    #[error("piece placement: {0}")]
    Placement(String),
    #[error("side to move: expected 'w' or 'b', found {0:?}")]
    SideToMove(String),
    #[error("castling availability: invalid field {0:?}")]
    Castling(String),
    #[error("en passant: invalid field {0:?}")]
    EnPassant(String),
    #[error("halfmove clock: invalid field {0:?}")]
    HalfmoveClock(String),
    #[error("fullmove number: invalid field {0:?}")]
    FullmoveNumber(String),
    #[error("position invariant: {0}")]
    Invalid(#[from] PositionError),
}

pub(super) fn parse_fen(text: &str) -> Result<Position, FenError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 6 {
        return Err(FenError::FieldCount(fields.len()));
    }

    let board = parse_placement(fields[0])?;

    let side_to_move = match fields[1] {
        "w" => Color::White,
        "b" => Color::Black,
        other => return Err(FenError::SideToMove(other.to_string())),
    };

    let castling = parse_castling(fields[2])?;

    let en_passant = match fields[3] {
        "-" => None,
        s => Some(s.parse::<Square>().map_err(|_| FenError::EnPassant(s.to_string()))?),
    };

    let halfmove_clock = fields[4].parse::<u32>().map_err(|_| FenError::HalfmoveClock(fields[4].to_string()))?;
    let fullmove_number = match fields[5].parse::<u32>() {
        Ok(n) if n >= 1 => n,
        _ => return Err(FenError::FullmoveNumber(fields[5].to_string())),
    };

    Ok(Position::from_parts(board, side_to_move, castling, en_passant, halfmove_clock, fullmove_number)?)
}

fn parse_placement(field: &str) -> Result<[Option<Piece>; 64], FenError> {
    let mut board = [None; 64];
    let ranks: Vec<&str> = field.split('/').collect();
    if ranks.len() != 8 {
        return Err(FenError::Placement(format!("expected 8 ranks, found {}", ranks.len())));
    }
    for (i, rank_text) in ranks.iter().enumerate() {
        let rank = 7 - i as u8;
        let mut file = 0u8;
        let mut last_was_digit = false;
        for c in rank_text.chars() {
            if let Some(d) = c.to_digit(10) {
                if !(1..=8).contains(&d) || last_was_digit {
                    return Err(FenError::Placement(format!("bad empty-square run in rank {}", rank + 1)));
                }
                file += d as u8;
                last_was_digit = true;
            } else {
                let piece = Piece::from_fen_char(c)
                    .ok_or_else(|| FenError::Placement(format!("invalid piece letter {c:?}")))?;
                if file >= 8 {
                    return Err(FenError::Placement(format!("rank {} overflows", rank + 1)));
                }
                board[(file + 8 * rank) as usize] = Some(piece);
                file += 1;
                last_was_digit = false;
            }
            if file > 8 {
                return Err(FenError::Placement(format!("rank {} overflows", rank + 1)));
            }
        }
        if file != 8 {
            return Err(FenError::Placement(format!("rank {} has {} files", rank + 1, file)));
        }
    }
    Ok(board)
}

fn parse_castling(field: &str) -> Result<CastlingRights, FenError> {
    let mut rights = CastlingRights::default();
    if field == "-" {
        return Ok(rights);
    }
    // Canonical order KQkq, each letter at most once.
    let mut last = -1i32;
    for c in field.chars() {
        let (slot, order) = match c {
            'K' => (&mut rights.white_king, 0),
            'Q' => (&mut rights.white_queen, 1),
            'k' => (&mut rights.black_king, 2),
            'q' => (&mut rights.black_queen, 3),
            _ => return Err(FenError::Castling(field.to_string())),
        };
        if order <= last {
            return Err(FenError::Castling(field.to_string()));
        }
        last = order;
        *slot = true;
    }
    Ok(rights)
}

pub(super) fn emit_fen(p: &Position) -> String {
    let mut out = String::with_capacity(90);
    for rank in (0..8u8).rev() {
        let mut empty = 0;
        for file in 0..8u8 {
            match p.board[(file + 8 * rank) as usize] {
                None => empty += 1,
                Some(piece) => {
                    if empty > 0 {
                        out.push(char::from(b'0' + empty));
                        empty = 0;
                    }
                    out.push(piece.fen_char());
                }
            }
        }
        if empty > 0 {
            out.push(char::from(b'0' + empty));
        }
        if rank > 0 {
            out.push('/');
        }
    }
    out.push(' ');
    out.push(match p.side_to_move {
        Color::White => 'w',
        Color::Black => 'b',
    });
    out.push(' ');
    let c = p.castling;
    let mut any = false;
    for (flag, ch) in [(c.white_king, 'K'), (c.white_queen, 'Q'), (c.black_king, 'k'), (c.black_queen, 'q')] {
        if flag {
            out.push(ch);
            any = true;
        }
    }
    if !any {
        out.push('-');
    }
    out.push(' ');
    match p.en_passant {
        Some(sq) => out.push_str(&sq.to_string()),
        None => out.push('-'),
    }
    out.push_str(&format!(" {} {}", p.halfmove_clock, p.fullmove_number));
    out
}
