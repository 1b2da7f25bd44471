// SPDX-License-Identifier: MIT OR Apache-2.0

//! Puzzle-set notation.
//!
//! A label assigns each move square a digit in order of first use, so the
//! destination squares `[e5, e5, f7]` label as `112`. Patterns query labels:
//! `A`..`D` bind pairwise-distinct digits, `X`..`Z` match any digit, and a
//! leading or trailing `...` lets the pattern float against the label end or
//! start. Labels may carry an `M` (ends in mate) or `N` prefix, and branch
//! labels render as `main/alt` with the alternative branch continuing the
//! main branch's numbering.
//!
//! Digits above 9 render in brackets (`[10]`), which only long extended
//! labels ever need.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chess::{Move, Position, Square};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("cannot label an empty sequence")]
    Empty,
    #[error("digits {0:?} are not in sequential first-use order")]
    NotSequential(Vec<u32>),
    #[error("invalid label text {0:?}")]
    Syntax(String),
    #[error("invalid pattern {text:?}: {reason}")]
    Pattern { text: String, reason: String },
    #[error("branch labels need two 3-move branches, got {0} and {1} moves")]
    BranchLength(usize, usize),
    #[error("principal variation is not legal from the start position: {0}")]
    IllegalLine(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MateFlag {
    /// `M`: the line ends in checkmate.
    Mate,
    /// `N`: it does not.
    NonMate,
}

impl MateFlag {
    pub fn letter(self) -> char {
        match self {
            MateFlag::Mate => 'M',
            MateFlag::NonMate => 'N',
        }
    }
}

/// Labels items by order of first appearance, starting at 1.
pub fn first_use_digits<T: Eq + Hash + Copy>(items: &[T]) -> Vec<u32> {
    let mut table: HashMap<T, u32> = HashMap::new();
    items
        .iter()
        .map(|item| {
            let next = table.len() as u32 + 1;
            *table.entry(*item).or_insert(next)
        })
        .collect()
}

fn is_sequential(digits: &[u32]) -> bool {
    let mut max = 0;
    for &d in digits {
        if d == 0 || d > max + 1 {
            return false;
        }
        max = max.max(d);
    }
    true
}

fn write_digits(f: &mut fmt::Formatter<'_>, digits: &[u32]) -> fmt::Result {
    for &d in digits {
        if d < 10 {
            write!(f, "{d}")?;
        } else {
            write!(f, "[{d}]")?;
        }
    }
    Ok(())
}

/// Reads digits, accepting bracketed multi-digit numbers.
fn read_digits(text: &str) -> Option<Vec<u32>> {
    let mut out = Vec::new();
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c == '[' {
            let num: String = chars.by_ref().take_while(|&c| c != ']').collect();
            out.push(num.parse().ok()?);
        } else {
            out.push(c.to_digit(10)?);
        }
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SetLabel {
    digits: Vec<u32>,
    mate: Option<MateFlag>,
}

impl SetLabel {
    pub fn from_digits(digits: Vec<u32>, mate: Option<MateFlag>) -> Result<Self, LabelError> {
        if digits.is_empty() {
            return Err(LabelError::Empty);
        }
        if !is_sequential(&digits) {
            return Err(LabelError::NotSequential(digits));
        }
        Ok(SetLabel { digits, mate })
    }

    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    pub fn mate(&self) -> Option<MateFlag> {
        self.mate
    }

    pub fn with_mate(mut self, mate: MateFlag) -> Self {
        self.mate = Some(mate);
        self
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }
}

impl fmt::Display for SetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(m) = self.mate {
            write!(f, "{}", m.letter())?;
        }
        write_digits(f, &self.digits)
    }
}

impl FromStr for SetLabel {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (mate, rest) = match s.chars().next() {
            Some('M') => (Some(MateFlag::Mate), &s[1..]),
            Some('N') => (Some(MateFlag::NonMate), &s[1..]),
            _ => (None, s),
        };
        let digits = read_digits(rest).ok_or_else(|| LabelError::Syntax(s.to_string()))?;
        SetLabel::from_digits(digits, mate)
    }
}

/// Labels a sequence of move-destination squares.
pub fn classify(destinations: &[Square]) -> Result<SetLabel, LabelError> {
    if destinations.is_empty() {
        return Err(LabelError::Empty);
    }
    Ok(SetLabel { digits: first_use_digits(destinations), mate: None })
}

/// `M` if playing the whole line from `start` ends in checkmate, else `N`.
pub fn mate_prefix(start: &Position, pv: &[Move]) -> Result<MateFlag, LabelError> {
    if pv.is_empty() {
        return Err(LabelError::Empty);
    }
    let mut pos = start.clone();
    for &m in pv {
        pos = pos.apply_move(m).map_err(|e| LabelError::IllegalLine(e.to_string()))?;
    }
    Ok(if pos.is_checkmate() { MateFlag::Mate } else { MateFlag::NonMate })
}

/// Label with starting squares interleaved: `from1 to1 from2 to2 ...`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExtendedLabel {
    digits: Vec<u32>,
}

impl ExtendedLabel {
    pub fn digits(&self) -> &[u32] {
        &self.digits
    }

    /// The destination-only digits, relabeled by first use.
    pub fn destinations(&self) -> SetLabel {
        let dest: Vec<u32> = self.digits.iter().skip(1).step_by(2).copied().collect();
        SetLabel { digits: first_use_digits(&dest), mate: None }
    }
}

impl fmt::Display for ExtendedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_digits(f, &self.digits)
    }
}

pub fn classify_with_starts(pv: &[Move]) -> Result<ExtendedLabel, LabelError> {
    if pv.is_empty() {
        return Err(LabelError::Empty);
    }
    let squares: Vec<Square> = pv.iter().flat_map(|m| [m.from, m.to]).collect();
    Ok(ExtendedLabel { digits: first_use_digits(&squares) })
}

/// Destination labels for a main branch and an alternative branch sharing one
/// square table.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BranchLabel {
    pub main_digits: Vec<u32>,
    pub alt_digits: Vec<u32>,
}

impl fmt::Display for BranchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_digits(f, &self.main_digits)?;
        f.write_str("/")?;
        write_digits(f, &self.alt_digits)
    }
}

pub fn branch_label(main: &[Move], alt: &[Move]) -> Result<BranchLabel, LabelError> {
    if main.len() != 3 || alt.len() != 3 {
        return Err(LabelError::BranchLength(main.len(), alt.len()));
    }
    let squares: Vec<Square> = main.iter().chain(alt).map(|m| m.to).collect();
    let digits = first_use_digits(&squares);
    Ok(BranchLabel { main_digits: digits[..3].to_vec(), alt_digits: digits[3..].to_vec() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatternToken {
    Digit(u32),
    /// `A`..`D`: same letter, same digit; different letters, different digits.
    Bound(char),
    /// `X`..`Z`: any digit.
    Wildcard(char),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SetPattern {
    tokens: Vec<PatternToken>,
    leading_ellipsis: bool,
    trailing_ellipsis: bool,
    mate: Option<MateFlag>,
}

impl SetPattern {
    pub fn tokens(&self) -> &[PatternToken] {
        &self.tokens
    }

    /// False when the pattern starts with `...` and so may match a suffix.
    pub fn anchored_prefix(&self) -> bool {
        !self.leading_ellipsis
    }

    pub fn anchored_suffix(&self) -> bool {
        !self.trailing_ellipsis
    }

    pub fn mate(&self) -> Option<MateFlag> {
        self.mate
    }

    /// The pattern that matches exactly this label.
    pub fn literal(label: &SetLabel) -> SetPattern {
        SetPattern {
            tokens: label.digits.iter().map(|&d| PatternToken::Digit(d)).collect(),
            leading_ellipsis: false,
            trailing_ellipsis: false,
            mate: label.mate,
        }
    }

    pub fn matches(&self, label: &SetLabel) -> bool {
        pattern_match(label, self)
    }
}

impl fmt::Display for SetPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(m) = self.mate {
            write!(f, "{}", m.letter())?;
        }
        if self.leading_ellipsis {
            f.write_str("...")?;
        }
        for t in &self.tokens {
            match *t {
                PatternToken::Digit(d) if d < 10 => write!(f, "{d}")?,
                PatternToken::Digit(d) => write!(f, "[{d}]")?,
                PatternToken::Bound(c) | PatternToken::Wildcard(c) => write!(f, "{c}")?,
            }
        }
        if self.trailing_ellipsis {
            f.write_str("...")?;
        }
        Ok(())
    }
}

impl FromStr for SetPattern {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_pattern(s)
    }
}

pub fn parse_pattern(text: &str) -> Result<SetPattern, LabelError> {
    let err = |reason: &str| LabelError::Pattern { text: text.to_string(), reason: reason.to_string() };
    let mut rest = text;
    let mate = match rest.chars().next() {
        Some('M') => Some(MateFlag::Mate),
        Some('N') => Some(MateFlag::NonMate),
        _ => None,
    };
    if mate.is_some() {
        rest = &rest[1..];
    }
    let leading_ellipsis = rest.starts_with("...");
    if leading_ellipsis {
        rest = &rest[3..];
    }
    let trailing_ellipsis = rest.ends_with("...");
    if trailing_ellipsis {
        rest = &rest[..rest.len() - 3];
    }

    let mut tokens = Vec::new();
    let mut chars = rest.chars();
    while let Some(c) = chars.next() {
        let token = match c {
            '1'..='9' => PatternToken::Digit(c.to_digit(10).unwrap()),
            '[' => {
                let num: String = chars.by_ref().take_while(|&c| c != ']').collect();
                match num.parse::<u32>() {
                    Ok(d) if d >= 1 => PatternToken::Digit(d),
                    _ => return Err(err("bad bracketed digit")),
                }
            }
            'A'..='D' => PatternToken::Bound(c),
            'X'..='Z' => PatternToken::Wildcard(c),
            '.' => return Err(err("ellipsis only allowed at the start or end")),
            _ => return Err(err(&format!("unexpected character {c:?}"))),
        };
        tokens.push(token);
    }
    if tokens.is_empty() {
        return Err(err("no tokens"));
    }
    Ok(SetPattern { tokens, leading_ellipsis, trailing_ellipsis, mate })
}

fn window_matches(window: &[u32], tokens: &[PatternToken]) -> bool {
    let mut bound: [Option<u32>; 4] = [None; 4];
    for (&digit, token) in window.iter().zip(tokens) {
        match *token {
            PatternToken::Digit(d) => {
                if d != digit {
                    return false;
                }
            }
            PatternToken::Wildcard(_) => {}
            PatternToken::Bound(c) => {
                let slot = (c as u8 - b'A') as usize;
                match bound[slot] {
                    Some(d) if d != digit => return false,
                    Some(_) => {}
                    None => {
                        if bound.iter().flatten().any(|&d| d == digit) {
                            return false;
                        }
                        bound[slot] = Some(digit);
                    }
                }
            }
        }
    }
    true
}

/// Whether some assignment of digits to the pattern letters matches the
/// label, with the ellipses deciding which windows of the label are tried.
pub fn pattern_match(label: &SetLabel, pattern: &SetPattern) -> bool {
    if let Some(m) = pattern.mate {
        if label.mate != Some(m) {
            return false;
        }
    }
    let n = label.digits.len();
    let k = pattern.tokens.len();
    if k > n {
        return false;
    }
    let offsets: Vec<usize> = match (pattern.leading_ellipsis, pattern.trailing_ellipsis) {
        (false, false) if k == n => vec![0],
        (false, false) => vec![],
        (true, false) => vec![n - k],
        (false, true) => vec![0],
        (true, true) => (0..=n - k).collect(),
    };
    offsets.into_iter().any(|o| window_matches(&label.digits[o..o + k], &pattern.tokens))
}
