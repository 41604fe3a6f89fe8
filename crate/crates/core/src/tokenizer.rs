//! Extended REMI tokens: vocabulary, bar encoding with optional
//! bar-count-down, grammar-checked decoding and MIDI quantization.
//!
//! A bar is always emitted as `Bar Struct Tempo (Position Pitch Duration)*`.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_BARS: usize = 32;
pub const MAX_STRUCT: u8 = 15;
pub const TEMPO_MIN: u16 = 28;
pub const TEMPO_MAX: u16 = 212;
pub const TEMPO_STEP: u16 = 4;
pub const POSITIONS_PER_BAR: u8 = 16;
pub const PITCH_MIN: u8 = 22;
pub const PITCH_MAX: u8 = 107;
pub const DURATION_MAX: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Bar,
    Struct,
    Tempo,
    Position,
    Pitch,
    Duration,
    Bos,
    Sep,
    Eos,
}

impl TokenKind {
    pub const CONTENT: [TokenKind; 6] = [TokenKind::Bar, TokenKind::Struct, TokenKind::Tempo, TokenKind::Position, TokenKind::Pitch, TokenKind::Duration];

    /// Number of vocabulary entries of this kind.
    pub const fn size(self) -> usize {
        match self {
            TokenKind::Bar => 32,
            TokenKind::Struct => 16,
            TokenKind::Tempo => 47,
            TokenKind::Position => 16,
            TokenKind::Pitch => 86,
            TokenKind::Duration => 16,
            TokenKind::Bos | TokenKind::Sep | TokenKind::Eos => 1,
        }
    }

    /// First vocabulary id of this kind.
    pub const fn base(self) -> usize {
        match self {
            TokenKind::Bar => 0,
            TokenKind::Struct => 32,
            TokenKind::Tempo => 48,
            TokenKind::Position => 95,
            TokenKind::Pitch => 111,
            TokenKind::Duration => 197,
            TokenKind::Bos => 213,
            TokenKind::Sep => 214,
            TokenKind::Eos => 215,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            TokenKind::Bar => "BAR",
            TokenKind::Struct => "STRUCT",
            TokenKind::Tempo => "TEMPO",
            TokenKind::Position => "POS",
            TokenKind::Pitch => "PITCH",
            TokenKind::Duration => "DUR",
            TokenKind::Bos => "BOS",
            TokenKind::Sep => "SEP",
            TokenKind::Eos => "EOS",
        }
    }

    pub fn is_special(self) -> bool {
        matches!(self, TokenKind::Bos | TokenKind::Sep | TokenKind::Eos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Bar(u8),
    Struct(u8),
    Tempo(u16),
    Position(u8),
    Pitch(u8),
    Duration(u8),
    Bos,
    Sep,
    Eos,
}

impl Token {
    pub fn kind(self) -> TokenKind {
        match self {
            Token::Bar(_) => TokenKind::Bar,
            Token::Struct(_) => TokenKind::Struct,
            Token::Tempo(_) => TokenKind::Tempo,
            Token::Position(_) => TokenKind::Position,
            Token::Pitch(_) => TokenKind::Pitch,
            Token::Duration(_) => TokenKind::Duration,
            Token::Bos => TokenKind::Bos,
            Token::Sep => TokenKind::Sep,
            Token::Eos => TokenKind::Eos,
        }
    }

    pub fn value(self) -> Option<i64> {
        match self {
            Token::Bar(v) | Token::Struct(v) | Token::Position(v) | Token::Pitch(v) | Token::Duration(v) => Some(v as i64),
            Token::Tempo(v) => Some(v as i64),
            Token::Bos | Token::Sep | Token::Eos => None,
        }
    }

    /// Builds a token from a kind and payload, checking the payload range.
    pub fn new(kind: TokenKind, value: i64) -> Result<Token> {
        let range_err = || Error::Range { kind, value };
        let small = |lo: i64, hi: i64| if (lo..=hi).contains(&value) { Ok(value as u8) } else { Err(range_err()) };
        Ok(match kind {
            TokenKind::Bar => Token::Bar(small(1, MAX_BARS as i64)?),
            TokenKind::Struct => Token::Struct(small(0, MAX_STRUCT as i64)?),
            TokenKind::Tempo => {
                let ok = (TEMPO_MIN as i64..=TEMPO_MAX as i64).contains(&value) && (value - TEMPO_MIN as i64) % TEMPO_STEP as i64 == 0;
                if !ok {
                    return Err(range_err());
                }
                Token::Tempo(value as u16)
            }
            TokenKind::Position => Token::Position(small(0, POSITIONS_PER_BAR as i64 - 1)?),
            TokenKind::Pitch => Token::Pitch(small(PITCH_MIN as i64, PITCH_MAX as i64)?),
            TokenKind::Duration => Token::Duration(small(1, DURATION_MAX as i64)?),
            TokenKind::Bos => Token::Bos,
            TokenKind::Sep => Token::Sep,
            TokenKind::Eos => Token::Eos,
        })
    }

    /// Re-validates the payload of an already constructed token.
    pub fn checked(self) -> Result<Token> {
        Token::new(self.kind(), self.value().unwrap_or(0))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{}({})", self.kind().tag(), v),
            None => f.write_str(self.kind().tag()),
        }
    }
}

impl FromStr for Token {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (tag, value) = match s.find('(') {
            Some(open) => {
                let inner = s[open + 1..].strip_suffix(')').ok_or_else(|| format!("unterminated token `{s}`"))?;
                let v: i64 = inner.parse().map_err(|_| format!("bad payload in `{s}`"))?;
                (&s[..open], Some(v))
            }
            None => (s, None),
        };
        let kind =
            [TokenKind::Bar, TokenKind::Struct, TokenKind::Tempo, TokenKind::Position, TokenKind::Pitch, TokenKind::Duration, TokenKind::Bos, TokenKind::Sep, TokenKind::Eos]
                .into_iter()
                .find(|k| k.tag() == tag)
                .ok_or_else(|| format!("unknown token `{s}`"))?;
        match (kind.is_special(), value) {
            (true, None) => Token::new(kind, 0).map_err(|e| e.to_string()),
            (false, Some(v)) => Token::new(kind, v).map_err(|e| e.to_string()),
            _ => Err(format!("payload mismatch in `{s}`")),
        }
    }
}

/// Dense id mapping for the 213 content tokens followed by BOS, SEP, EOS.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocabulary;

impl Vocabulary {
    pub const SIZE: usize = 216;
    pub const CONTENT_SIZE: usize = 213;

    pub fn id_of(token: Token) -> usize {
        let kind = token.kind();
        let offset = match token {
            Token::Bar(v) => v as usize - 1,
            Token::Struct(v) | Token::Position(v) => v as usize,
            Token::Tempo(v) => ((v - TEMPO_MIN) / TEMPO_STEP) as usize,
            Token::Pitch(v) => (v - PITCH_MIN) as usize,
            Token::Duration(v) => v as usize - 1,
            Token::Bos | Token::Sep | Token::Eos => 0,
        };
        kind.base() + offset
    }

    pub fn token_of(id: usize) -> Option<Token> {
        let kind =
            [TokenKind::Eos, TokenKind::Sep, TokenKind::Bos, TokenKind::Duration, TokenKind::Pitch, TokenKind::Position, TokenKind::Tempo, TokenKind::Struct, TokenKind::Bar]
                .into_iter()
                .find(|k| id >= k.base())?;
        let offset = id - kind.base();
        if offset >= kind.size() {
            return None;
        }
        let o = offset as i64;
        let value = match kind {
            TokenKind::Bar | TokenKind::Duration => o + 1,
            TokenKind::Struct | TokenKind::Position => o,
            TokenKind::Tempo => TEMPO_MIN as i64 + o * TEMPO_STEP as i64,
            TokenKind::Pitch => PITCH_MIN as i64 + o,
            _ => 0,
        };
        Token::new(kind, value).ok()
    }

    /// Id range covered by one token kind.
    pub fn kind_range(kind: TokenKind) -> std::ops::Range<usize> {
        kind.base()..kind.base() + kind.size()
    }
}

/// Ordered token list with text serialization (`BAR(2) STRUCT(1) ...`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<Token>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn ids(&self) -> Vec<usize> {
        self.0.iter().map(|&t| Vocabulary::id_of(t)).collect()
    }

    pub fn bar_count(&self) -> usize {
        self.0.iter().filter(|t| t.kind() == TokenKind::Bar).count()
    }

    pub fn bar_values(&self) -> Vec<u8> {
        self.0.iter().filter_map(|t| if let Token::Bar(v) = t { Some(*v) } else { None }).collect()
    }
}

impl Deref for TokenSeq {
    type Target = Vec<Token>;
    fn deref(&self) -> &Vec<Token> {
        &self.0
    }
}

impl DerefMut for TokenSeq {
    fn deref_mut(&mut self) -> &mut Vec<Token> {
        &mut self.0
    }
}

impl FromIterator<Token> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for TokenSeq {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split_whitespace().enumerate().map(|(index, w)| w.parse::<Token>().map_err(|reason| Error::Parse { index, reason })).collect()
    }
}

/// A quantized note on the 16th-note grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub bar_index: u32,
    pub position: u8,
    pub pitch: u8,
    pub duration: u8,
    pub tempo_bpm: u16,
}

/// One bar of notes with its bar-start tempo.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bar {
    pub tempo_bpm: u16,
    pub notes: Vec<NoteEvent>,
}

impl Bar {
    pub fn empty(tempo_bpm: u16) -> Self {
        Self { tempo_bpm, notes: Vec::new() }
    }
}

/// Encodes bars as `Bar Struct Tempo (Position Pitch Duration)*` groups.
///
/// With `countdown`, the Bar payloads run `n, n-1, ..., 1`; otherwise each
/// bar carries its 1-based ordinal (clipped to 32).
pub fn encode_bars(bars: &[Bar], struct_ids: &[u8], countdown: bool) -> Result<TokenSeq> {
    if bars.len() > MAX_BARS && countdown {
        return Err(Error::Capacity(format!("{} bars exceed the {MAX_BARS}-bar countdown limit", bars.len())));
    }
    if struct_ids.len() != bars.len() {
        return Err(Error::Coverage(format!("{} structure ids for {} bars", struct_ids.len(), bars.len())));
    }
    let n = bars.len();
    let mut out = TokenSeq::new();
    for (i, (bar, &sid)) in bars.iter().zip(struct_ids).enumerate() {
        let bar_value = if countdown { n - i } else { (i + 1).min(MAX_BARS) };
        out.push(Token::new(TokenKind::Bar, bar_value as i64)?);
        out.push(Token::new(TokenKind::Struct, sid as i64)?);
        out.push(Token::new(TokenKind::Tempo, bar.tempo_bpm as i64)?);
        let mut notes: Vec<&NoteEvent> = bar.notes.iter().collect();
        notes.sort_by_key(|n| (n.position, n.pitch));
        for note in notes {
            out.push(Token::new(TokenKind::Position, note.position as i64)?);
            out.push(Token::new(TokenKind::Pitch, note.pitch as i64)?);
            out.push(Token::new(TokenKind::Duration, note.duration as i64)?);
        }
    }
    Ok(out)
}

/// Bars decoded from a token sequence, with the Bar and Struct payloads seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedBars {
    pub bars: Vec<Bar>,
    pub bar_values: Vec<u8>,
    pub struct_ids: Vec<u8>,
}

/// Inverse of [`encode_bars`]. Note `bar_index` values are relative to the
/// start of the sequence.
pub fn decode(seq: &[Token]) -> Result<Vec<Bar>> {
    decode_full(seq).map(|d| d.bars)
}

pub fn decode_full(seq: &[Token]) -> Result<DecodedBars> {
    let mut out = DecodedBars { bars: Vec::new(), bar_values: Vec::new(), struct_ids: Vec::new() };
    let err = |index: usize, reason: &str| Error::Grammar { index, reason: reason.to_string() };
    let mut i = 0;
    while i < seq.len() {
        let Token::Bar(bv) = seq[i] else { return Err(err(i, "expected Bar")) };
        let Some(&Token::Struct(sid)) = seq.get(i + 1) else { return Err(err(i + 1, "expected Struct after Bar")) };
        let Some(&Token::Tempo(tempo)) = seq.get(i + 2) else { return Err(err(i + 2, "expected Tempo after Struct")) };
        let bar_index = out.bars.len() as u32;
        let mut bar = Bar::empty(tempo);
        i += 3;
        while let Some(&Token::Position(pos)) = seq.get(i) {
            let Some(&Token::Pitch(pitch)) = seq.get(i + 1) else { return Err(err(i + 1, "expected Pitch after Position")) };
            let Some(&Token::Duration(dur)) = seq.get(i + 2) else { return Err(err(i + 2, "expected Duration after Pitch")) };
            bar.notes.push(NoteEvent { bar_index, position: pos, pitch, duration: dur, tempo_bpm: tempo });
            i += 3;
        }
        if let Some(t) = seq.get(i) {
            if t.kind() != TokenKind::Bar {
                return Err(err(i, "expected Bar or Position"));
            }
        }
        out.bars.push(bar);
        out.bar_values.push(bv);
        out.struct_ids.push(sid);
    }
    Ok(out)
}

/// Snaps a tempo to the nearest grid value in `28..=212` (step 4), breaking
/// ties downward.
pub fn snap_tempo(bpm: f64) -> u16 {
    if !(bpm > TEMPO_MIN as f64) {
        return TEMPO_MIN;
    }
    if bpm >= TEMPO_MAX as f64 {
        return TEMPO_MAX;
    }
    let steps = (bpm - TEMPO_MIN as f64) / TEMPO_STEP as f64;
    let lower = steps.floor();
    let frac = steps - lower;
    let k = if frac <= 0.5 { lower } else { lower + 1.0 };
    TEMPO_MIN + k as u16 * TEMPO_STEP
}

/// Quantizes raw MIDI note data onto the 16th-note grid.
pub fn quantize(raw_pitch: i32, onset_ticks: u64, duration_ticks: u64, bpm: f64, ticks_per_16th: i64) -> Result<NoteEvent> {
    if ticks_per_16th <= 0 {
        return Err(Error::Config(format!("ticks per 16th must be positive, got {ticks_per_16th}")));
    }
    let tp = ticks_per_16th as u64;
    let step = (onset_ticks + tp / 2) / tp;
    let dur = ((duration_ticks + tp / 2) / tp).clamp(1, DURATION_MAX as u64);
    Ok(NoteEvent {
        bar_index: (step / POSITIONS_PER_BAR as u64) as u32,
        position: (step % POSITIONS_PER_BAR as u64) as u8,
        pitch: raw_pitch.clamp(PITCH_MIN as i32, PITCH_MAX as i32) as u8,
        duration: dur as u8,
        tempo_bpm: snap_tempo(bpm),
    })
}
