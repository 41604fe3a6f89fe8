//! Phrase-structure annotations (`i4 A8 B8 x4 ...`), first-occurrence
//! structural contexts and per-token structure indices.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tokenizer::{Token, TokenKind, MAX_STRUCT};

/// Labels that never receive a structural context (intro, bridge, outro).
pub const SPECIAL_LABELS: [char; 3] = ['i', 'x', 'o'];

/// Per-token structure index, parallel to a token sequence.
pub type StructureIndexSeq = Vec<u8>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    /// Lower-case identity letter.
    pub label: char,
    /// True when the source letter was upper case.
    pub melodic: bool,
    pub length_bars: u32,
    pub start_bar: u32,
}

impl Phrase {
    pub fn bars(&self) -> Range<usize> {
        self.start_bar as usize..(self.start_bar + self.length_bars) as usize
    }

    pub fn is_special(&self) -> bool {
        is_special_label(self.label)
    }
}

pub fn is_special_label(label: char) -> bool {
    SPECIAL_LABELS.contains(&label.to_ascii_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureAnnotation {
    phrases: Vec<Phrase>,
    /// Non-special labels in order of first appearance; label at `i` has id `i + 1`.
    labels: Vec<char>,
}

impl StructureAnnotation {
    pub fn from_phrases(phrases: Vec<Phrase>) -> Result<Self> {
        let mut labels: Vec<char> = Vec::new();
        for p in &phrases {
            if !p.is_special() && !labels.contains(&p.label) {
                labels.push(p.label);
            }
        }
        if labels.len() > MAX_STRUCT as usize {
            return Err(Error::Capacity(format!("{} structure labels exceed the limit of {MAX_STRUCT}", labels.len())));
        }
        Ok(Self { phrases, labels })
    }

    pub fn phrases(&self) -> &[Phrase] {
        &self.phrases
    }

    /// Non-special labels ordered by struct id.
    pub fn labels(&self) -> &[char] {
        &self.labels
    }

    pub fn context_count(&self) -> usize {
        self.labels.len()
    }

    pub fn total_bars(&self) -> usize {
        self.phrases.iter().map(|p| p.length_bars as usize).sum()
    }

    /// Struct id of a label: 0 for specials, otherwise 1-based order of first
    /// appearance. Unknown labels yield `None`.
    pub fn struct_id(&self, label: char) -> Option<u8> {
        let label = label.to_ascii_lowercase();
        if is_special_label(label) {
            return Some(0);
        }
        self.labels.iter().position(|&l| l == label).map(|i| i as u8 + 1)
    }

    /// Label of every bar of the song.
    pub fn bar_labels(&self) -> Vec<char> {
        self.phrases.iter().flat_map(|p| std::iter::repeat_n(p.label, p.length_bars as usize)).collect()
    }

    /// Struct id of every bar of the song.
    pub fn bar_struct_ids(&self) -> Vec<u8> {
        self.phrases.iter().flat_map(|p| std::iter::repeat_n(self.struct_id(p.label).unwrap_or(0), p.length_bars as usize)).collect()
    }

    /// Bar range of the first phrase carrying each non-special label, keyed by struct id.
    pub fn structural_contexts(&self) -> BTreeMap<u8, Range<usize>> {
        let mut out = BTreeMap::new();
        for p in &self.phrases {
            if let Some(id) = self.struct_id(p.label).filter(|&id| id > 0) {
                out.entry(id).or_insert_with(|| p.bars());
            }
        }
        out
    }

    /// Indices for `seq` from per-bar labels.
    pub fn assign_indices(&self, seq: &[Token], bar_labels: &[char]) -> Result<StructureIndexSeq> {
        let ids = bar_labels.iter().map(|&l| self.struct_id(l).ok_or_else(|| Error::Coverage(format!("label `{l}` is not in the annotation")))).collect::<Result<Vec<u8>>>()?;
        assign_structure_indices(seq, &ids)
    }
}

pub fn parse_annotation(text: &str) -> Result<StructureAnnotation> {
    let mut phrases = Vec::new();
    let mut start = 0u32;
    for (index, word) in text.split_whitespace().enumerate() {
        let perr = |reason: &str| Error::Parse { index, reason: format!("`{word}`: {reason}") };
        let mut chars = word.chars();
        let letter = chars.next().filter(|c| c.is_ascii_alphabetic()).ok_or_else(|| perr("expected a leading letter"))?;
        let digits = chars.as_str();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(perr("expected a bar count after the label"));
        }
        let length: u32 = digits.parse().map_err(|_| perr("bar count too large"))?;
        if length == 0 {
            return Err(perr("phrase length must be positive"));
        }
        phrases.push(Phrase { label: letter.to_ascii_lowercase(), melodic: letter.is_ascii_uppercase(), length_bars: length, start_bar: start });
        start += length;
    }
    StructureAnnotation::from_phrases(phrases)
}

impl FromStr for StructureAnnotation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_annotation(s)
    }
}

impl fmt::Display for StructureAnnotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.phrases.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            let letter = if p.melodic { p.label.to_ascii_uppercase() } else { p.label };
            write!(f, "{letter}{}", p.length_bars)?;
        }
        Ok(())
    }
}

/// Assigns each token the struct id of the bar it belongs to. `bar_ids`
/// covers the Bar tokens of `seq` in order; specials get 0.
pub fn assign_structure_indices(seq: &[Token], bar_ids: &[u8]) -> Result<StructureIndexSeq> {
    let mut out = Vec::with_capacity(seq.len());
    let mut bar: Option<usize> = None;
    let mut next_bar = 0usize;
    for (i, t) in seq.iter().enumerate() {
        match t.kind() {
            k if k.is_special() => {
                bar = None;
                out.push(0);
            }
            TokenKind::Bar => {
                let id = *bar_ids.get(next_bar).ok_or_else(|| Error::Coverage(format!("bar {next_bar} (token {i}) has no structure mapping")))?;
                bar = Some(next_bar);
                next_bar += 1;
                out.push(id);
            }
            _ => {
                let b = bar.ok_or_else(|| Error::Coverage(format!("token {i} lies outside any bar")))?;
                out.push(bar_ids[b]);
            }
        }
    }
    Ok(out)
}

/// Parses an annotation file with one `<song_id>\t<annotation>` record per line.
pub fn parse_annotation_file(text: &str) -> Result<Vec<(String, StructureAnnotation)>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, ann) = line.split_once('\t').ok_or_else(|| Error::Parse { index: line_no, reason: format!("line {} lacks a tab between song id and annotation", line_no + 1) })?;
        let ann = parse_annotation(ann).map_err(|e| Error::Parse { index: line_no, reason: format!("song `{id}`: {e}") })?;
        out.push((id.trim().to_string(), ann));
    }
    Ok(out)
}
