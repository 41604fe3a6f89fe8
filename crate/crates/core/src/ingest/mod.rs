//! Songs, infilling examples and the dataset builders.

mod midi;
mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use midi::{flatten, read_melody_bars, write_melody_bars, write_named_tracks, MELODY_TRACKS};
pub use synthetic::{make_synthetic_corpus, DEFAULT_FORMS};

use crate::error::{Error, Result};
use crate::structure::{assign_structure_indices, parse_annotation_file, StructureAnnotation, StructureIndexSeq};
use crate::tokenizer::{decode_full, encode_bars, Bar, Token, TokenSeq, MAX_BARS};

/// Bars of past and future context on each side of a target phrase.
pub const CONTEXT_BARS: usize = 6;
/// Phrase length used for evaluation cases.
pub const TEST_PHRASE_BARS: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Song {
    pub id: String,
    pub bars: Vec<Bar>,
    pub annotation: StructureAnnotation,
}

impl Song {
    fn encode_range(&self, range: Range<usize>, countdown: bool) -> Result<TokenSeq> {
        let ids = self.annotation.bar_struct_ids();
        encode_bars(&self.bars[range.clone()], &ids[range], countdown)
    }
}

/// Reads a song's melody from MIDI; the bar count follows the annotation.
pub fn load_midi(path: &Path, id: &str, annotation: StructureAnnotation) -> Result<Song> {
    let bars = read_melody_bars(path, Some(annotation.total_bars()))?;
    Ok(Song { id: id.to_string(), bars, annotation })
}

/// One training or evaluation item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfillingExample {
    pub past: TokenSeq,
    pub future: TokenSeq,
    /// Countdown-encoded target phrase.
    pub target: TokenSeq,
    /// First-occurrence phrases, `contexts[n - 1]` being structural context `n`.
    pub contexts: Vec<TokenSeq>,
    /// Structure indices of the wrapped `{BOS, past, SEP, future, SEP, target, EOS}` sequence.
    pub indices: StructureIndexSeq,
    pub target_bars: usize,
}

/// Index ranges of the three segments inside a wrapped sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentBounds {
    pub past: Range<usize>,
    pub future: Range<usize>,
    pub target: Range<usize>,
}

impl SegmentBounds {
    pub fn from_lengths(past: usize, future: usize, target: usize) -> Self {
        let past_r = 1..1 + past;
        let future_r = past_r.end + 1..past_r.end + 1 + future;
        let target_r = future_r.end + 1..future_r.end + 1 + target;
        Self { past: past_r, future: future_r, target: target_r }
    }

    /// Length of the wrapped sequence including the closing EOS.
    pub fn total_len(&self) -> usize {
        self.target.end + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wrapped {
    pub tokens: TokenSeq,
    pub indices: StructureIndexSeq,
    pub bounds: SegmentBounds,
}

/// Structure indices read off the Struct token of every bar; specials get 0.
pub fn indices_from_struct_tokens(seq: &[Token]) -> Result<StructureIndexSeq> {
    let ids: Vec<u8> = seq
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            (Token::Bar(_), Token::Struct(s)) => Some(s),
            _ => None,
        })
        .collect();
    assign_structure_indices(seq, &ids)
}

/// Produces `{BOS, past, SEP, future, SEP, target, EOS}` with matching
/// structure indices and segment bounds.
pub fn reorder_and_wrap(example: &InfillingExample) -> Wrapped {
    wrap_segments(&example.past, &example.future, &example.target, true)
}

pub(crate) fn wrap_segments(past: &[Token], future: &[Token], target: &[Token], close: bool) -> Wrapped {
    let bounds = SegmentBounds::from_lengths(past.len(), future.len(), target.len());
    let mut tokens = TokenSeq::new();
    tokens.push(Token::Bos);
    tokens.extend_from_slice(past);
    tokens.push(Token::Sep);
    tokens.extend_from_slice(future);
    tokens.push(Token::Sep);
    tokens.extend_from_slice(target);
    if close {
        tokens.push(Token::Eos);
    }
    let indices = indices_from_struct_tokens(&tokens).expect("segments are grammar-valid");
    Wrapped { tokens, indices, bounds }
}

fn make_example(song: &Song, target: Range<usize>) -> Result<InfillingExample> {
    let total = song.annotation.total_bars();
    let past_r = target.start.saturating_sub(CONTEXT_BARS)..target.start;
    let future_r = target.end..(target.end + CONTEXT_BARS).min(total);
    let past = song.encode_range(past_r, false)?;
    let future = song.encode_range(future_r, false)?;
    let target_seq = song.encode_range(target.clone(), true)?;
    let contexts = song.annotation.structural_contexts().into_values().map(|r| song.encode_range(r, false)).collect::<Result<Vec<_>>>()?;
    let mut ex = InfillingExample { past, future, target: target_seq, contexts, indices: Vec::new(), target_bars: target.len() };
    ex.indices = reorder_and_wrap(&ex).indices;
    Ok(ex)
}

fn check_song(song: &Song) -> Result<()> {
    if song.bars.len() < song.annotation.total_bars() {
        return Err(Error::Coverage(format!("song `{}` has {} bars but its annotation spans {}", song.id, song.bars.len(), song.annotation.total_bars())));
    }
    Ok(())
}

/// Every phrase except the first and last becomes a target, with up to six
/// bars of past and future context.
pub fn build_training_examples(song: &Song) -> Result<Vec<InfillingExample>> {
    check_song(song)?;
    let phrases = song.annotation.phrases();
    if phrases.len() < 3 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for phrase in &phrases[1..phrases.len() - 1] {
        if phrase.length_bars as usize > MAX_BARS {
            log::warn!("song `{}`: skipping {}-bar target at bar {}", song.id, phrase.length_bars, phrase.start_bar);
            continue;
        }
        out.push(make_example(song, phrase.bars())?);
    }
    Ok(out)
}

/// Four-bar phrases that share their label with exactly one neighbour.
pub fn build_test_cases(songs: &[Song]) -> Result<Vec<InfillingExample>> {
    let mut out = Vec::new();
    for song in songs {
        check_song(song)?;
        let phrases = song.annotation.phrases();
        for i in 1..phrases.len().saturating_sub(1) {
            let p = &phrases[i];
            if p.length_bars != TEST_PHRASE_BARS || p.is_special() {
                continue;
            }
            let same_prev = phrases[i - 1].label == p.label;
            let same_next = phrases[i + 1].label == p.label;
            if same_prev != same_next {
                out.push(make_example(song, p.bars())?);
            }
        }
    }
    Ok(out)
}

/// Deterministic shuffled split; the training side gets `floor(n * ratio)` songs.
pub fn split_corpus<S: Clone>(songs: &[S], ratio: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..songs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (songs.len() as f64 * ratio + 1e-9).floor() as usize;
    let train = order[..n_train].iter().map(|&i| songs[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| songs[i].clone()).collect();
    Ok((train, test))
}

impl InfillingExample {
    /// `past | future | target | G_1 | ... | G_N | y_0 y_1 ...`
    pub fn to_line(&self) -> String {
        let mut line = format!("{} | {} | {}", self.past, self.future, self.target);
        for c in &self.contexts {
            write!(line, " | {c}").unwrap();
        }
        line.push_str(" |");
        for y in &self.indices {
            write!(line, " {y}").unwrap();
        }
        line
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(Error::Parse { index: 0, reason: format!("expected at least 4 `|`-separated fields, got {}", fields.len()) });
        }
        let seg = |i: usize| -> Result<TokenSeq> {
            let seq: TokenSeq = fields[i].parse()?;
            decode_full(&seq)?;
            Ok(seq)
        };
        let past = seg(0)?;
        let future = seg(1)?;
        let target = seg(2)?;
        let contexts = (3..fields.len() - 1).map(seg).collect::<Result<Vec<_>>>()?;
        let indices = fields[fields.len() - 1]
            .split_whitespace()
            .enumerate()
            .map(|(index, w)| w.parse::<u8>().map_err(|_| Error::Parse { index, reason: format!("bad structure index `{w}`") }))
            .collect::<Result<Vec<u8>>>()?;
        let target_bars = target.bar_count();
        let ex = Self { past, future, target, contexts, indices, target_bars };
        ex.validate()?;
        Ok(ex)
    }

    /// Checks the cross-field invariants of an example.
    pub fn validate(&self) -> Result<()> {
        let values = self.target.bar_values();
        let expected: Vec<u8> = (1..=self.target_bars as u8).rev().collect();
        if values != expected {
            return Err(Error::Coverage(format!("target Bar payloads {values:?} do not count down from {}", self.target_bars)));
        }
        let wrapped = reorder_and_wrap(self);
        if wrapped.indices != self.indices {
            return Err(Error::Coverage("structure indices do not match the wrapped sequence".into()));
        }
        if let Some(&bad) = self.indices.iter().find(|&&y| y as usize > self.contexts.len()) {
            return Err(Error::Index { index: bad as usize, available: self.contexts.len() });
        }
        Ok(())
    }
}

pub fn write_dataset(path: &Path, examples: &[InfillingExample]) -> Result<()> {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&ex.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Name of the `song_id<TAB>annotation` file at the root of a corpus directory.
pub const ANNOTATION_FILE: &str = "annotations.tsv";

/// Loads every annotated song of a corpus directory: [`ANNOTATION_FILE`] at
/// the root and `<song_id>.mid` (or `.midi`) anywhere below it. Songs in the
/// annotation file without a MIDI file are skipped with a warning.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<Song>> {
    let ann_path = dir.join(ANNOTATION_FILE);
    if !ann_path.is_file() {
        return Err(Error::Coverage(format!("{} has no {ANNOTATION_FILE}", dir.display())));
    }
    let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let annotations = parse_annotation_file(&text)?;
    let mut midis = HashMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Coverage(format!("{}: {e}", dir.display())))?;
        let path = entry.path();
        let is_midi = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
        if entry.file_type().is_file() && is_midi {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                midis.entry(stem.to_string()).or_insert_with(|| path.to_path_buf());
            }
        }
    }
    let mut songs = Vec::with_capacity(annotations.len());
    for (id, annotation) in annotations {
        match midis.get(&id) {
            Some(path) => songs.push(load_midi(path, &id, annotation)?),
            None => log::warn!("song `{id}` is annotated but has no MIDI file under {}", dir.display()),
        }
    }
    if songs.is_empty() {
        return Err(Error::Coverage(format!("no annotated MIDI songs found in {}", dir.display())));
    }
    Ok(songs)
}

pub fn read_dataset(path: &Path) -> Result<Vec<InfillingExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| InfillingExample::from_line(l).map_err(|e| Error::Parse { index: i, reason: format!("{}: line {}: {e}", path.display(), i + 1) }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::parse_annotation;
    use crate::tokenizer::NoteEvent;

    fn song(form: &str) -> Song {
        let annotation = parse_annotation(form).unwrap();
        let bars = (0..annotation.total_bars())
            .map(|b| Bar { tempo_bpm: 100, notes: vec![NoteEvent { bar_index: b as u32, position: (b % 16) as u8, pitch: 60 + (b % 20) as u8, duration: 2, tempo_bpm: 100 }] })
            .collect();
        Song { id: form.into(), bars, annotation }
    }

    #[test]
    fn example_song_yields_eleven_examples() {
        let s = song("i4 A8 B8 x4 A8 B8 B8 X2 c4 c4 X2 B9 o2");
        let examples = build_training_examples(&s).unwrap();
        assert_eq!(examples.len(), 11);
        for ex in &examples {
            ex.validate().unwrap();
            assert!(ex.past.bar_count() <= CONTEXT_BARS);
            assert!(ex.future.bar_count() <= CONTEXT_BARS);
            assert_eq!(ex.contexts.len(), 3);
            assert_eq!(ex.target.bar_values()[0] as usize, ex.target_bars);
        }
        // the A8 after the intro has a 4-bar past window
        assert_eq!(examples[0].past.bar_count(), 4);
        assert_eq!(examples[0].target_bars, 8);
        // the fifth phrase (second B8) carries index 2 throughout its target
        let wrapped = reorder_and_wrap(&examples[4]);
        assert!(wrapped.indices[wrapped.bounds.target.clone()].iter().all(|&y| y == 2));
    }

    #[test]
    fn fewer_than_three_phrases_yield_nothing() {
        assert!(build_training_examples(&song("A4 B4")).unwrap().is_empty());
        assert!(build_training_examples(&song("A4")).unwrap().is_empty());
    }

    #[test]
    fn contexts_are_first_occurrences() {
        let s = song("A4 B4 A4 B4");
        let ex = &build_training_examples(&s).unwrap()[0];
        let expected_a = s.encode_range(0..4, false).unwrap();
        assert_eq!(ex.contexts[0], expected_a);
        assert_eq!(ex.contexts[1], s.encode_range(4..8, false).unwrap());
    }

    #[test]
    fn test_case_neighbour_rule() {
        let cases = build_test_cases(&[song("A4 B4 B4 C4")]).unwrap();
        // both B phrases have exactly one same-label neighbour
        assert_eq!(cases.len(), 2);
        let second_b = make_example(&song("A4 B4 B4 C4"), 8..12).unwrap();
        assert!(cases.contains(&second_b));
        assert!(build_test_cases(&[song("A4 B4 A4")]).unwrap().is_empty());
        assert!(build_test_cases(&[song("A4 A4 A4")]).unwrap().is_empty());
        // 8-bar phrases never qualify
        assert!(build_test_cases(&[song("A8 B8 B8 C8")]).unwrap().is_empty());
    }

    #[test]
    fn wrapping_counts_specials_and_orders_segments() {
        let s = song("A4 B4 A4 B4");
        let mut ex = build_training_examples(&s).unwrap()[1].clone();
        let w = reorder_and_wrap(&ex);
        assert_eq!(w.tokens.len(), ex.past.len() + ex.future.len() + ex.target.len() + 4);
        assert_eq!(&w.tokens[w.bounds.past.clone()], &ex.past[..]);
        assert_eq!(&w.tokens[w.bounds.future.clone()], &ex.future[..]);
        assert_eq!(&w.tokens[w.bounds.target.clone()], &ex.target[..]);
        assert!(w.bounds.past.end < w.bounds.future.start && w.bounds.future.end < w.bounds.target.start);
        ex.past = TokenSeq::new();
        let w = reorder_and_wrap(&ex);
        assert_eq!(w.tokens[0], Token::Bos);
        assert_eq!(w.tokens[1], Token::Sep);
        assert_eq!(*w.tokens.last().unwrap(), Token::Eos);
    }

    #[test]
    fn bounds_arithmetic() {
        let b = SegmentBounds::from_lengths(10, 8, 12);
        assert_eq!(b.total_len(), 34);
        assert_eq!(b.past, 1..11);
        assert_eq!(b.future, 12..20);
        assert_eq!(b.target, 21..33);
    }

    #[test]
    fn split_is_deterministic() {
        let songs: Vec<usize> = (0..902).collect();
        let (tr, te) = split_corpus(&songs, 0.9, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (811, 91));
        let (tr2, _) = split_corpus(&songs, 0.9, 1).unwrap();
        assert_eq!(tr, tr2);
        let ten: Vec<usize> = (0..10).collect();
        let (tr, te) = split_corpus(&ten, 0.9, 5).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        assert!(split_corpus(&ten, 1.0, 5).is_err());
    }

    #[test]
    fn dataset_lines_round_trip() {
        let s = song("i2 A4 B4 A4 o2");
        let examples = build_training_examples(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        write_dataset(&path, &examples).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), examples);
        let mut ex = examples[0].clone();
        ex.past = TokenSeq::new();
        ex.indices = reorder_and_wrap(&ex).indices;
        assert_eq!(InfillingExample::from_line(&ex.to_line()).unwrap(), ex);
        assert!(InfillingExample::from_line("BAR(1) | |").is_err());
    }
}
