//! Seeded desk-scale corpus of songs with known phrase structure.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Song;
use crate::structure::parse_annotation;
use crate::tokenizer::{Bar, NoteEvent};

/// Default forms: two or three repeating labels framed by intro/outro.
pub const DEFAULT_FORMS: [&str; 4] = ["i2 A4 B4 A4 B4 o2", "i2 A4 A4 B4 A4 o2", "i2 A4 B4 C4 A4 B4 o2", "A4 B4 x2 A4 B4 o2"];

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const RHYTHMS: [&[u8]; 8] = [&[0, 8], &[0, 4, 8], &[0, 6, 12], &[0, 4, 8, 12], &[0, 12], &[0], &[2, 8, 10], &[0, 4, 10]];

fn random_bar(rng: &mut ChaCha8Rng, root: u8, tempo: u16, bar_index: u32) -> Bar {
    let onsets = RHYTHMS.choose(rng).unwrap();
    let mut notes = Vec::with_capacity(onsets.len());
    for (i, &pos) in onsets.iter().enumerate() {
        let end = onsets.get(i + 1).copied().unwrap_or(16);
        let degree = rng.gen_range(0..MAJOR.len() + 3);
        let pitch = root + MAJOR[degree % 7] + 12 * (degree / 7) as u8;
        notes.push(NoteEvent { bar_index, position: pos, pitch, duration: end - pos, tempo_bpm: tempo });
    }
    Bar { tempo_bpm: tempo, notes }
}

fn shifted(bar: &Bar, shift: i8, bar_index: u32) -> Bar {
    Bar { tempo_bpm: bar.tempo_bpm, notes: bar.notes.iter().map(|n| NoteEvent { bar_index, pitch: (n.pitch as i16 + shift as i16) as u8, ..*n }).collect() }
}

/// Builds `n_songs` songs cycling through `forms`.
///
/// Phrases sharing a label reuse one motif; every repeat after the first is
/// shifted by an octave on alternate occurrences, so pitch classes and
/// rhythm are preserved. Intro, bridge and outro phrases get fresh material.
pub fn make_synthetic_corpus(seed: u64, n_songs: usize, forms: &[&str]) -> Vec<Song> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut songs = Vec::with_capacity(n_songs);
    for s in 0..n_songs {
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let form = forms[s % forms.len()];
        let annotation = parse_annotation(form).expect("synthetic forms are valid annotations");
        let tempo = 28 + 4 * rng.gen_range(13..=33) as u16;
        let root = rng.gen_range(58..=66u8);
        let mut motifs: HashMap<char, Vec<Bar>> = HashMap::new();
        let mut occurrences: HashMap<char, usize> = HashMap::new();
        let mut bars: Vec<Bar> = Vec::with_capacity(annotation.total_bars());
        for phrase in annotation.phrases() {
            let fresh = phrase.is_special() || !motifs.contains_key(&phrase.label);
            if fresh {
                let motif: Vec<Bar> = (0..phrase.length_bars).map(|_| random_bar(&mut rng, root, tempo, 0)).collect();
                if !phrase.is_special() {
                    motifs.insert(phrase.label, motif.clone());
                }
                for (i, b) in motif.iter().enumerate() {
                    bars.push(shifted(b, 0, phrase.start_bar + i as u32));
                }
                continue;
            }
            let k = occurrences.entry(phrase.label).or_insert(0);
            *k += 1;
            let shift = if *k % 2 == 1 { 12 } else { 0 };
            let motif = &motifs[&phrase.label];
            for i in 0..phrase.length_bars as usize {
                bars.push(shifted(&motif[i % motif.len()], shift, phrase.start_bar + i as u32));
            }
        }
        songs.push(Song { id: format!("synth-{seed}-{s:04}"), bars, annotation });
    }
    songs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn same_seed_same_corpus() {
        let a = make_synthetic_corpus(7, 5, &DEFAULT_FORMS);
        let b = make_synthetic_corpus(7, 5, &DEFAULT_FORMS);
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic_corpus(8, 5, &DEFAULT_FORMS));
        assert!(make_synthetic_corpus(7, 0, &DEFAULT_FORMS).is_empty());
    }

    #[test]
    fn repeated_label_shares_pitch_classes() {
        for song in make_synthetic_corpus(3, 6, &["A4 B4 A4"]) {
            let pcs = |r: std::ops::Range<usize>| -> Vec<BTreeSet<u8>> { song.bars[r].iter().map(|b| b.notes.iter().map(|n| n.pitch % 12).collect()).collect() };
            assert_eq!(pcs(0..4), pcs(8..12));
            assert_eq!(song.bars.len(), song.annotation.total_bars());
        }
    }

    #[test]
    fn pitches_and_tempi_are_in_vocabulary() {
        for song in make_synthetic_corpus(11, 8, &DEFAULT_FORMS) {
            for bar in &song.bars {
                assert!((28..=212).contains(&bar.tempo_bpm));
                for n in &bar.notes {
                    assert!((22..=107).contains(&n.pitch));
                    assert!((1..=16).contains(&n.duration));
                }
            }
        }
    }
}
