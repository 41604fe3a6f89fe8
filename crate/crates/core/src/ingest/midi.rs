//! Standard MIDI file reading (MELODY + BRIDGE merge) and writing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use crate::error::{Error, Result};
use crate::tokenizer::{quantize, snap_tempo, Bar, NoteEvent, POSITIONS_PER_BAR};

/// Track names whose notes form the melody.
pub const MELODY_TRACKS: [&str; 2] = ["MELODY", "BRIDGE"];

const DEFAULT_BPM: f64 = 120.0;
const WRITE_PPQ: u16 = 480;

struct RawNote {
    pitch: u8,
    onset: u64,
    duration: u64,
}

/// Tempo changes as (tick, bpm), sorted by tick.
fn tempo_map(smf: &Smf) -> Vec<(u64, f64)> {
    let mut map = BTreeMap::new();
    for track in &smf.tracks {
        let mut tick = 0u64;
        for ev in track {
            tick += ev.delta.as_int() as u64;
            if let TrackEventKind::Meta(MetaMessage::Tempo(us)) = ev.kind {
                let us = us.as_int().max(1) as f64;
                map.insert(tick, 60_000_000.0 / us);
            }
        }
    }
    map.into_iter().collect()
}

fn bpm_at(map: &[(u64, f64)], tick: u64) -> f64 {
    map.iter().take_while(|(t, _)| *t <= tick).last().map_or(DEFAULT_BPM, |&(_, b)| b)
}

fn track_name<'a>(track: &[TrackEvent<'a>]) -> Option<String> {
    track.iter().find_map(|ev| match ev.kind {
        TrackEventKind::Meta(MetaMessage::TrackName(name)) => Some(String::from_utf8_lossy(name).trim().to_string()),
        _ => None,
    })
}

fn track_notes(track: &[TrackEvent]) -> Vec<RawNote> {
    let mut open: HashMap<(u8, u8), Vec<u64>> = HashMap::new();
    let mut notes = Vec::new();
    let mut tick = 0u64;
    for ev in track {
        tick += ev.delta.as_int() as u64;
        if let TrackEventKind::Midi { channel, message } = ev.kind {
            let (key, on) = match message {
                MidiMessage::NoteOn { key, vel } => (key.as_int(), vel.as_int() > 0),
                MidiMessage::NoteOff { key, .. } => (key.as_int(), false),
                _ => continue,
            };
            let slot = (channel.as_int(), key);
            if on {
                open.entry(slot).or_default().push(tick);
            } else if let Some(start) = open.get_mut(&slot).and_then(|v| (!v.is_empty()).then(|| v.remove(0))) {
                notes.push(RawNote { pitch: key, onset: start, duration: tick - start });
            }
        }
    }
    notes
}

/// Reads the MELODY and BRIDGE tracks of a MIDI file, quantized into bars.
///
/// Notes sharing `(bar, position, pitch)` after quantization are merged;
/// the first one seen is kept. Each bar carries the tempo at its start and
/// intra-bar tempo changes are dropped. When `bar_count` is given the
/// result is truncated or padded with empty bars to that length.
pub fn read_melody_bars(path: &Path, bar_count: Option<usize>) -> Result<Vec<Bar>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let smf = Smf::parse(&raw).map_err(|e| Error::Midi { path: path.to_path_buf(), reason: e.to_string() })?;
    let ppq = match smf.header.timing {
        Timing::Metrical(t) => t.as_int() as i64,
        Timing::Timecode(..) => return Err(Error::Midi { path: path.to_path_buf(), reason: "timecode-based timing is not supported".into() }),
    };
    let tp16 = ppq / 4;
    let tempos = tempo_map(&smf);

    let mut raw_notes = Vec::new();
    let mut found = false;
    let mut track_end = 0u64;
    for name in MELODY_TRACKS {
        for track in &smf.tracks {
            if track_name(track).is_some_and(|n| n.eq_ignore_ascii_case(name)) {
                found = true;
                track_end = track_end.max(track.iter().map(|ev| ev.delta.as_int() as u64).sum());
                raw_notes.extend(track_notes(track));
            }
        }
    }
    if !found {
        return Err(Error::MissingTrack { path: path.to_path_buf() });
    }

    let mut seen = HashSet::new();
    let mut notes = Vec::new();
    for rn in raw_notes {
        let n = quantize(rn.pitch as i32, rn.onset, rn.duration, bpm_at(&tempos, rn.onset), tp16)?;
        if seen.insert((n.bar_index, n.position, n.pitch)) {
            notes.push(n);
        }
    }
    let needed = notes.iter().map(|n| n.bar_index as usize + 1).max().unwrap_or(0);
    let bar_ticks = tp16.max(1) as u64 * POSITIONS_PER_BAR as u64;
    // complete bars up to the end of the melody track count even when silent;
    // a note tail is at most one bar long so it never adds a bar
    let count = bar_count.unwrap_or(needed.max((track_end / bar_ticks) as usize));
    if needed > count {
        log::warn!("{}: dropping notes beyond bar {count}", path.display());
    }
    let mut bars: Vec<Bar> = (0..count).map(|b| Bar::empty(snap_tempo(bpm_at(&tempos, b as u64 * bar_ticks)))).collect();
    for mut n in notes {
        if let Some(bar) = bars.get_mut(n.bar_index as usize) {
            n.tempo_bpm = bar.tempo_bpm;
            bar.notes.push(n);
        }
    }
    for bar in &mut bars {
        bar.notes.sort_by_key(|n| (n.position, n.pitch));
    }
    Ok(bars)
}

/// Writes bars as a single-track MIDI file whose track is named MELODY.
pub fn write_melody_bars(path: &Path, bars: &[Bar]) -> Result<()> {
    let tp16 = (WRITE_PPQ / 4) as u64;
    let bar_ticks = tp16 * POSITIONS_PER_BAR as u64;
    // (tick, order, kind): tempo first, then note-offs, then note-ons
    let mut timed: Vec<(u64, u8, TrackEventKind<'static>)> = Vec::new();
    let mut last_tempo = None;
    for (b, bar) in bars.iter().enumerate() {
        let start = b as u64 * bar_ticks;
        if last_tempo != Some(bar.tempo_bpm) {
            let us = (60_000_000.0 / bar.tempo_bpm as f64).round() as u32;
            timed.push((start, 0, TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us)))));
            last_tempo = Some(bar.tempo_bpm);
        }
        for n in &bar.notes {
            let on = start + n.position as u64 * tp16;
            let key = u7::new(n.pitch);
            timed.push((on, 2, TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOn { key, vel: u7::new(80) } }));
            timed.push((on + n.duration as u64 * tp16, 1, TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOff { key, vel: u7::new(0) } }));
        }
    }
    timed.sort_by_key(|(t, o, _)| (*t, *o));

    let mut track = vec![TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::TrackName(b"MELODY")) }];
    let mut prev = 0u64;
    for (t, _, kind) in timed {
        track.push(TrackEvent { delta: u28::new((t - prev) as u32), kind });
        prev = t;
    }
    // end the track at the last bar line so trailing empty bars survive
    let end = prev.max(bars.len() as u64 * bar_ticks);
    track.push(TrackEvent { delta: u28::new((end - prev) as u32), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) });
    let smf = Smf { header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(WRITE_PPQ))), tracks: vec![track] };
    smf.save(path).map_err(|e| Error::io(path, e))
}

/// Writes an arbitrary multi-track file; used to build fixtures.
pub fn write_named_tracks(path: &Path, ppq: u16, tempo_bpm: f64, tracks: &[(&str, Vec<(u8, u64, u64)>)]) -> Result<()> {
    let mut out = Vec::new();
    let us = (60_000_000.0 / tempo_bpm).round() as u32;
    out.push(vec![
        TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us))) },
        TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) },
    ]);
    for (name, notes) in tracks {
        let mut timed: Vec<(u64, u8, TrackEventKind)> = Vec::new();
        for &(pitch, onset, dur) in notes {
            let key = u7::new(pitch);
            timed.push((onset, 1, TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOn { key, vel: u7::new(90) } }));
            timed.push((onset + dur, 0, TrackEventKind::Midi { channel: u4::new(0), message: MidiMessage::NoteOn { key, vel: u7::new(0) } }));
        }
        timed.sort_by_key(|(t, o, _)| (*t, *o));
        let mut track = vec![TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::TrackName(name.as_bytes())) }];
        let mut prev = 0;
        for (t, _, kind) in timed {
            track.push(TrackEvent { delta: u28::new((t - prev) as u32), kind });
            prev = t;
        }
        track.push(TrackEvent { delta: u28::new(0), kind: TrackEventKind::Meta(MetaMessage::EndOfTrack) });
        out.push(track);
    }
    let smf = Smf { header: Header::new(Format::Parallel, Timing::Metrical(u15::new(ppq))), tracks: out };
    smf.save(path).map_err(|e| Error::io(path, e))
}

/// Flattens bars into notes with absolute bar indices.
pub fn flatten(bars: &[Bar]) -> Vec<NoteEvent> {
    bars.iter().enumerate().flat_map(|(b, bar)| bar.notes.iter().map(move |n| NoteEvent { bar_index: b as u32, ..*n })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn melody_only_file_is_read_alone() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mid");
        write_named_tracks(&path, 480, 120.0, &[("MELODY", vec![(60, 0, 480), (64, 1920, 240)]), ("PIANO", vec![(40, 0, 480)])]).unwrap();
        let bars = read_melody_bars(&path, None).unwrap();
        assert_eq!(bars.len(), 2);
        assert_eq!(bars[0].tempo_bpm, 120);
        assert_eq!(bars[0].notes.len(), 1);
        assert_eq!((bars[0].notes[0].pitch, bars[0].notes[0].duration), (60, 4));
        assert_eq!((bars[1].notes[0].position, bars[1].notes[0].duration), (0, 2));
    }

    #[test]
    fn identical_notes_in_both_tracks_are_merged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mid");
        let notes = vec![(60, 0, 480), (62, 480, 480)];
        write_named_tracks(&path, 480, 120.0, &[("MELODY", notes.clone()), ("BRIDGE", [notes, vec![(67, 960, 240)]].concat())]).unwrap();
        let bars = read_melody_bars(&path, Some(2)).unwrap();
        assert_eq!(bars.len(), 2);
        assert_eq!(bars[0].notes.iter().map(|n| n.pitch).collect::<Vec<_>>(), vec![60, 62, 67]);
        assert!(bars[1].notes.is_empty());
    }

    #[test]
    fn missing_tracks_and_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.mid");
        write_named_tracks(&path, 480, 100.0, &[("PIANO", vec![(60, 0, 480)])]).unwrap();
        assert!(matches!(read_melody_bars(&path, None), Err(Error::MissingTrack { .. })));
        assert!(matches!(read_melody_bars(&dir.path().join("nope.mid"), None), Err(Error::Io { .. })));
        let junk = dir.path().join("junk.mid");
        std::fs::write(&junk, b"not midi").unwrap();
        assert!(matches!(read_melody_bars(&junk, None), Err(Error::Midi { .. })));
    }

    #[test]
    fn written_bars_read_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mid");
        let mk = |b: u32, position, pitch, duration| NoteEvent { bar_index: b, position, pitch, duration, tempo_bpm: if b == 0 { 96 } else { 100 } };
        let bars =
            vec![Bar { tempo_bpm: 96, notes: vec![mk(0, 0, 60, 4), mk(0, 4, 62, 2), mk(0, 4, 67, 12)] }, Bar::empty(100), Bar { tempo_bpm: 100, notes: vec![mk(2, 15, 107, 16)] }];
        write_melody_bars(&path, &bars).unwrap();
        assert_eq!(read_melody_bars(&path, Some(3)).unwrap(), bars);
        assert_eq!(read_melody_bars(&path, None).unwrap(), bars);
    }

    #[test]
    fn trailing_silent_bars_are_kept() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mid");
        let mk = |b: u32, position, duration| NoteEvent { bar_index: b, position, pitch: 60, duration, tempo_bpm: 120 };
        let bars = vec![Bar { tempo_bpm: 120, notes: vec![mk(0, 14, 16)] }, Bar::empty(120), Bar::empty(120)];
        write_melody_bars(&path, &bars).unwrap();
        assert_eq!(read_melody_bars(&path, None).unwrap(), bars);
        write_melody_bars(&path, &bars[..1]).unwrap();
        assert_eq!(read_melody_bars(&path, None).unwrap().len(), 1);
    }
}
