//! Objective evaluation: pitch-class histogram cross entropy (H), grooving
//! pattern similarity (GS) and melody distance (D).

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::ingest::InfillingExample;
use crate::tokenizer::{decode, Bar, NoteEvent, Token, POSITIONS_PER_BAR};

/// Additive smoothing applied to the context histogram in H.
pub const HISTOGRAM_EPS: f64 = 1e-6;

pub fn pitch_class_histogram(notes: &[NoteEvent]) -> Result<[f64; 12]> {
    if notes.is_empty() {
        return Err(Error::EmptySegment("pitch class histogram of an empty note list"));
    }
    let mut h = [0.0; 12];
    for n in notes {
        h[(n.pitch % 12) as usize] += 1.0;
    }
    let total = notes.len() as f64;
    for v in &mut h {
        *v /= total;
    }
    Ok(h)
}

/// `−Σ p(c) ln q'(c)` with `q' = (q + ε) / (1 + 12ε)`.
pub fn histogram_cross_entropy(p: &[f64; 12], q: &[f64; 12]) -> f64 {
    let norm = 1.0 + 12.0 * HISTOGRAM_EPS;
    -p.iter().zip(q).filter(|(&pc, _)| pc > 0.0).map(|(&pc, &qc)| pc * ((qc + HISTOGRAM_EPS) / norm).ln()).sum::<f64>()
}

/// H between the target and the concatenated past and future notes. Either
/// context side may be empty, but not both.
pub fn cross_entropy_h(target: &[NoteEvent], past: &[NoteEvent], future: &[NoteEvent]) -> Result<f64> {
    let p = pitch_class_histogram(target)?;
    let context: Vec<NoteEvent> = past.iter().chain(future).copied().collect();
    if context.is_empty() {
        return Err(Error::EmptySegment("past and future contexts hold no notes"));
    }
    let q = pitch_class_histogram(&context)?;
    Ok(histogram_cross_entropy(&p, &q))
}

/// 16-bit onset occupancy of a bar; bit `i` is position `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Groove(pub u16);

impl fmt::Display for Groove {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..POSITIONS_PER_BAR {
            f.write_char(if self.0 >> i & 1 == 1 { '1' } else { '0' })?;
        }
        Ok(())
    }
}

pub fn grooving_vector(bar: &Bar) -> Groove {
    Groove(bar.notes.iter().fold(0u16, |acc, n| acc | 1 << (n.position % POSITIONS_PER_BAR)))
}

/// Mean of `1 − popcount(v_t ⊕ v_c) / 16` over all target × context bar pairs.
pub fn grooving_similarity_gs(target_bars: &[Bar], context_bars: &[Bar]) -> Result<f64> {
    if target_bars.is_empty() || context_bars.is_empty() {
        return Err(Error::EmptySegment("grooving similarity needs bars on both sides"));
    }
    let ctx: Vec<Groove> = context_bars.iter().map(grooving_vector).collect();
    let mut total = 0.0;
    for t in target_bars.iter().map(grooving_vector) {
        for c in &ctx {
            total += 1.0 - (t.0 ^ c.0).count_ones() as f64 / POSITIONS_PER_BAR as f64;
        }
    }
    Ok(total / (target_bars.len() * ctx.len()) as f64)
}

/// Pitch sounding at every 16th-note step of the segment: the highest held
/// pitch, otherwise the previous pitch; leading rests take the first pitch.
pub fn pitch_curve(bars: &[Bar]) -> Result<Vec<i64>> {
    let steps = bars.len() * POSITIONS_PER_BAR as usize;
    let mut sounding: Vec<Option<u8>> = vec![None; steps];
    let mut first: Option<(usize, u8)> = None;
    for (b, bar) in bars.iter().enumerate() {
        for n in &bar.notes {
            let onset = b * POSITIONS_PER_BAR as usize + n.position as usize;
            first = match first {
                Some((s, p)) if s < onset || (s == onset && p >= n.pitch) => Some((s, p)),
                _ => Some((onset, n.pitch)),
            };
            for slot in sounding.iter_mut().skip(onset).take(n.duration as usize) {
                *slot = Some(slot.map_or(n.pitch, |p| p.max(n.pitch)));
            }
        }
    }
    let (_, mut current) = first.ok_or(Error::EmptySegment("melody distance of a segment without notes"))?;
    Ok(sounding
        .into_iter()
        .map(|s| {
            if let Some(p) = s {
                current = p;
            }
            current as i64
        })
        .collect())
}

/// DTW between two mean-centred curves with step cost `|a − b|`, divided by
/// the warping-path length. Among minimum-cost paths the shortest is used.
///
/// Centring is carried out in integers scaled by `len(a)·len(b)`, so costs
/// compare exactly.
pub fn dtw_distance(a: &[i64], b: &[i64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "dtw of an empty curve");
    let (n, m) = (a.len() as i64, b.len() as i64);
    let shift = n * b.iter().sum::<i64>() - m * a.iter().sum::<i64>();
    let cost = |i: usize, j: usize| (n * m * (a[i] - b[j]) + shift).abs();
    let cols = b.len();
    let mut prev: Vec<(i64, u32)> = vec![(0, 0); cols];
    let mut cur: Vec<(i64, u32)> = vec![(0, 0); cols];
    for i in 0..a.len() {
        for j in 0..cols {
            let best = match (i, j) {
                (0, 0) => (0, 0),
                (0, _) => cur[j - 1],
                (_, 0) => prev[j],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = (best.0 + cost(i, j), best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (total, len) = prev[cols - 1];
    total as f64 / (n * m) as f64 / len as f64
}

/// Melody distance D in bar-comparable units (16 × normalized DTW cost).
pub fn melody_distance_d(generated: &[Bar], reference: &[Bar]) -> Result<f64> {
    let a = pitch_curve(generated)?;
    let b = pitch_curve(reference)?;
    Ok(POSITIONS_PER_BAR as f64 * dtw_distance(&a, &b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: usize,
    pub h: f64,
    pub gs: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    /// Mean and population standard deviation.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        Self { mean, std: var.sqrt() }
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub failures: Vec<(usize, String)>,
    pub h: Aggregate,
    pub gs: Aggregate,
    pub d: Aggregate,
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>, failures: Vec<(usize, String)>) -> Self {
        Self { h: Aggregate::of(cases.iter().map(|c| c.h)), gs: Aggregate::of(cases.iter().map(|c| c.gs)), d: Aggregate::of(cases.iter().map(|c| c.d)), cases, failures }
    }

    /// Table with one row per named report, `H↓ GS↑ D↓` columns.
    pub fn table(rows: &[(&str, &MetricsReport)]) -> String {
        let mut out = format!("{:<12}{:>14}{:>14}{:>16}{:>8}{:>8}\n", "", "H (lower)", "GS (higher)", "D (lower)", "cases", "failed");
        for (name, r) in rows {
            writeln!(out, "{:<12}{:>14}{:>14}{:>16}{:>8}{:>8}", name, r.h.to_string(), r.gs.to_string(), r.d.to_string(), r.cases.len(), r.failures.len()).unwrap();
        }
        out
    }

    /// Tab-separated `case_id H GS D` records, failures marked `failed`.
    pub fn case_records(&self) -> String {
        let mut out = String::from("case_id\tH\tGS\tD\n");
        let mut rows: Vec<(usize, String)> = self.cases.iter().map(|c| (c.case_id, format!("{}\t{:.6}\t{:.6}\t{:.6}", c.case_id, c.h, c.gs, c.d))).collect();
        rows.extend(self.failures.iter().map(|(id, why)| (*id, format!("{id}\tfailed\tfailed\tfailed\t# {why}"))));
        rows.sort_by_key(|(id, _)| *id);
        for (_, line) in rows {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

fn notes_of(bars: &[Bar]) -> Vec<NoteEvent> {
    bars.iter().flat_map(|b| b.notes.iter().copied()).collect()
}

/// Scores each generated target against its case: H and GS against the
/// case's past and future, D against the ground-truth target.
pub fn evaluate(cases: &[InfillingExample], outputs: &[Vec<Token>]) -> Result<MetricsReport> {
    if cases.len() != outputs.len() {
        return Err(Error::Alignment(cases.len(), outputs.len()));
    }
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (case_id, (case, out)) in cases.iter().zip(outputs).enumerate() {
        let result = (|| -> Result<CaseMetrics> {
            let generated = decode(out)?;
            let truth = decode(&case.target)?;
            let past = decode(&case.past)?;
            let future = decode(&case.future)?;
            let h = cross_entropy_h(&notes_of(&generated), &notes_of(&past), &notes_of(&future))?;
            let context_bars: Vec<Bar> = past.iter().chain(&future).cloned().collect();
            let gs = grooving_similarity_gs(&generated, &context_bars)?;
            let d = melody_distance_d(&generated, &truth)?;
            Ok(CaseMetrics { case_id, h, gs, d })
        })();
        match result {
            Ok(m) => ok.push(m),
            Err(e) => failures.push((case_id, e.to_string())),
        }
    }
    Ok(MetricsReport::from_cases(ok, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn note(position: u8, pitch: u8, duration: u8) -> NoteEvent {
        NoteEvent { bar_index: 0, position, pitch, duration, tempo_bpm: 120 }
    }

    fn bar(notes: Vec<NoteEvent>) -> Bar {
        Bar { tempo_bpm: 120, notes }
    }

    /// Enumerates every monotone warping path; independent of the DP.
    fn brute_force_dtw(a: &[i64], b: &[i64]) -> f64 {
        let ma = a.iter().sum::<i64>() as f64 / a.len() as f64;
        let mb = b.iter().sum::<i64>() as f64 / b.len() as f64;
        let ca: Vec<f64> = a.iter().map(|&v| v as f64 - ma).collect();
        let cb: Vec<f64> = b.iter().map(|&v| v as f64 - mb).collect();
        let mut paths: Vec<(f64, usize)> = Vec::new();
        fn walk(i: usize, j: usize, acc: f64, len: usize, ca: &[f64], cb: &[f64], out: &mut Vec<(f64, usize)>) {
            let acc = acc + (ca[i] - cb[j]).abs();
            let len = len + 1;
            if i == ca.len() - 1 && j == cb.len() - 1 {
                out.push((acc, len));
                return;
            }
            if i + 1 < ca.len() {
                walk(i + 1, j, acc, len, ca, cb, out);
            }
            if j + 1 < cb.len() {
                walk(i, j + 1, acc, len, ca, cb, out);
            }
            if i + 1 < ca.len() && j + 1 < cb.len() {
                walk(i + 1, j + 1, acc, len, ca, cb, out);
            }
        }
        walk(0, 0, 0.0, 0, &ca, &cb, &mut paths);
        let best = paths.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let len = paths.iter().filter(|p| p.0 <= best + 1e-9).map(|p| p.1).min().unwrap();
        best / len as f64
    }

    #[test]
    fn histograms() {
        assert_eq!(pitch_class_histogram(&[note(0, 60, 1); 3]).unwrap()[0], 1.0);
        let uniform: Vec<NoteEvent> = (60..72).map(|p| note(0, p, 1)).collect();
        assert!(pitch_class_histogram(&uniform).unwrap().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let h = pitch_class_histogram(&[note(0, 60, 1), note(0, 60, 1), note(0, 62, 1)]).unwrap();
        assert!((h[0] - 2.0 / 3.0).abs() < 1e-15 && (h[2] - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(pitch_class_histogram(&[]), Err(Error::EmptySegment(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let zero = [note(0, 60, 1), note(4, 72, 1)];
        assert!(cross_entropy_h(&zero, &zero, &[]).unwrap() < 12.0 * HISTOGRAM_EPS);
        let uniform: Vec<NoteEvent> = (60..72).map(|p| note(0, p, 1)).collect();
        let h = cross_entropy_h(&zero, &uniform[..6], &uniform[6..]).unwrap();
        assert!((h - 12f64.ln()).abs() < 1e-6, "{h}");
        assert!(cross_entropy_h(&[], &zero, &zero).is_err());
        assert!(cross_entropy_h(&zero, &[], &[]).is_err());
    }

    #[test]
    fn groove_vectors() {
        let g = grooving_vector(&bar(vec![note(0, 60, 1), note(4, 60, 1), note(8, 60, 1), note(12, 60, 1)]));
        assert_eq!(g.to_string(), "1000100010001000");
        assert_eq!(grooving_vector(&bar(vec![])).0, 0);
        assert_eq!(grooving_vector(&bar(vec![note(3, 60, 1), note(3, 64, 1)])).0.count_ones(), 1);
    }

    #[test]
    fn grooving_similarity_values() {
        let t = bar([0, 4, 8, 12].iter().map(|&p| note(p, 60, 1)).collect());
        let c = bar([0, 4, 8, 12, 14].iter().map(|&p| note(p, 60, 1)).collect());
        assert_eq!(grooving_similarity_gs(&[t.clone()], &[c.clone()]).unwrap(), 0.9375);
        assert_eq!(grooving_similarity_gs(&[t.clone(), t.clone()], &[t.clone()]).unwrap(), 1.0);
        let all = bar((0..16).map(|p| note(p, 60, 1)).collect());
        assert_eq!(grooving_similarity_gs(&[all], &[bar(vec![])]).unwrap(), 0.0);
        // two pairs: 15/16 and 1
        assert_eq!(grooving_similarity_gs(&[t.clone()], &[c, t]).unwrap(), (0.9375 + 1.0) / 2.0);
        assert!(grooving_similarity_gs(&[], &[bar(vec![])]).is_err());
    }

    #[test]
    fn pitch_curve_holds_and_carries() {
        let b = bar(vec![note(2, 62, 2), note(8, 67, 4), note(8, 60, 8)]);
        let c = pitch_curve(&[b]).unwrap();
        assert_eq!(c, vec![62, 62, 62, 62, 62, 62, 62, 62, 67, 67, 67, 67, 60, 60, 60, 60]);
        assert!(pitch_curve(&[bar(vec![])]).is_err());
    }

    #[test]
    fn dtw_matches_exhaustive_oracle_on_hand_built_curves() {
        let a = [60, 62, 64, 65, 67, 65, 64, 62];
        let b = [60, 60, 64, 67, 67, 64];
        assert!((dtw_distance(&a, &b) - brute_force_dtw(&a, &b)).abs() < 1e-9);
        let one = [64];
        assert!((dtw_distance(&one, &a) - brute_force_dtw(&one, &a)).abs() < 1e-9);
    }

    #[test]
    fn identical_and_transposed_segments_have_zero_distance() {
        let seg = vec![bar(vec![note(0, 60, 4), note(4, 64, 4), note(8, 67, 8)]), bar(vec![note(0, 72, 16)])];
        assert_eq!(melody_distance_d(&seg, &seg).unwrap(), 0.0);
        let up: Vec<Bar> = seg.iter().map(|b| bar(b.notes.iter().map(|n| NoteEvent { pitch: n.pitch + 5, ..*n }).collect())).collect();
        assert_eq!(melody_distance_d(&seg, &up).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_ground_truth_and_alignment() {
        use crate::ingest::{build_test_cases, make_synthetic_corpus};
        let songs = make_synthetic_corpus(5, 4, &["i2 A4 A4 B4 o2"]);
        let cases = build_test_cases(&songs).unwrap();
        assert!(!cases.is_empty());
        let outputs: Vec<Vec<Token>> = cases.iter().map(|c| c.target.0.clone()).collect();
        let report = evaluate(&cases, &outputs).unwrap();
        assert_eq!(report.failures.len(), 0);
        assert_eq!(report.d.to_string(), "0.00±0.00");
        assert!(report.gs.mean >= 0.0 && report.gs.mean <= 1.0);
        assert!(matches!(evaluate(&cases, &outputs[1..]), Err(Error::Alignment(..))));
        let single = evaluate(&cases[..1], &outputs[..1]).unwrap();
        assert_eq!(single.h.std, 0.0);
        // an undecodable output is recorded, not aggregated
        let mut bad = outputs.clone();
        bad[0] = vec![Token::Pitch(60)];
        let r = evaluate(&cases, &bad).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.cases.len(), cases.len() - 1);
        assert!(r.case_records().contains("failed"));
        assert!(MetricsReport::table(&[("Original", &report)]).contains("0.00±0.00"));
    }

    proptest! {
        #[test]
        fn dtw_agrees_with_oracle(a in prop::collection::vec(40i64..80, 1..9), b in prop::collection::vec(40i64..80, 1..9)) {
            prop_assert!((dtw_distance(&a, &b) - brute_force_dtw(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn dtw_is_symmetric_and_shift_invariant(a in prop::collection::vec(30i64..90, 1..40), b in prop::collection::vec(30i64..90, 1..40), s in -12i64..12) {
            prop_assert_eq!(dtw_distance(&a, &b), dtw_distance(&b, &a));
            let shifted: Vec<i64> = a.iter().map(|v| v + s).collect();
            prop_assert_eq!(dtw_distance(&shifted, &b), dtw_distance(&a, &b));
            prop_assert_eq!(dtw_distance(&a, &a), 0.0);
        }

        #[test]
        fn gibbs_inequality(p in prop::collection::vec(0u32..20, 12), q in prop::collection::vec(0u32..20, 12)) {
            prop_assume!(p.iter().sum::<u32>() > 0 && q.iter().sum::<u32>() > 0);
            let norm = |v: &[u32]| { let t: u32 = v.iter().sum(); let mut h = [0.0; 12]; for (o, &x) in h.iter_mut().zip(v) { *o = x as f64 / t as f64; } h };
            let (p, q) = (norm(&p), norm(&q));
            let entropy = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
            prop_assert!(histogram_cross_entropy(&p, &q) >= entropy - 1e-12);
            prop_assert!((histogram_cross_entropy(&p, &p) - entropy).abs() < 1e-4);
        }

        #[test]
        fn grooving_similarity_is_symmetric(a in prop::collection::vec(0u8..16, 0..6), b in prop::collection::vec(0u8..16, 0..6)) {
            let x = [bar(a.iter().map(|&p| note(p, 60, 1)).collect())];
            let y = [bar(b.iter().map(|&p| note(p, 60, 1)).collect())];
            let gs = grooving_similarity_gs(&x, &y).unwrap();
            prop_assert_eq!(gs, grooving_similarity_gs(&y, &x).unwrap());
            prop_assert!((0.0..=1.0).contains(&gs));
            prop_assert_eq!(grooving_similarity_gs(&x, &x).unwrap(), 1.0);
        }
    }
}
