//! Constrained autoregressive infilling, nucleus sampling and the Copy baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{wrap_segments, InfillingExample, SegmentBounds};
use crate::model::{effective_positions, Model};
use crate::scalar::Scalar;
use crate::tokenizer::{decode, encode_bars, Bar, Token, TokenKind, TokenSeq, Vocabulary, MAX_BARS, PITCH_MAX, PITCH_MIN, POSITIONS_PER_BAR};

/// Tolerance on the total mass of a distribution handed to the sampler.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampling {
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Take the most probable allowed token instead of sampling.
    pub greedy: bool,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { top_p: 0.9, temperature: 1.0, seed: 0, greedy: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfillRequest {
    pub past: TokenSeq,
    pub future: TokenSeq,
    /// `contexts[n - 1]` is structural context `n`.
    pub contexts: Vec<TokenSeq>,
    pub bar_count: usize,
    /// Structure index of every generated bar.
    pub bar_plan: Vec<u8>,
    pub sampling: Sampling,
    /// Cap on generated tokens.
    pub max_tokens: usize,
}

pub const DEFAULT_MAX_TOKENS: usize = 1024;

impl InfillRequest {
    /// Request to regenerate an example's target with the target's own plan.
    pub fn from_example(example: &InfillingExample, sampling: Sampling) -> Self {
        let bar_plan = example
            .target
            .windows(2)
            .filter_map(|w| match (w[0], w[1]) {
                (Token::Bar(_), Token::Struct(s)) => Some(s),
                _ => None,
            })
            .collect();
        Self {
            past: example.past.clone(),
            future: example.future.clone(),
            contexts: example.contexts.clone(),
            bar_count: example.target_bars,
            bar_plan,
            sampling,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BARS).contains(&self.bar_count) {
            return Err(Error::Range { kind: TokenKind::Bar, value: self.bar_count as i64 });
        }
        if self.bar_plan.len() != self.bar_count {
            return Err(Error::Config(format!("bar_plan has {} entries for {} bars", self.bar_plan.len(), self.bar_count)));
        }
        if let Some(&y) = self.bar_plan.iter().max() {
            if y as usize > self.contexts.len() {
                return Err(Error::Index { index: y as usize, available: self.contexts.len() });
            }
        }
        let s = &self.sampling;
        if !(s.top_p > 0.0 && s.top_p <= 1.0) || !(s.temperature > 0.0 && s.temperature.is_finite()) {
            return Err(Error::Config(format!("invalid sampling settings {s:?}")));
        }
        Ok(())
    }
}

fn check_distribution(dist: &[f64]) -> Result<()> {
    if let Some(p) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Distribution(format!("entry {p} is not a probability")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::Distribution(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Smallest prefix of ids sorted by descending probability (ties by
/// ascending id) whose mass reaches `top_p`, with renormalized probabilities.
pub fn nucleus(dist: &[f64], top_p: f64) -> Result<Vec<(usize, f64)>> {
    check_distribution(dist)?;
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Config(format!("top_p {top_p} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += dist[i];
        if mass >= top_p {
            break;
        }
    }
    Ok(kept.into_iter().map(|i| (i, dist[i] / mass)).collect())
}

pub fn nucleus_sample(dist: &[f64], top_p: f64, rng: &mut impl Rng) -> Result<usize> {
    let members = nucleus(dist, top_p)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in &members {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(members.last().expect("a valid distribution has a nonempty nucleus").0)
}

/// Most probable id; the lowest id wins ties.
pub fn greedy(dist: &[f64]) -> Result<usize> {
    check_distribution(dist)?;
    Ok((0..dist.len()).fold(0, |best, i| if dist[i] > dist[best] { i } else { best }))
}

/// Grammar state of the bar being generated.
struct BarState {
    /// Bars still to be started, the current one included.
    remaining: usize,
    plan_value: u8,
    /// `(position, pitch)` of the bar's previous note.
    last_note: Option<(u8, u8)>,
    pending_position: Option<u8>,
}

impl BarState {
    /// Ids allowed after `last`. Notes follow the tokenizer's canonical
    /// order: positions never decrease within a bar and pitches rise at a
    /// shared position. Without `room` for another note the bar must close.
    fn allowed_after(&self, last: Token, room: bool) -> Vec<usize> {
        let id = Vocabulary::id_of;
        match last {
            Token::Bar(_) => vec![id(Token::Struct(self.plan_value))],
            Token::Struct(_) => Vocabulary::kind_range(TokenKind::Tempo).collect(),
            Token::Position(p) => {
                let floor = match self.last_note {
                    Some((lp, lq)) if lp == p => lq + 1,
                    _ => PITCH_MIN,
                };
                (floor..=PITCH_MAX).map(|q| id(Token::Pitch(q))).collect()
            }
            Token::Pitch(_) => Vocabulary::kind_range(TokenKind::Duration).collect(),
            _ => {
                let mut ids = Vec::new();
                if room {
                    let from = match self.last_note {
                        Some((lp, PITCH_MAX)) => lp + 1,
                        Some((lp, _)) => lp,
                        None => 0,
                    };
                    ids.extend((from..POSITIONS_PER_BAR).map(|p| id(Token::Position(p))));
                }
                ids.push(if self.remaining > 1 { id(Token::Bar(self.remaining as u8 - 1)) } else { id(Token::Eos) });
                ids
            }
        }
    }

    fn advance(&mut self, token: Token, plan: &[u8]) {
        match token {
            Token::Bar(_) => {
                self.remaining -= 1;
                self.plan_value = plan[plan.len() - self.remaining];
                self.last_note = None;
            }
            Token::Position(p) => self.pending_position = Some(p),
            Token::Pitch(q) => self.last_note = self.pending_position.map(|p| (p, q)),
            _ => {}
        }
    }
}

/// Longest target (in tokens fed to the decoder) that keeps every effective
/// position valid, capped at `max_tokens`.
fn target_capacity(past: usize, future: usize, prompt_len: usize, cfg: &crate::model::ModelConfig, max_tokens: usize) -> usize {
    let fits = |t: usize| effective_positions(&SegmentBounds::from_lengths(past, future, t), prompt_len + t, cfg.order_offsets, cfg.max_position).is_ok();
    let (mut lo, mut hi) = (0, max_tokens);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

fn masked_distribution<T: Scalar>(logits: &[T], allowed: &[usize], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = allowed.iter().map(|&i| logits[i].to_f64_lossy() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut dist = vec![0.0; logits.len()];
    for (&i, e) in allowed.iter().zip(exps) {
        dist[i] = e / total;
    }
    dist
}

/// Infills `request.bar_count` bars between the past and future contexts.
///
/// Decoding starts from `{BOS, past, SEP, future, SEP}` with a forced
/// `Bar(bar_count)`. At every step only grammatical continuations are
/// allowed: the Struct after a Bar is the plan value, Bar payloads count down,
/// notes come in canonical order, and EOS is only allowed once the last bar
/// has started. Notes are masked out once the tokens needed to close the
/// remaining bars would exceed `max_tokens` or the position table, so every
/// call returns exactly `bar_count` bars. Each generated token carries the
/// plan index of its bar.
pub fn generate<T: Scalar>(model: &Model<T>, request: &InfillRequest) -> Result<TokenSeq> {
    request.validate()?;
    let cfg = model.config();
    let prompt = wrap_segments(&request.past, &request.future, &[], false);
    if let Some(&y) = prompt.indices.iter().max() {
        if y as usize > request.contexts.len() {
            return Err(Error::Index { index: y as usize, available: request.contexts.len() });
        }
    }
    let (past_len, future_len) = (request.past.len(), request.future.len());
    let capacity = target_capacity(past_len, future_len, prompt.tokens.len(), cfg, request.max_tokens);
    // Bar, Struct and Tempo for every bar
    if capacity < 3 * request.bar_count {
        return Err(Error::Capacity(format!("room for {capacity} target tokens, {} bars need {}", request.bar_count, 3 * request.bar_count)));
    }
    let bounds = SegmentBounds::from_lengths(past_len, future_len, capacity);
    let positions = effective_positions(&bounds, prompt.tokens.len() + capacity, cfg.order_offsets, cfg.max_position)?;

    let memories = model.encode_contexts(&request.contexts.iter().map(|c| c.ids()).collect::<Vec<_>>())?;
    let mut decoder = model.decoder(&memories);
    for ((&token, &pos), &y) in prompt.tokens.iter().zip(&positions).zip(&prompt.indices) {
        decoder.step(Vocabulary::id_of(token), pos, y as usize)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(request.sampling.seed);
    let mut out = TokenSeq::new();
    let mut state = BarState { remaining: request.bar_count + 1, plan_value: 0, last_note: None, pending_position: None };
    let mut next = Token::Bar(request.bar_count as u8);
    loop {
        state.advance(next, &request.bar_plan);
        out.push(next);
        let pos = positions[prompt.tokens.len() + out.len() - 1];
        let logits = decoder.step(Vocabulary::id_of(next), pos, state.plan_value as usize)?;

        // a note is three tokens, every later bar at least three more
        let room = out.len() + 3 + 3 * (state.remaining - 1) <= capacity;
        let allowed = state.allowed_after(next, room);
        let id = if allowed.len() == 1 {
            allowed[0]
        } else {
            let dist = masked_distribution(&logits, &allowed, request.sampling.temperature);
            let id = if request.sampling.greedy { greedy(&dist)? } else { nucleus_sample(&dist, request.sampling.top_p, &mut rng)? };
            debug_assert!(allowed.contains(&id));
            id
        };
        next = Vocabulary::token_of(id).expect("allowed ids are in the vocabulary");
        if next == Token::Eos {
            return Ok(out);
        }
    }
}

fn fallback_tempo(request: &InfillRequest) -> u16 {
    let last = |seq: &TokenSeq| seq.iter().rev().find_map(|t| if let Token::Tempo(v) = t { Some(*v) } else { None });
    let first = |seq: &TokenSeq| seq.iter().find_map(|t| if let Token::Tempo(v) = t { Some(*v) } else { None });
    last(&request.past).or_else(|| first(&request.future)).unwrap_or(120)
}

/// Copies bars of the planned contexts, cycling through each context
/// separately; bars planned with index 0 are left empty.
pub fn copy_baseline(request: &InfillRequest) -> Result<TokenSeq> {
    request.validate()?;
    let sources: Vec<Vec<Bar>> = request.contexts.iter().map(|c| decode(c)).collect::<Result<_>>()?;
    let mut used = vec![0usize; sources.len()];
    let mut tempo = fallback_tempo(request);
    let mut bars = Vec::with_capacity(request.bar_count);
    for (j, &n) in request.bar_plan.iter().enumerate() {
        let mut b = match n {
            0 => Bar::empty(tempo),
            n => {
                let src = &sources[n as usize - 1];
                if src.is_empty() {
                    return Err(Error::EmptySegment("copied context has no bars"));
                }
                let b = src[used[n as usize - 1] % src.len()].clone();
                used[n as usize - 1] += 1;
                b
            }
        };
        tempo = b.tempo_bpm;
        for note in &mut b.notes {
            note.bar_index = j as u32;
        }
        bars.push(b);
    }
    encode_bars(&bars, &request.bar_plan, true)
}
