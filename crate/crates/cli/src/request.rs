//! Declarative infill request files.
//!
//! ```toml
//! past = "past.mid"           # .mid/.midi, or a file holding one token line
//! future = "future.txt"
//! contexts = ["a.mid", "b.mid"]
//! bar_count = 4
//! bar_plan = [1, 1, 2, 2]     # default: all 1 with contexts, all 0 without
//! past_plan = [0, 0, 1, 1, 1, 1]
//! [sampling]
//! top_p = 0.9
//! ```
//!
//! Relative paths resolve against the request file's directory. Plans give
//! the structure index of each bar read from MIDI; contexts read from MIDI
//! carry their own number on every bar.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Deserialize;
use strucfill::infill::Sampling;
use strucfill::ingest::read_melody_bars;
use strucfill::tokenizer::{decode_full, encode_bars, TokenSeq};

/// Sampling fields that may be left unset so lower-precedence sources show through.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingOverrides {
    pub top_p: Option<f64>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub greedy: Option<bool>,
}

impl SamplingOverrides {
    /// Fills unset fields from `lower`.
    pub fn or(self, lower: &SamplingOverrides) -> Self {
        Self { top_p: self.top_p.or(lower.top_p), temperature: self.temperature.or(lower.temperature), seed: self.seed.or(lower.seed), greedy: self.greedy.or(lower.greedy) }
    }

    pub fn resolve(&self) -> Sampling {
        let d = Sampling::default();
        Sampling {
            top_p: self.top_p.unwrap_or(d.top_p),
            temperature: self.temperature.unwrap_or(d.temperature),
            seed: self.seed.unwrap_or(d.seed),
            greedy: self.greedy.unwrap_or(d.greedy),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestFile {
    pub past: Option<PathBuf>,
    pub future: Option<PathBuf>,
    #[serde(default)]
    pub contexts: Vec<PathBuf>,
    pub bar_count: Option<usize>,
    pub bar_plan: Option<Vec<u8>>,
    pub past_plan: Option<Vec<u8>>,
    pub future_plan: Option<Vec<u8>>,
    pub max_tokens: Option<usize>,
    #[serde(default)]
    pub sampling: SamplingOverrides,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Segments of a request after reading every referenced file.
#[derive(Debug, Clone)]
pub struct LoadedSegments {
    pub past: TokenSeq,
    pub future: TokenSeq,
    pub contexts: Vec<TokenSeq>,
}

impl RequestFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading request {}", path.display()))?;
        let mut req: Self = toml::from_str(&text).with_context(|| format!("parsing request {}", path.display()))?;
        req.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in req.past.iter().chain(&req.future).chain(&req.contexts) {
            let full = req.base_dir.join(p);
            ensure!(full.is_file(), "request {}: {} does not exist", path.display(), full.display());
        }
        Ok(req)
    }

    pub fn segments(&self) -> Result<LoadedSegments> {
        let seg = |p: &Option<PathBuf>, plan: &Option<Vec<u8>>| match p {
            Some(p) => read_segment(&self.base_dir.join(p), |n| plan_ids(plan.as_deref(), n, 0)),
            None => Ok(TokenSeq::new()),
        };
        let past = seg(&self.past, &self.past_plan)?;
        let future = seg(&self.future, &self.future_plan)?;
        let contexts = self.contexts.iter().enumerate().map(|(i, p)| read_segment(&self.base_dir.join(p), |n| Ok(vec![i as u8 + 1; n]))).collect::<Result<Vec<_>>>()?;
        Ok(LoadedSegments { past, future, contexts })
    }
}

fn plan_ids(plan: Option<&[u8]>, bars: usize, fill: u8) -> Result<Vec<u8>> {
    match plan {
        None => Ok(vec![fill; bars]),
        Some(p) if p.len() == bars => Ok(p.to_vec()),
        Some(p) => bail!("plan has {} entries for {bars} bars", p.len()),
    }
}

pub fn is_midi(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

/// Reads a MIDI melody (structure ids from `ids`) or a single token line.
pub fn read_segment(path: &Path, ids: impl FnOnce(usize) -> Result<Vec<u8>>) -> Result<TokenSeq> {
    let seq = if is_midi(path) {
        let bars = read_melody_bars(path, None)?;
        let ids = ids(bars.len()).with_context(|| path.display().to_string())?;
        encode_bars(&bars, &ids, false)?
    } else {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let seq: TokenSeq = text.trim().parse().with_context(|| format!("parsing tokens in {}", path.display()))?;
        seq
    };
    decode_full(&seq).with_context(|| format!("{} is not a valid bar sequence", path.display()))?;
    Ok(seq)
}

/// Structure index per generated bar, as given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan(pub Vec<u8>);

/// Parses `--plan "1,1,2,2"`.
pub fn parse_plan(text: &str) -> Result<Plan, String> {
    text.split(',').map(|w| w.trim().parse::<u8>().map_err(|_| format!("bad plan entry `{w}`"))).collect::<Result<_, _>>().map(Plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_precedence_fills_gaps_only() {
        let high = SamplingOverrides { top_p: Some(0.5), ..Default::default() };
        let low = SamplingOverrides { top_p: Some(0.7), seed: Some(3), ..Default::default() };
        let s = high.or(&low).resolve();
        assert_eq!((s.top_p, s.seed, s.temperature), (0.5, 3, 1.0));
    }

    #[test]
    fn plans_parse_and_check_lengths() {
        assert_eq!(parse_plan("1, 1,2").unwrap(), Plan(vec![1, 1, 2]));
        assert!(parse_plan("1,x").is_err());
        assert!(plan_ids(Some(&[1, 2]), 3, 0).is_err());
        assert_eq!(plan_ids(None, 2, 0).unwrap(), vec![0, 0]);
    }
}
