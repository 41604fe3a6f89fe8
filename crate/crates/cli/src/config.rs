//! `--config` run files: seed, model preset and overrides, training and
//! sampling defaults. Command-line flags and their env vars win over these.

use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Deserialize;
use strucfill::model::ModelConfig;
use strucfill::train::TrainConfig;

use crate::request::SamplingOverrides;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Tiny,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Fields left out keep the preset's value.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub cross_attention_heads: Option<usize>,
    pub max_position: Option<usize>,
    pub order_offsets: Option<[usize; 3]>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub precision: Option<Precision>,
    #[serde(default)]
    pub model: ModelOverrides,
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sampling: SamplingOverrides,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Preset (flag first, then file) with the file's overrides applied.
    pub fn model_config(&self, preset: Option<Preset>) -> Result<ModelConfig> {
        let mut cfg = match preset.or(self.preset).unwrap_or_default() {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Paper => ModelConfig::paper(),
        };
        let o = &self.model;
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = o.$f { cfg.$f = v; })* };
        }
        apply!(d_model, encoder_layers, decoder_layers, heads, ffn_dim, cross_attention_heads, order_offsets, dropout);
        if let Some(mp) = o.max_position {
            cfg = cfg.with_max_position(mp);
            if let Some(off) = o.order_offsets {
                cfg.order_offsets = off;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_over_the_preset() {
        let rc: RunConfig = toml::from_str("preset = \"tiny\"\n[model]\nd_model = 32\nmax_position = 512\n").unwrap();
        let cfg = rc.model_config(None).unwrap();
        assert_eq!(cfg.d_model, 32);
        assert_eq!(cfg.max_position, 512);
        assert_eq!(cfg.order_offsets, strucfill::model::default_offsets(512));
        assert_eq!(rc.model_config(Some(Preset::Paper)).unwrap().d_model, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nwidth = 3\n").is_err());
    }
}
