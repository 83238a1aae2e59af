//! Run configuration: model shape, training hyperparameters, ablations.
//!
//! Configs are TOML documents with `[model]`, `[train]` and `[synthetic]`
//! tables. Every field has a default; unknown keys are rejected. Overrides
//! of the form `section.key=value` are applied to the parsed document before
//! it is deserialized, so they are validated against the same schema.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticSpec;
use crate::data::vocab::Tokenizer;
use crate::error::{Error, Result};
use crate::nn::ConvStackGeom;
use crate::real::FloatWidth;

/// Upper bound on retained history pairs per sample.
pub const MAX_HISTORY_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channels of the conv stages before the last one; the last stage always
    /// outputs `hidden` channels.
    pub conv_channels: Vec<usize>,
    /// Side `p` of the sticker feature grid.
    pub grid: usize,
    /// Word embedding width and hidden width `d`.
    pub hidden: usize,
    pub ffn_dim: usize,
    pub n_head: usize,
    pub vocab_size: usize,
    pub max_words: usize,
    pub max_utterances: usize,
    pub max_history: usize,
    pub n_candidates: usize,
    pub tokenizer: Tokenizer,
    /// Width of the learned history-position embedding.
    pub position_dim: usize,
    pub n_emoji: Option<usize>,
    pub dropout: f64,
    pub init_std: f64,
    /// History contexts reuse the current-context utterance encoder.
    pub share_history_encoder: bool,
    /// Key and value chains of the position-aware layer share one GRU.
    pub share_history_grus: bool,
    pub ablation: Ablation,
    pub memory_variant: MemoryVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            in_channels: 3,
            conv_channels: vec![16, 32],
            grid: 4,
            hidden: 100,
            ffn_dim: 100,
            n_head: 2,
            vocab_size: 0,
            max_words: 30,
            max_utterances: 10,
            max_history: 10,
            n_candidates: 10,
            tokenizer: Tokenizer::Whitespace,
            position_dim: 8,
            n_emoji: None,
            dropout: 0.1,
            init_std: 0.02,
            share_history_encoder: true,
            share_history_grus: false,
            ablation: Ablation::default(),
            memory_variant: MemoryVariant::Full,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that exercises every component: `d = 8`,
    /// a 2x2 sticker grid, 3 utterances of 5 words, 2 history slots.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            in_channels: 3,
            conv_channels: vec![4],
            grid: 2,
            hidden: 8,
            ffn_dim: 8,
            n_head: 2,
            vocab_size: 50,
            max_words: 5,
            max_utterances: 3,
            max_history: 2,
            n_candidates: 4,
            position_dim: 4,
            n_emoji: Some(6),
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    /// Copies the data layout of a synthetic corpus spec into this config.
    pub fn fit_synthetic(mut self, spec: &SyntheticSpec) -> Self {
        self.image_size = spec.image_size;
        self.in_channels = spec.channels;
        self.vocab_size = spec.vocab_size();
        self.max_words = spec.max_words;
        self.max_utterances = spec.max_utterances;
        self.max_history = spec.max_history;
        self.n_candidates = spec.n_candidates;
        self.n_emoji = Some(spec.n_styles);
        self
    }

    pub fn conv_geom(&self) -> ConvStackGeom {
        let mut channels = self.conv_channels.clone();
        channels.push(self.hidden);
        ConvStackGeom { image_size: self.image_size, in_channels: self.in_channels, channels, grid: self.grid }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("hidden", self.hidden),
            ("ffn_dim", self.ffn_dim),
            ("n_head", self.n_head),
            ("vocab_size", self.vocab_size),
            ("max_words", self.max_words),
            ("max_utterances", self.max_utterances),
            ("position_dim", self.position_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.n_head) {
            return Err(Error::config(format!("hidden {} not divisible by {} heads", self.hidden, self.n_head)));
        }
        if self.n_candidates < 2 {
            return Err(Error::config("model.n_candidates must be at least 2"));
        }
        if self.max_history > MAX_HISTORY_CAP {
            return Err(Error::config(format!("model.max_history is capped at {MAX_HISTORY_CAP}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must lie in [0, 1)"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::config("model.init_std must be non-negative"));
        }
        if self.n_emoji == Some(0) {
            return Err(Error::config("model.n_emoji must be positive when set"));
        }
        self.conv_geom().validate()?;
        self.ablation.validate()?;
        if self.ablation.no_upm && self.memory_variant != MemoryVariant::Full {
            return Err(Error::config("a memory variant cannot be combined with the no-preference-memory ablation"));
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            image_size: self.image_size,
            channels: self.in_channels,
            max_words: self.max_words,
            max_utterances: self.max_utterances,
            max_history: self.max_history,
            n_candidates: self.n_candidates,
            tokenizer: self.tokenizer,
        }
    }

    /// Whether the model keeps the emoji head and its loss.
    pub fn classify(&self) -> bool {
        self.n_emoji.is_some() && !self.ablation.no_classify
    }
}

/// Shape constraints applied while ingesting samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataConfig {
    pub image_size: usize,
    pub channels: usize,
    pub max_words: usize,
    pub max_utterances: usize,
    pub max_history: usize,
    pub n_candidates: usize,
    pub tokenizer: Tokenizer,
}

impl Default for DataConfig {
    fn default() -> Self {
        ModelConfig::default().data_config()
    }
}

/// Which components are removed (or, for `fr2t`, swapped).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop the auxiliary emoji classification loss.
    pub no_classify: bool,
    /// Replace co-attention with `FC(O_flat ⊕ mean(h))`.
    pub no_din: bool,
    /// Remove the fusion GRU; its output is replaced by the raw interaction sequence.
    pub no_fr: bool,
    /// Replace the fusion GRU with a positional self-attention block.
    pub fr2t: bool,
    /// Remove the preference memory; the preference input is zero.
    pub no_upm: bool,
    /// Bypass the position-aware history GRUs.
    pub no_tar: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 6] = ["classify", "din", "fr", "fr2t", "upm", "tar"];

    pub fn validate(&self) -> Result<()> {
        if self.fr2t && self.no_fr {
            return Err(Error::config("ablations `fr2t` and `fr` are mutually exclusive"));
        }
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        *self == Ablation::default()
    }

    /// Parses a comma-separated list such as `upm,tar`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        let mut seen = BTreeSet::new();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            if !seen.insert(name.to_owned()) {
                return Err(Error::config(format!("ablation `{name}` given twice")));
            }
            match name {
                "classify" => a.no_classify = true,
                "din" => a.no_din = true,
                "fr" => a.no_fr = true,
                "fr2t" => a.fr2t = true,
                "upm" => a.no_upm = true,
                "tar" => a.no_tar = true,
                other => {
                    return Err(Error::config(format!(
                        "unknown ablation `{other}` (expected one of {})",
                        Ablation::NAMES.join(", ")
                    )))
                }
            }
        }
        a.validate()?;
        Ok(a)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags = [self.no_classify, self.no_din, self.no_fr, self.fr2t, self.no_upm, self.no_tar];
        let names: Vec<&str> = Ablation::NAMES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect();
        if names.is_empty() {
            f.write_str("full")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryVariant {
    /// Key addressing over history contexts, read from history stickers.
    #[default]
    Full,
    /// Unweighted mean of the history sticker slots.
    AverageMem,
    /// Query attends directly over the history sticker slots.
    WeightedMem,
    /// No model: predict the user's most frequently selected sticker.
    MostSelected,
}

impl FromStr for MemoryVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full" => Ok(MemoryVariant::Full),
            "average-mem" | "averagemem" => Ok(MemoryVariant::AverageMem),
            "weighted-mem" | "weightedmem" => Ok(MemoryVariant::WeightedMem),
            "most-selected" | "mostselected" => Ok(MemoryVariant::MostSelected),
            other => {
                Err(Error::config(format!("unknown memory variant `{other}` (full, average-mem, weighted-mem, most-selected)")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub lambda_cls: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every N optimizer steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub float_width: FloatWidth,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.3,
            lambda_cls: 1.0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            batch_size: 32,
            max_epochs: 10,
            seed: 0,
            checkpoint_every: 0,
            float_width: FloatWidth::Wide,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::config("train.margin must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.lambda_cls >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::config("train.lr, train.lambda_cls and train.clip_norm must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("adam moments must lie in [0, 1) with positive epsilon"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        Ok(())
    }
}

/// Everything a run needs, as read from a config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
}

impl Config {
    /// Reads `path` (if any) and applies `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Config = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets `section.key` (dotted path) in a TOML table. The value is parsed as
/// TOML, falling back to a bare string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("bad override key `{path}`")));
    }
    let value = parse_value(raw.trim());
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}
