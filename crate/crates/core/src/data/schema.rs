use std::sync::Arc;

use crate::config::DataConfig;
use crate::data::image::Image;
use crate::data::vocab::{Vocab, PAD_ID};
use crate::error::{Error, Result};

pub type TokenId = usize;

/// One utterance padded to the configured word count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<TokenId>,
    /// True for real tokens; always a prefix of trues.
    pub mask: Vec<bool>,
    /// Word count before truncation.
    pub raw_len: usize,
}

impl Utterance {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn real_tokens(&self) -> &[TokenId] {
        &self.tokens[..self.real_len()]
    }
}

/// Keeps the first `max_len` tokens and pads the rest with [`PAD_ID`].
pub fn pad_or_truncate(raw: &[TokenId], max_len: usize) -> Utterance {
    let keep = raw.len().min(max_len);
    let mut tokens = raw[..keep].to_vec();
    tokens.resize(max_len, PAD_ID);
    let mask = (0..max_len).map(|i| i < keep).collect();
    Utterance { tokens, mask, raw_len: raw.len() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogContext {
    pub utterances: Vec<Utterance>,
    pub utterance_mask: Vec<bool>,
}

impl DialogContext {
    /// Builds a context from raw text, keeping the most recent
    /// `max_utterances` non-empty utterances.
    pub fn from_text(lines: &[String], vocab: &Vocab, cfg: &DataConfig) -> Result<Self> {
        let token_lists: Vec<Vec<TokenId>> = lines.iter().map(|l| vocab.tokenize(l)).filter(|t| !t.is_empty()).collect();
        Self::from_tokens(&token_lists, cfg)
    }

    pub fn from_tokens(token_lists: &[Vec<TokenId>], cfg: &DataConfig) -> Result<Self> {
        let real: Vec<&Vec<TokenId>> = token_lists.iter().filter(|t| !t.is_empty()).collect();
        if real.is_empty() {
            return Err(Error::data(None, "dialog context has no non-empty utterance"));
        }
        let start = real.len().saturating_sub(cfg.max_utterances);
        let mut utterances: Vec<Utterance> = real[start..].iter().map(|t| pad_or_truncate(t, cfg.max_words)).collect();
        let n_real = utterances.len();
        utterances.resize(cfg.max_utterances, pad_or_truncate(&[], cfg.max_words));
        let utterance_mask = (0..cfg.max_utterances).map(|i| i < n_real).collect();
        Ok(DialogContext { utterances, utterance_mask })
    }

    pub fn n_real(&self) -> usize {
        self.utterance_mask.iter().filter(|&&m| m).count()
    }

    pub fn real_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().zip(&self.utterance_mask).filter(|(_, &m)| m).map(|(u, _)| u)
    }

    /// Keeps only the last `n` real utterances (at least one).
    pub fn keep_last(&self, n: usize) -> DialogContext {
        let lists: Vec<Vec<TokenId>> = self.real_utterances().map(|u| u.real_tokens().to_vec()).collect();
        let n = n.max(1).min(lists.len());
        let cfg = DataConfig {
            max_utterances: self.utterances.len(),
            max_words: self.utterances[0].tokens.len(),
            ..DataConfig::default()
        };
        let mut ctx = Self::from_tokens(&lists[lists.len() - n..], &cfg).expect("non-empty context");
        for (u, orig) in ctx.utterances.iter_mut().zip(self.real_utterances().skip(lists.len() - n)) {
            u.raw_len = orig.raw_len;
        }
        ctx
    }
}

/// A sticker image with a stable identity (its manifest path).
#[derive(Debug, Clone)]
pub struct Sticker {
    pub id: String,
    pub image: Arc<Image>,
}

impl PartialEq for Sticker {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.image == other.image
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPair {
    pub context: DialogContext,
    pub sticker: Sticker,
    /// 1 = oldest retained pair.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 1-based manifest line, or generation index for synthetic data.
    pub id: usize,
    pub context: DialogContext,
    pub candidates: Vec<Sticker>,
    pub truth_index: usize,
    /// Chronological, at most `max_history` pairs.
    pub history: Vec<HistoryPair>,
    /// `max_history` long; true for slots holding a pair.
    pub history_mask: Vec<bool>,
    pub user_id: String,
    pub emoji_labels: Option<Vec<usize>>,
    /// Speaker of each raw context utterance, when the corpus records it.
    pub speakers: Option<Vec<String>>,
}

impl Sample {
    pub fn validate(&self, cfg: &DataConfig) -> Result<()> {
        let fail = |msg: String| Err(Error::data(Some(self.id), msg));
        if self.candidates.len() != cfg.n_candidates {
            return fail(format!("record has {} candidates, expected {}", self.candidates.len(), cfg.n_candidates));
        }
        if self.truth_index >= self.candidates.len() {
            return fail(format!("truth_index {} out of range", self.truth_index));
        }
        if self.context.utterances.len() != cfg.max_utterances || self.context.n_real() == 0 {
            return fail("context does not match the utterance layout".into());
        }
        if self.history.len() > cfg.max_history || self.history_mask.len() != cfg.max_history {
            return fail("history longer than configured maximum".into());
        }
        for (k, h) in self.history.iter().enumerate() {
            if h.position != k + 1 || !self.history_mask[k] {
                return fail("history positions must be contiguous from 1".into());
            }
        }
        if self.history_mask[self.history.len()..].iter().any(|&m| m) {
            return fail("history mask marks empty slots".into());
        }
        if let Some(l) = &self.emoji_labels {
            if l.len() != self.candidates.len() {
                return fail("emoji_labels length differs from candidates".into());
            }
        }
        Ok(())
    }

    pub fn history_sticker_ids(&self) -> Vec<&str> {
        self.history.iter().map(|h| h.sticker.id.as_str()).collect()
    }

    /// Copy keeping only the most recent `n` history pairs.
    pub fn with_history_len(&self, n: usize) -> Sample {
        let mut s = self.clone();
        let drop = s.history.len().saturating_sub(n);
        s.history.drain(..drop);
        for (k, h) in s.history.iter_mut().enumerate() {
            h.position = k + 1;
        }
        for (k, m) in s.history_mask.iter_mut().enumerate() {
            *m = k < s.history.len();
        }
        s
    }

    /// Copy keeping only the last `n` context utterances.
    pub fn with_utterances(&self, n: usize) -> Sample {
        let mut s = self.clone();
        s.context = self.context.keep_last(n);
        s
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab: Vocab,
    pub emoji_vocab: Option<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
