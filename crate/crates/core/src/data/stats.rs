use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::schema::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub pairs: usize,
    /// Mean raw word count over retained context utterances.
    pub avg_words_per_utterance: f64,
    pub avg_utterances_per_context: f64,
    /// Mean distinct speakers per context; `None` without speaker data.
    pub avg_participating_users: Option<f64>,
    /// History length → number of samples.
    pub history_histogram: BTreeMap<usize, usize>,
    /// Fraction of samples with at least one history pair.
    pub history_coverage: f64,
    /// Mean history length over all samples.
    pub avg_history_len: f64,
    /// Mean history length over samples that have history.
    pub avg_history_len_nonempty: Option<f64>,
    pub unique_stickers: usize,
}

pub fn dataset_stats(samples: &[Sample]) -> Result<StatsReport> {
    if samples.is_empty() {
        return Err(Error::data(None, "statistics requested for an empty dataset"));
    }
    let n = samples.len() as f64;
    let (mut words, mut utts) = (0usize, 0usize);
    let mut speakers_sum = 0usize;
    let mut with_speakers = 0usize;
    let mut hist = BTreeMap::new();
    let mut stickers = BTreeSet::new();
    for s in samples {
        for u in s.context.real_utterances() {
            words += u.raw_len;
            utts += 1;
        }
        if let Some(sp) = &s.speakers {
            speakers_sum += sp.iter().collect::<BTreeSet<_>>().len();
            with_speakers += 1;
        }
        *hist.entry(s.history.len()).or_insert(0) += 1;
        stickers.extend(s.candidates.iter().map(|c| c.id.as_str()));
        stickers.extend(s.history.iter().map(|h| h.sticker.id.as_str()));
    }
    let covered: usize = hist.iter().filter(|(&k, _)| k > 0).map(|(_, &v)| v).sum();
    let hist_total: usize = hist.iter().map(|(&k, &v)| k * v).sum();
    Ok(StatsReport {
        pairs: samples.len(),
        avg_words_per_utterance: words as f64 / utts as f64,
        avg_utterances_per_context: utts as f64 / n,
        avg_participating_users: (with_speakers == samples.len()).then(|| speakers_sum as f64 / n),
        history_histogram: hist,
        history_coverage: covered as f64 / n,
        avg_history_len: hist_total as f64 / n,
        avg_history_len_nonempty: (covered > 0).then(|| hist_total as f64 / covered as f64),
        unique_stickers: stickers.len(),
    })
}
