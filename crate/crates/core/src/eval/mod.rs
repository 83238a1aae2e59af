//! Ranking evaluation, candidate-similarity buckets, sweeps, emoji-label
//! metrics and attention dumps.

pub mod metrics;
pub mod scorer;
pub mod ssim;

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Vocab};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::Model;
use crate::real::Real;

pub use metrics::{average_precision, rank_of, recall_at_k, RankTally, RankingMetrics, RECALL_KS};
pub use scorer::{MostSelected, PerfectScorer, RandomScorer, Scorer, Scores};
pub use ssim::{ssim, ssim_planes};

/// Number of similarity buckets in the bucket table.
pub const N_BUCKETS: usize = 5;
/// Utterance-count sweep range before clipping to the context length.
pub const UTTERANCE_SWEEP: (usize, usize) = (3, 18);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Utterances,
    History,
}

impl FromStr for SweepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "utterances" => Ok(SweepKind::Utterances),
            "history" => Ok(SweepKind::History),
            other => Err(Error::config(format!("unknown sweep `{other}` (utterances, history)"))),
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Utterances => "utterances",
            SweepKind::History => "history",
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub buckets: bool,
    pub sweeps: Vec<SweepKind>,
    /// Worker threads; 0 lets the pool decide. Results do not depend on it.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBucket {
    pub bucket: usize,
    pub lower: f64,
    pub upper: f64,
    pub n_samples: usize,
    pub mean_similarity: f64,
    pub r_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: usize,
    pub map: f64,
    pub r_at_1: f64,
    pub r_at_2: Option<f64>,
    pub r_at_5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmojiMetrics {
    pub n_labels: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub recall_at: std::collections::BTreeMap<usize, f64>,
    pub n_samples: usize,
    /// Samples the scorer declined to rank (counted as rank last).
    pub abstained: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_table: Option<Vec<SimilarityBucket>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance_sweep: Option<Vec<SweepPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_sweep: Option<Vec<SweepPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emoji: Option<EmojiMetrics>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Rank of the truth for one sample, with abstentions ranked last.
pub fn sample_rank(scorer: &dyn Scorer, sample: &Sample) -> Result<(usize, bool)> {
    match scorer.score(sample)? {
        Scores::Ranked(s) => {
            if s.len() != sample.candidates.len() {
                return Err(Error::shape("score", format!("{} scores for {} candidates", s.len(), sample.candidates.len())));
            }
            Ok((rank_of(&s, sample.truth_index)?, false))
        }
        Scores::Abstain => Ok((sample.candidates.len(), true)),
    }
}

fn ranks(scorer: &dyn Scorer, samples: &[Sample], pool: &rayon::ThreadPool) -> Result<Vec<(usize, bool)>> {
    pool.install(|| samples.par_iter().map(|s| sample_rank(scorer, s)).collect())
}

fn check_candidates(samples: &[Sample], n_candidates: usize) -> Result<()> {
    match samples.iter().find(|s| s.candidates.len() != n_candidates) {
        Some(s) => Err(Error::data(
            Some(s.id),
            format!("sample has {} candidates but the model expects {n_candidates}", s.candidates.len()),
        )),
        None => Ok(()),
    }
}

/// Full pass of `scorer` over `samples`, plus the optional analyses.
pub fn evaluate(scorer: &dyn Scorer, samples: &[Sample], n_candidates: usize, opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::data(None, "nothing to evaluate"));
    }
    check_candidates(samples, n_candidates)?;
    let pool = pool(opts.threads)?;
    let rk = ranks(scorer, samples, &pool)?;
    let mut tally = RankTally::new(n_candidates);
    rk.iter().for_each(|&(r, _)| tally.add_rank(r));
    let m = tally.finish();
    let bucket_table = if opts.buckets {
        let sims = pool.install(|| samples.par_iter().map(candidate_similarity).collect::<Result<Vec<f64>>>())?;
        let r: Vec<usize> = rk.iter().map(|&(r, _)| r).collect();
        Some(bucket_table(&sims, &r))
    } else {
        None
    };
    let mut report = EvalReport {
        map: m.map,
        recall_at: m.recall_at,
        n_samples: m.n_samples,
        abstained: rk.iter().filter(|&&(_, a)| a).count(),
        bucket_table,
        utterance_sweep: None,
        history_sweep: None,
        emoji: None,
    };
    for kind in opts.sweeps.iter().copied().collect::<BTreeSet<_>>() {
        let points = sweep(scorer, samples, n_candidates, kind, &pool)?;
        match kind {
            SweepKind::Utterances => report.utterance_sweep = Some(points),
            SweepKind::History => report.history_sweep = Some(points),
        }
    }
    Ok(report)
}

/// Mean SSIM between the truth sticker and each negative.
pub fn candidate_similarity(sample: &Sample) -> Result<f64> {
    let truth = &sample.candidates[sample.truth_index].image;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, c) in sample.candidates.iter().enumerate() {
        if i != sample.truth_index {
            sum += ssim(truth, &c.image)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::data(Some(sample.id), "no negatives to compare against"));
    }
    Ok(sum / n as f64)
}

/// Equal-width bucket of `s` over `[lo, hi]`; a degenerate range puts
/// everything in the top bucket.
pub fn bucket_of(s: f64, lo: f64, hi: f64, n: usize) -> usize {
    if hi <= lo {
        return n - 1;
    }
    (((s - lo) / (hi - lo) * n as f64).floor() as usize).min(n - 1)
}

/// R@1 per similarity bucket. Empty buckets are left out.
pub fn bucket_table(similarity: &[f64], ranks: &[usize]) -> Vec<SimilarityBucket> {
    let lo = similarity.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = similarity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / N_BUCKETS as f64 } else { 0.0 };
    let mut acc = [(0usize, 0.0f64, 0usize); N_BUCKETS];
    for (&s, &r) in similarity.iter().zip(ranks) {
        let b = bucket_of(s, lo, hi, N_BUCKETS);
        acc[b].0 += 1;
        acc[b].1 += s;
        acc[b].2 += usize::from(r == 1);
    }
    acc.iter()
        .enumerate()
        .filter(|(_, a)| a.0 > 0)
        .map(|(b, &(n, sum, hits))| SimilarityBucket {
            bucket: b,
            lower: if width > 0.0 { lo + width * b as f64 } else { lo },
            upper: if width > 0.0 {
                if b + 1 == N_BUCKETS {
                    hi
                } else {
                    lo + width * (b + 1) as f64
                }
            } else {
                hi
            },
            n_samples: n,
            mean_similarity: sum / n as f64,
            r_at_1: hits as f64 / n as f64,
        })
        .collect()
}

/// The x values a sweep visits for contexts of `max_utterances` slots and
/// `max_history` history slots.
pub fn sweep_range(kind: SweepKind, max_utterances: usize, max_history: usize) -> Vec<usize> {
    match kind {
        SweepKind::Utterances => {
            let hi = UTTERANCE_SWEEP.1.min(max_utterances);
            (UTTERANCE_SWEEP.0.min(hi).max(1)..=hi).collect()
        }
        SweepKind::History => (0..=max_history).collect(),
    }
}

fn sweep(
    scorer: &dyn Scorer,
    samples: &[Sample],
    n_candidates: usize,
    kind: SweepKind,
    pool: &rayon::ThreadPool,
) -> Result<Vec<SweepPoint>> {
    let t_u = samples[0].context.utterances.len();
    let t_h = samples[0].history_mask.len();
    let mut out = Vec::new();
    for x in sweep_range(kind, t_u, t_h) {
        let masked: Vec<Sample> = samples
            .iter()
            .map(|s| match kind {
                SweepKind::Utterances => s.with_utterances(x),
                SweepKind::History => s.with_history_len(x),
            })
            .collect();
        let mut tally = RankTally::new(n_candidates);
        ranks(scorer, &masked, pool)?.iter().for_each(|&(r, _)| tally.add_rank(r));
        let m = tally.finish();
        out.push(SweepPoint { x, map: m.map, r_at_1: m.recall(1).unwrap_or(0.0), r_at_2: m.recall(2), r_at_5: m.recall(5) });
    }
    Ok(out)
}

/// `x,map,r_at_1,r_at_2,r_at_5`; cutoffs above the candidate count are blank.
pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut s = String::from("x,map,r_at_1,r_at_2,r_at_5\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        s.push_str(&format!("{},{},{},{},{}\n", p.x, p.map, p.r_at_1, opt(p.r_at_2), opt(p.r_at_5)));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Accuracy and macro-F1 of the emoji head over every labelled candidate.
/// `None` when the model has no head or no sample carries labels.
pub fn emoji_metrics<T: Real>(model: &Model<T>, samples: &[Sample], threads: usize) -> Result<Option<EmojiMetrics>> {
    let Some(n_classes) = model.config.n_emoji else { return Ok(None) };
    let per: Vec<Vec<(usize, usize)>> = pool(threads)?.install(|| {
        samples
            .par_iter()
            .filter(|s| s.emoji_labels.is_some())
            .map(|s| -> Result<Vec<(usize, usize)>> {
                let mut g = Graph::new(&model.params, Mode::Eval, 0);
                let out = model.forward(&mut g, s)?;
                let labels = s.emoji_labels.as_ref().expect("filtered");
                out.candidates
                    .iter()
                    .zip(labels)
                    .map(|(c, &y)| {
                        let logits = g.value(c.emoji_logits.expect("head present"));
                        let pred = argmax(logits.iter().map(|v| v.to_f64_lossy()));
                        Ok((y, pred))
                    })
                    .collect()
            })
            .collect::<Result<_>>()
    })?;
    let pairs: Vec<(usize, usize)> = per.into_iter().flatten().collect();
    Ok(classification_metrics(&pairs, n_classes))
}

fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Accuracy and F1 averaged over classes that occur as a label or a
/// prediction.
pub fn classification_metrics(pairs: &[(usize, usize)], n_classes: usize) -> Option<EmojiMetrics> {
    if pairs.is_empty() {
        return None;
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for &(y, p) in pairs {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| tp[c] + fp[c] + fn_[c] > 0).collect();
    let f1 = |c: usize| {
        let d = 2 * tp[c] + fp[c] + fn_[c];
        if d == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / d as f64
        }
    };
    Some(EmojiMetrics {
        n_labels: pairs.len(),
        accuracy: tp.iter().sum::<usize>() as f64 / pairs.len() as f64,
        macro_f1: present.iter().map(|&c| f1(c)).sum::<f64>() / present.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAttention {
    pub index: usize,
    pub sticker: String,
    pub score: f64,
    pub gate: f64,
    /// Per utterance, the sticker-unit weights as a `p x p` grid.
    pub tau_s: Vec<Vec<Vec<f64>>>,
    /// Per utterance, one weight per real word.
    pub tau_u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sample: usize,
    pub truth_index: usize,
    pub no_history: bool,
    /// Memory weights over the filled history slots.
    pub delta: Option<Vec<f64>>,
    /// Real words of each utterance, when a vocabulary is supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<Vec<String>>>,
    pub candidates: Vec<CandidateAttention>,
}

/// Attention weights, gate and score for every candidate of `sample`.
pub fn attention_record<T: Real>(model: &Model<T>, sample: &Sample, vocab: Option<&Vocab>) -> Result<AttentionRecord> {
    let mut g = Graph::new(&model.params, Mode::Eval, 0);
    let out = model.forward(&mut g, sample)?;
    let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    let p = model.config.grid;
    let word_masks: Vec<&Vec<bool>> = sample.context.real_utterances().map(|u| &u.mask).collect();
    let delta =
        out.delta.map(|d| g.value(d).iter().zip(&out.slot_mask).filter(|(_, &m)| m).map(|(v, _)| v.to_f64_lossy()).collect());
    let words = vocab.map(|v| {
        sample
            .context
            .real_utterances()
            .map(|u| u.real_tokens().iter().map(|&t| v.token(t).unwrap_or("<unk>").to_string()).collect())
            .collect()
    });
    let candidates = out
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| CandidateAttention {
            index: i,
            sticker: sample.candidates[i].id.clone(),
            score: g.scalar(c.score.y_hat).to_f64_lossy(),
            gate: g.scalar(c.score.gate).to_f64_lossy(),
            tau_s: c.tau_s.iter().map(|&t| f(g.value(t)).chunks(p).map(<[f64]>::to_vec).collect()).collect(),
            tau_u: c
                .tau_u
                .iter()
                .zip(&word_masks)
                .map(|(&t, m)| g.value(t).iter().zip(m.iter()).filter(|(_, &k)| k).map(|(v, _)| v.to_f64_lossy()).collect())
                .collect(),
        })
        .collect();
    Ok(AttentionRecord {
        sample: sample.id,
        truth_index: sample.truth_index,
        no_history: out.no_history,
        delta,
        words,
        candidates,
    })
}

pub fn attention_report<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    vocab: Option<&Vocab>,
    threads: usize,
) -> Result<Vec<AttentionRecord>> {
    pool(threads)?.install(|| samples.par_iter().map(|s| attention_record(model, s, vocab)).collect())
}

/// One JSON object per line.
pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(Some(i + 1), e.to_string())))
        .collect()
}
