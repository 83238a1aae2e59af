//! Seeded synthetic corpora with a planted, recoverable ranking rule.
//!
//! Every sticker belongs to a style: a procedural image pattern (hue plus
//! stripe/checker/ring texture). Every style owns a cluster of vocabulary
//! words. A dialog that ends in a sticker of style `s` mentions words of
//! cluster `s` (with probability `signal` per content word; otherwise a word
//! of a random cluster). Users prefer a few styles and reuse a favourite
//! sticker per style, so their history predicts the next selection.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::data::image::Image;
use crate::data::manifest::{ingest_record, write_dataset, HistoryRecord, MemoryImages, Record};
use crate::data::negatives::sample_negatives;
use crate::data::schema::{Dataset, Sticker};
use crate::data::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_users: usize,
    pub n_styles: usize,
    pub stickers_per_style: usize,
    pub words_per_style: usize,
    pub filler_words: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_candidates: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Longest history attached to a sample.
    pub max_history: usize,
    /// Probability that a content word names the selected style.
    pub signal: f64,
    /// Styles each user favours.
    pub styles_per_user: usize,
    /// Probability that a selection comes from the user's favoured styles.
    pub preference: f64,
    /// Probability of reusing the user's favourite sticker of a style.
    pub repeat: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 64,
            n_users: 4,
            n_styles: 6,
            stickers_per_style: 2,
            words_per_style: 2,
            filler_words: 20,
            image_size: 16,
            channels: 3,
            n_candidates: 10,
            min_utterances: 1,
            max_utterances: 3,
            min_words: 1,
            max_words: 2,
            max_history: 3,
            signal: 1.0,
            styles_per_user: 3,
            preference: 0.8,
            repeat: 0.54,
        }
    }
}

impl SyntheticSpec {
    /// Corpus shaped for [`ModelConfig::tiny`](crate::config::ModelConfig::tiny).
    pub fn tiny() -> Self {
        SyntheticSpec {
            n_styles: 6,
            words_per_style: 3,
            filler_words: 30,
            image_size: 16,
            n_candidates: 4,
            max_utterances: 3,
            min_words: 2,
            max_words: 5,
            max_history: 2,
            styles_per_user: 2,
            ..SyntheticSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synthetic spec: {m}")));
        if self.n_styles == 0 || self.stickers_per_style == 0 || self.words_per_style == 0 {
            return bad("needs at least one style, sticker and word per style");
        }
        if self.n_samples == 0 || self.n_users == 0 {
            return bad("needs at least one sample and one user");
        }
        if self.n_candidates < 2 {
            return bad("needs at least two candidates");
        }
        let others = (self.n_styles - 1) * self.stickers_per_style;
        if others < self.n_candidates - 1 {
            return bad(&format!("{others} off-style stickers cannot fill {} negatives", self.n_candidates - 1));
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return bad("utterance range must satisfy 1 <= min <= max");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("word range must satisfy 1 <= min <= max");
        }
        if self.channels != 1 && self.channels != 3 || self.image_size < 4 {
            return bad("images must be at least 4 pixels with 1 or 3 channels");
        }
        for (name, p) in [("signal", self.signal), ("preference", self.preference), ("repeat", self.repeat)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.styles_per_user == 0 || self.styles_per_user > self.n_styles {
            return bad("styles_per_user must lie in 1..=n_styles");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        2 + self.n_styles * self.words_per_style + self.filler_words
    }
}

/// The generator's own ground truth: which style each word and sticker
/// belongs to.
#[derive(Debug, Clone)]
pub struct PlantedRule {
    word_style: HashMap<String, usize>,
    sticker_style: HashMap<String, usize>,
}

impl PlantedRule {
    pub fn sticker_style(&self, id: &str) -> Option<usize> {
        self.sticker_style.get(id).copied()
    }

    pub fn word_style(&self, word: &str) -> Option<usize> {
        self.word_style.get(word).copied()
    }

    /// Scores each candidate by how many context words name its style.
    pub fn score(&self, rec: &Record) -> Vec<f64> {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for line in &rec.context {
            for w in line.split_whitespace() {
                if let Some(s) = self.word_style(w) {
                    *counts.entry(s).or_default() += 1.0;
                }
            }
        }
        rec.candidates.iter().map(|c| self.sticker_style(c).and_then(|s| counts.get(&s).copied()).unwrap_or(0.0)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub records: Vec<Record>,
    pub images: HashMap<String, Image>,
    pub vocab: Vocab,
    pub emoji_labels: Vec<String>,
    pub rule: PlantedRule,
}

impl SyntheticCorpus {
    /// Ingests the records exactly as [`load_dataset`](crate::data::load_dataset)
    /// would after [`write`](Self::write).
    pub fn to_dataset(&self, cfg: &DataConfig) -> Result<Dataset> {
        let mut source = MemoryImages::new(&self.images, cfg);
        let vocab = self.vocab.clone().with_tokenizer(cfg.tokenizer);
        let n_emoji = Some(self.emoji_labels.len());
        let samples = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| ingest_record(r, i + 1, &vocab, n_emoji, cfg, &mut source))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples, vocab, emoji_vocab: Some(self.emoji_labels.clone()) })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_dataset(dir, &self.records, &self.vocab, Some(&self.emoji_labels), &self.images)
    }

    /// Data layout matching the generated corpus.
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            image_size: self.spec.image_size,
            channels: self.spec.channels,
            max_words: self.spec.max_words,
            max_utterances: self.spec.max_utterances,
            max_history: self.spec.max_history,
            n_candidates: self.spec.n_candidates,
            ..DataConfig::default()
        }
    }
}

struct Event {
    context: Vec<String>,
    speakers: Vec<String>,
    style: usize,
    sticker: usize,
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cluster_words: Vec<Vec<String>> =
        (0..spec.n_styles).map(|s| (0..spec.words_per_style).map(|i| format!("w{s}_{i}")).collect()).collect();
    let fillers: Vec<String> = (0..spec.filler_words).map(|i| format!("f{i}")).collect();
    let mut words: Vec<String> = cluster_words.iter().flatten().cloned().collect();
    words.extend(fillers.iter().cloned());
    let vocab = Vocab::from_words(&words)?;

    let n_stickers = spec.n_styles * spec.stickers_per_style;
    let sticker_style: Vec<usize> = (0..n_stickers).map(|i| i / spec.stickers_per_style).collect();
    let sticker_ids: Vec<String> = (0..n_stickers).map(|i| format!("images/s{i:03}.png")).collect();
    let mut images = HashMap::new();
    let mut stickers = Vec::with_capacity(n_stickers);
    for (i, id) in sticker_ids.iter().enumerate() {
        let img = style_image(sticker_style[i], i % spec.stickers_per_style, spec, &mut rng);
        stickers.push(Sticker { id: id.clone(), image: Arc::new(img.clone()) });
        images.insert(id.clone(), img);
    }

    let emoji_labels: Vec<String> = (0..spec.n_styles).map(|s| format!("emoji{s:02}")).collect();
    let rule = PlantedRule {
        word_style: cluster_words.iter().enumerate().flat_map(|(s, ws)| ws.iter().map(move |w| (w.clone(), s))).collect(),
        sticker_style: sticker_ids.iter().cloned().zip(sticker_style.iter().copied()).collect(),
    };

    // Favoured styles are dealt round-robin from one shuffled order so every
    // style is favoured by about the same number of users.
    let mut order: Vec<usize> = (0..spec.n_styles).collect();
    order.shuffle(&mut rng);
    let users: Vec<(Vec<usize>, Vec<usize>)> = (0..spec.n_users)
        .map(|u| {
            let styles = (0..spec.styles_per_user).map(|i| order[(u * spec.styles_per_user + i) % spec.n_styles]).collect();
            let fav = (0..spec.n_styles).map(|_| rng.random_range(0..spec.stickers_per_style)).collect();
            (styles, fav)
        })
        .collect();

    let mut timelines: Vec<Vec<Event>> = (0..spec.n_users).map(|_| Vec::new()).collect();
    let mut records = Vec::with_capacity(spec.n_samples);
    for n in 0..spec.n_samples {
        let u = n % spec.n_users;
        let (styles, fav) = &users[u];
        let style = if rng.random_bool(spec.preference) {
            *styles.choose(&mut rng).expect("non-empty")
        } else {
            rng.random_range(0..spec.n_styles)
        };
        let within = if rng.random_bool(spec.repeat) { fav[style] } else { rng.random_range(0..spec.stickers_per_style) };
        let sticker = style * spec.stickers_per_style + within;
        let (context, speakers) = dialog(style, u, spec, &cluster_words, &fillers, &mut rng);
        let event = Event { context, speakers, style, sticker };

        let pool: Vec<Sticker> =
            (0..n_stickers).filter(|&i| sticker_style[i] != event.style).map(|i| stickers[i].clone()).collect();
        let (cands, truth_index) = sample_negatives(&pool, &stickers[sticker], spec.n_candidates - 1, &mut rng)?;
        let timeline = &timelines[u];
        let start = timeline.len().saturating_sub(spec.max_history);
        records.push(Record {
            context: event.context.clone(),
            candidates: cands.iter().map(|c| c.id.clone()).collect(),
            truth_index,
            history: timeline[start..]
                .iter()
                .map(|e| HistoryRecord { context: e.context.clone(), sticker: sticker_ids[e.sticker].clone() })
                .collect(),
            user_id: format!("user{u:03}"),
            emoji_labels: Some(cands.iter().map(|c| rule.sticker_style[&c.id]).collect()),
            speakers: Some(event.speakers.clone()),
        });
        timelines[u].push(event);
    }
    Ok(SyntheticCorpus { spec: spec.clone(), records, images, vocab, emoji_labels, rule })
}

fn dialog(
    style: usize,
    user: usize,
    spec: &SyntheticSpec,
    clusters: &[Vec<String>],
    fillers: &[String],
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, Vec<String>) {
    let n_utt = rng.random_range(spec.min_utterances..=spec.max_utterances);
    let mut lines = Vec::with_capacity(n_utt);
    let mut speakers = Vec::with_capacity(n_utt);
    for i in 0..n_utt {
        let n_words = rng.random_range(spec.min_words..=spec.max_words);
        let mut ws: Vec<String> =
            (0..n_words).map(|_| fillers.choose(rng).cloned().unwrap_or_else(|| clusters[style][0].clone())).collect();
        // One content word per utterance at a random slot.
        let s = if rng.random_bool(spec.signal) { style } else { rng.random_range(0..clusters.len()) };
        let slot = rng.random_range(0..n_words);
        ws[slot] = clusters[s].choose(rng).expect("non-empty cluster").clone();
        lines.push(ws.join(" "));
        let who = if (n_utt - i) % 2 == 1 { format!("user{user:03}") } else { format!("peer{}", rng.random_range(0..3)) };
        speakers.push(who);
    }
    (lines, speakers)
}

/// Procedural sticker: a hue per style, one of four textures, and a
/// per-variant phase shift and brightness jitter. Values are quantized to
/// 8 bits so the PNG copy decodes to the same numbers.
fn style_image(style: usize, variant: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Image {
    let n = spec.image_size;
    let hue = style as f64 / spec.n_styles as f64;
    let rgb = hsv_to_rgb(hue, 0.85, 0.95);
    let texture = style % 4;
    let period = 4.0 + (style / 4 % 3) as f64 * 2.0;
    let phase = variant as f64 * 1.7 + rng.random_range(0.0..0.5);
    let jitter = 1.0 - 0.08 * variant as f64;
    let mut bytes = Vec::with_capacity(n * n * spec.channels);
    let c = (n as f64 - 1.0) / 2.0;
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let on = match texture {
                0 => ((fy + phase) / period * std::f64::consts::PI).sin() > 0.0,
                1 => ((fx + phase) / period * std::f64::consts::PI).sin() > 0.0,
                2 => (((fx + phase) / period).floor() as i64 + ((fy + phase) / period).floor() as i64) % 2 == 0,
                _ => ((((fx - c).powi(2) + (fy - c).powi(2)).sqrt() + phase) / period).floor() as i64 % 2 == 0,
            };
            let level = if on { jitter } else { 0.15 };
            let px = [rgb.0 * level, rgb.1 * level, rgb.2 * level];
            if spec.channels == 1 {
                bytes.push(quantize(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]));
            } else {
                bytes.extend(px.iter().map(|&v| quantize(v)));
            }
        }
    }
    Image::from_u8(n, n, spec.channels, &bytes).expect("sized buffer")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn planted_r1(corpus: &SyntheticCorpus) -> f64 {
        let hits = corpus
            .records
            .iter()
            .filter(|r| {
                let s = corpus.rule.score(r);
                let t = s[r.truth_index];
                s.iter().enumerate().all(|(i, &v)| i == r.truth_index || v < t)
            })
            .count();
        hits as f64 / corpus.records.len() as f64
    }

    #[test]
    fn generates_requested_valid_samples() {
        let spec = SyntheticSpec::default();
        let c = gen_synthetic(&spec, 7).unwrap();
        let ds = c.to_dataset(&c.data_config()).unwrap();
        assert_eq!(ds.len(), 64);
        for s in &ds.samples {
            s.validate(&c.data_config()).unwrap();
        }
    }

    #[test]
    fn same_seed_gives_identical_manifests() {
        let spec = SyntheticSpec::default();
        let a = gen_synthetic(&spec, 3).unwrap();
        let b = gen_synthetic(&spec, 3).unwrap();
        assert_eq!(serde_json::to_string(&a.records).unwrap(), serde_json::to_string(&b.records).unwrap());
        assert_eq!(a.images, b.images);
        let c = gen_synthetic(&spec, 4).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn planted_rule_is_perfect_at_full_signal() {
        let c = gen_synthetic(&SyntheticSpec { n_samples: 300, ..SyntheticSpec::default() }, 1).unwrap();
        assert_eq!(planted_r1(&c), 1.0);
    }

    #[test]
    fn weak_signal_degrades_the_rule() {
        let spec = SyntheticSpec { n_samples: 300, signal: 0.0, ..SyntheticSpec::default() };
        let c = gen_synthetic(&spec, 1).unwrap();
        assert!(planted_r1(&c) < 0.5);
    }

    #[test]
    fn zero_styles_is_rejected() {
        assert!(gen_synthetic(&SyntheticSpec { n_styles: 0, ..SyntheticSpec::default() }, 0).is_err());
    }

    #[test]
    fn disk_round_trip_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { n_samples: 8, ..SyntheticSpec::default() };
        let c = gen_synthetic(&spec, 5).unwrap();
        c.write(dir.path()).unwrap();
        let cfg = c.data_config();
        let disk = crate::data::load_dataset(dir.path(), &cfg).unwrap().collect_all().unwrap();
        let mem = c.to_dataset(&cfg).unwrap();
        assert_eq!(disk.samples, mem.samples);
        assert_eq!(disk.emoji_vocab, mem.emoji_vocab);
    }

    #[test]
    fn history_repeats_are_common() {
        let c = gen_synthetic(&SyntheticSpec { n_samples: 400, ..SyntheticSpec::default() }, 2).unwrap();
        let with_hist: Vec<_> = c.records.iter().filter(|r| !r.history.is_empty()).collect();
        let repeats = with_hist.iter().filter(|r| r.history.iter().any(|h| h.sticker == r.candidates[r.truth_index])).count();
        assert!(repeats as f64 / with_hist.len() as f64 > 0.3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_specs_emit_valid_samples(
            n_samples in 1usize..20,
            n_users in 1usize..5,
            n_styles in 3usize..8,
            per in 2usize..4,
            max_history in 0usize..5,
            max_utt in 1usize..4,
            seed in 0u64..1000,
        ) {
            let spec = SyntheticSpec {
                n_samples, n_users, n_styles, stickers_per_style: per, max_history,
                max_utterances: max_utt, min_utterances: 1, n_candidates: 4, image_size: 8,
                styles_per_user: 2, ..SyntheticSpec::default()
            };
            let c = gen_synthetic(&spec, seed).unwrap();
            let cfg = c.data_config();
            let ds = c.to_dataset(&cfg).unwrap();
            prop_assert_eq!(ds.len(), n_samples);
            for s in &ds.samples {
                prop_assert!(s.validate(&cfg).is_ok());
                prop_assert!(s.history.len() <= max_history);
                let truth = &s.candidates[s.truth_index];
                for (i, c) in s.candidates.iter().enumerate() {
                    prop_assert!(i == s.truth_index || c.image.data != truth.image.data);
                }
            }
        }
    }
}
