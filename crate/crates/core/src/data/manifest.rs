//! Line-delimited JSON manifest ingestion.
//!
//! A dataset directory holds `manifest.jsonl`, `vocab.txt`, an optional
//! `emoji.txt` label list and the image files the manifest references by
//! path relative to the manifest.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::data::image::Image;
use crate::data::schema::{Dataset, DialogContext, HistoryPair, Sample, Sticker};
use crate::data::vocab::{load_labels, Vocab};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const EMOJI_FILE: &str = "emoji.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub context: Vec<String>,
    pub candidates: Vec<String>,
    pub truth_index: usize,
    #[serde(default)]
    pub history: Vec<HistoryRecord>,
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emoji_labels: Option<Vec<usize>>,
    /// Speaker per context utterance; used only for corpus statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speakers: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRecord {
    pub context: Vec<String>,
    pub sticker: String,
}

/// Resolves sticker paths to decoded images.
pub trait ImageSource {
    fn image(&mut self, id: &str) -> Result<Arc<Image>>;
}

/// Decodes from disk relative to `root`, caching by path.
pub struct DiskImages {
    root: PathBuf,
    size: usize,
    channels: usize,
    cache: HashMap<String, Arc<Image>>,
}

impl DiskImages {
    pub fn new(root: &Path, cfg: &DataConfig) -> Self {
        DiskImages { root: root.to_path_buf(), size: cfg.image_size, channels: cfg.channels, cache: HashMap::new() }
    }
}

impl ImageSource for DiskImages {
    fn image(&mut self, id: &str) -> Result<Arc<Image>> {
        if let Some(img) = self.cache.get(id) {
            return Ok(img.clone());
        }
        let path = self.root.join(id);
        if !path.is_file() {
            return Err(Error::data(None, format!("missing image file {}", path.display())));
        }
        let img = Arc::new(Image::load_png(&path, self.size, self.channels)?);
        self.cache.insert(id.to_string(), img.clone());
        Ok(img)
    }
}

/// Serves images already held in memory, converting them the same way
/// [`DiskImages`] would.
pub struct MemoryImages<'a> {
    images: &'a HashMap<String, Image>,
    size: usize,
    channels: usize,
    cache: HashMap<String, Arc<Image>>,
}

impl<'a> MemoryImages<'a> {
    pub fn new(images: &'a HashMap<String, Image>, cfg: &DataConfig) -> Self {
        MemoryImages { images, size: cfg.image_size, channels: cfg.channels, cache: HashMap::new() }
    }
}

impl ImageSource for MemoryImages<'_> {
    fn image(&mut self, id: &str) -> Result<Arc<Image>> {
        if let Some(img) = self.cache.get(id) {
            return Ok(img.clone());
        }
        let src = self.images.get(id).ok_or_else(|| Error::data(None, format!("missing image {id}")))?;
        let img = if src.height == self.size && src.width == self.size && src.channels == self.channels {
            src.clone()
        } else {
            let bytes = src.to_u8();
            let dynamic = if src.channels == 1 {
                image::DynamicImage::ImageLuma8(
                    image::GrayImage::from_raw(src.width as u32, src.height as u32, bytes).expect("sized"),
                )
            } else {
                image::DynamicImage::ImageRgb8(
                    image::RgbImage::from_raw(src.width as u32, src.height as u32, bytes).expect("sized"),
                )
            };
            Image::from_dynamic(dynamic, self.size, self.channels)?
        };
        let img = Arc::new(img);
        self.cache.insert(id.to_string(), img.clone());
        Ok(img)
    }
}

/// Turns one manifest record into a validated [`Sample`].
pub fn ingest_record(
    rec: &Record,
    id: usize,
    vocab: &Vocab,
    n_emoji: Option<usize>,
    cfg: &DataConfig,
    images: &mut dyn ImageSource,
) -> Result<Sample> {
    let at_line = |e: Error| match e {
        Error::Data { line: None, msg } => Error::Data { line: Some(id), msg },
        Error::Image { path, source } => Error::Data { line: Some(id), msg: format!("{}: {source}", path.display()) },
        other => other,
    };
    if rec.candidates.len() != cfg.n_candidates {
        return Err(Error::data(
            Some(id),
            format!("record has {} candidates, expected {}", rec.candidates.len(), cfg.n_candidates),
        ));
    }
    if rec.truth_index >= rec.candidates.len() {
        return Err(Error::data(
            Some(id),
            format!("truth_index {} out of range for {} candidates", rec.truth_index, rec.candidates.len()),
        ));
    }
    if let Some(labels) = &rec.emoji_labels {
        if labels.len() != rec.candidates.len() {
            return Err(Error::data(Some(id), "emoji_labels length differs from candidates"));
        }
        if let Some(n) = n_emoji {
            if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
                return Err(Error::data(Some(id), format!("emoji label {bad} outside the {n}-label vocabulary")));
            }
        }
    }
    let context = DialogContext::from_text(&rec.context, vocab, cfg).map_err(at_line)?;
    let candidates = rec
        .candidates
        .iter()
        .map(|p| Ok(Sticker { id: p.clone(), image: images.image(p).map_err(at_line)? }))
        .collect::<Result<Vec<_>>>()?;
    let start = rec.history.len().saturating_sub(cfg.max_history);
    let mut history = Vec::with_capacity(rec.history.len() - start);
    for h in &rec.history[start..] {
        let context = DialogContext::from_text(&h.context, vocab, cfg).map_err(at_line)?;
        let image = images.image(&h.sticker).map_err(at_line)?;
        history.push(HistoryPair { context, sticker: Sticker { id: h.sticker.clone(), image }, position: history.len() + 1 });
    }
    let history_mask = (0..cfg.max_history).map(|k| k < history.len()).collect();
    let sample = Sample {
        id,
        context,
        candidates,
        truth_index: rec.truth_index,
        history,
        history_mask,
        user_id: rec.user_id.clone(),
        emoji_labels: rec.emoji_labels.clone(),
        speakers: rec.speakers.clone(),
    };
    sample.validate(cfg)?;
    Ok(sample)
}

/// Streaming reader yielding samples in manifest order.
pub struct DatasetReader {
    lines: Lines<BufReader<File>>,
    line_no: usize,
    vocab: Vocab,
    emoji_vocab: Option<Vec<String>>,
    cfg: DataConfig,
    images: DiskImages,
}

/// Opens a dataset directory (or a manifest file inside one).
pub fn load_dataset(path: &Path, cfg: &DataConfig) -> Result<DatasetReader> {
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let vocab = Vocab::load(&root.join(VOCAB_FILE))?.with_tokenizer(cfg.tokenizer);
    let emoji_path = root.join(EMOJI_FILE);
    let emoji_vocab = if emoji_path.is_file() { Some(load_labels(&emoji_path)?) } else { None };
    Ok(DatasetReader {
        lines: BufReader::new(file).lines(),
        line_no: 0,
        vocab,
        emoji_vocab,
        cfg: *cfg,
        images: DiskImages::new(&root, cfg),
    })
}

impl DatasetReader {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn emoji_vocab(&self) -> Option<&[String]> {
        self.emoji_vocab.as_deref()
    }

    /// Drains the stream into memory.
    pub fn collect_all(mut self) -> Result<Dataset> {
        let mut samples = Vec::new();
        for s in self.by_ref() {
            samples.push(s?);
        }
        Ok(Dataset { samples, vocab: self.vocab, emoji_vocab: self.emoji_vocab })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::data(Some(self.line_no), format!("read failed: {e}")))),
            };
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => return Some(Err(Error::data(Some(self.line_no), format!("malformed record: {e}")))),
            };
            let n_emoji = self.emoji_vocab.as_ref().map(Vec::len);
            return Some(ingest_record(&rec, self.line_no, &self.vocab, n_emoji, &self.cfg, &mut self.images));
        }
    }
}

/// Writes records, vocabulary, optional emoji labels and PNG images under `dir`.
pub fn write_dataset(
    dir: &Path,
    records: &[Record],
    vocab: &Vocab,
    emoji_vocab: Option<&[String]>,
    images: &HashMap<String, Image>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut out = std::io::BufWriter::new(File::create(&manifest).map_err(|e| Error::io(&manifest, e))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    if let Some(labels) = emoji_vocab {
        let p = dir.join(EMOJI_FILE);
        let mut text = labels.join("\n");
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    let mut ids: Vec<&String> = images.keys().collect();
    ids.sort();
    for id in ids {
        let p = dir.join(id);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        images[id].save_png(&p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig {
            image_size: 4,
            channels: 3,
            max_words: 5,
            max_utterances: 3,
            max_history: 2,
            n_candidates: 2,
            ..DataConfig::default()
        }
    }

    fn write_fixture(dir: &Path, lines: &[&str]) {
        let vocab = Vocab::from_words(&["hi", "cat"]).unwrap();
        let mut images = HashMap::new();
        images.insert("img/a.png".to_string(), Image::from_u8(4, 4, 3, &[10; 48]).unwrap());
        images.insert("img/b.png".to_string(), Image::from_u8(4, 4, 3, &[90; 48]).unwrap());
        write_dataset(dir, &[], &vocab, None, &images).unwrap();
        std::fs::write(dir.join(MANIFEST_FILE), lines.join("\n")).unwrap();
    }

    const GOOD: &str = r#"{"context":["hi cat","cat"],"candidates":["img/a.png","img/b.png"],"truth_index":1,"history":[{"context":["hi"],"sticker":"img/a.png"}],"user_id":"u1"}"#;

    #[test]
    fn two_valid_lines_give_two_samples() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), &[GOOD, GOOD]);
        let ds = load_dataset(dir.path(), &cfg()).unwrap().collect_all().unwrap();
        assert_eq!(ds.len(), 2);
        let s = &ds.samples[0];
        assert_eq!(s.context.n_real(), 2);
        assert_eq!(s.context.utterances[0].real_tokens(), &[2, 3]);
        assert_eq!(s.history.len(), 1);
        assert_eq!(s.history_mask, vec![true, false]);
        assert!(Arc::ptr_eq(&s.candidates[0].image, &s.history[0].sticker.image));
    }

    #[test]
    fn wrong_candidate_count_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let bad = r#"{"context":["hi"],"candidates":["img/a.png"],"truth_index":0,"user_id":"u"}"#;
        write_fixture(dir.path(), &[GOOD, bad]);
        let results: Vec<_> = load_dataset(dir.path(), &cfg()).unwrap().collect();
        assert!(results[0].is_ok());
        match &results[1] {
            Err(Error::Data { line: Some(2), msg }) => assert!(msg.contains("1 candidates")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_truth_index_missing_image_and_garbage_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let truth = GOOD.replace("\"truth_index\":1", "\"truth_index\":5");
        let missing = GOOD.replace("img/b.png", "img/zzz.png");
        write_fixture(dir.path(), &[&truth, &missing, "{not json"]);
        let results: Vec<_> = load_dataset(dir.path(), &cfg()).unwrap().collect();
        for (i, r) in results.iter().enumerate() {
            match r {
                Err(Error::Data { line: Some(l), .. }) => assert_eq!(*l, i + 1),
                other => panic!("line {}: unexpected {other:?}", i + 1),
            }
        }
    }

    #[test]
    fn history_is_truncated_to_most_recent() {
        let dir = tempfile::tempdir().unwrap();
        let rec = GOOD.replace(
            r#""history":[{"context":["hi"],"sticker":"img/a.png"}]"#,
            r#""history":[{"context":["hi"],"sticker":"img/a.png"},{"context":["cat"],"sticker":"img/b.png"},{"context":["hi hi"],"sticker":"img/b.png"}]"#,
        );
        write_fixture(dir.path(), &[&rec]);
        let ds = load_dataset(dir.path(), &cfg()).unwrap().collect_all().unwrap();
        let h = &ds.samples[0].history;
        assert_eq!(h.len(), 2);
        assert_eq!(h[0].context.utterances[0].real_tokens(), &[3]);
        assert_eq!((h[0].position, h[1].position), (1, 2));
    }
}
