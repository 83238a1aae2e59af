//! Whole runs: data generation, training with logging, evaluation. The
//! command line is a thin layer over these.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Config, ModelConfig};
use crate::data::manifest::{EMOJI_FILE, VOCAB_FILE};
use crate::data::synthetic::{gen_synthetic, SyntheticCorpus, SyntheticSpec};
use crate::data::vocab::load_labels;
use crate::data::{load_dataset, Dataset, Sample, Vocab};
use crate::error::{Error, Result};
use crate::eval::{emoji_metrics, evaluate, EvalOptions, EvalReport, RankTally, Scorer};
use crate::model::Model;
use crate::real::{FloatWidth, Real};
use crate::train::{EpochOutcome, MetricsLog, TrainSummary, Trainer};

pub const LAYOUT_FILE: &str = "layout.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

/// Shape of a generated dataset, stored next to its manifest so that a model
/// can be fitted to it later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataLayout {
    pub image_size: usize,
    pub channels: usize,
    pub max_words: usize,
    pub max_utterances: usize,
    pub max_history: usize,
    pub n_candidates: usize,
}

impl From<&SyntheticSpec> for DataLayout {
    fn from(s: &SyntheticSpec) -> Self {
        DataLayout {
            image_size: s.image_size,
            channels: s.channels,
            max_words: s.max_words,
            max_utterances: s.max_utterances,
            max_history: s.max_history,
            n_candidates: s.n_candidates,
        }
    }
}

/// Generates a synthetic corpus and writes it, with its layout, to `dir`.
pub fn generate_data(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<SyntheticCorpus> {
    let corpus = gen_synthetic(spec, seed)?;
    corpus.write(dir)?;
    let p = dir.join(LAYOUT_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&DataLayout::from(spec))?).map_err(|e| Error::io(&p, e))?;
    Ok(corpus)
}

/// Copies the data-dependent fields (layout, vocabulary size, emoji label
/// count) of the dataset in `dir` into `model`. Without a layout file the
/// configured layout is kept.
pub fn fit_model_to_data(model: &ModelConfig, dir: &Path) -> Result<ModelConfig> {
    let mut m = model.clone();
    let layout = dir.join(LAYOUT_FILE);
    if layout.is_file() {
        let text = std::fs::read_to_string(&layout).map_err(|e| Error::io(&layout, e))?;
        let l: DataLayout = serde_json::from_str(&text).map_err(|e| Error::data(None, format!("{}: {e}", layout.display())))?;
        m.image_size = l.image_size;
        m.in_channels = l.channels;
        m.max_words = l.max_words;
        m.max_utterances = l.max_utterances;
        m.max_history = l.max_history;
        m.n_candidates = l.n_candidates;
    }
    m.vocab_size = Vocab::load(&dir.join(VOCAB_FILE))?.len();
    let emoji = dir.join(EMOJI_FILE);
    if emoji.is_file() {
        m.n_emoji = Some(load_labels(&emoji)?.len());
    }
    Ok(m)
}

pub fn load_data(model: &ModelConfig, dir: &Path) -> Result<Dataset> {
    load_dataset(dir, &model.data_config())?.collect_all()
}

/// MAP and R@1 of a scorer, for per-epoch logging.
pub fn quick_metrics(scorer: &dyn Scorer, samples: &[Sample], n_candidates: usize) -> Result<serde_json::Value> {
    let mut tally = RankTally::new(n_candidates);
    for s in samples {
        tally.add_rank(crate::eval::sample_rank(scorer, s)?.0);
    }
    let m = tally.finish();
    Ok(json!({"map": m.map, "r_at_1": m.recall(1)}))
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: Model<f64>,
    pub summary: TrainSummary,
}

/// Trains a fresh model from `cfg.train.seed`. With `out`, writes the
/// resolved config, the metrics log, checkpoints, the final model and a
/// summary there. With `valid`, logs MAP and R@1 on it after every epoch.
pub fn train(
    cfg: &Config,
    model_cfg: &ModelConfig,
    samples: &[Sample],
    valid: Option<&[Sample]>,
    out: Option<&Path>,
    threads: usize,
) -> Result<TrainRun> {
    model_cfg.validate()?;
    cfg.train.validate()?;
    let mut log = match out {
        Some(dir) => {
            let log = MetricsLog::create(dir)?;
            let resolved = Config { model: model_cfg.clone(), ..cfg.clone() };
            let p = dir.join(CONFIG_FILE);
            std::fs::write(&p, resolved.to_toml()).map_err(|e| Error::io(&p, e))?;
            log
        }
        None => MetricsLog::memory(),
    };
    let run = match cfg.train.float_width {
        FloatWidth::Wide => train_as::<f64>(cfg, model_cfg, samples, valid, &mut log, threads)?,
        FloatWidth::Narrow => train_as::<f32>(cfg, model_cfg, samples, valid, &mut log, threads)?,
    };
    if let Some(dir) = out {
        run.model.save(&dir.join(MODEL_FILE))?;
        let p = dir.join(SUMMARY_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&run.summary)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(run)
}

fn train_as<T: Real>(
    cfg: &Config,
    model_cfg: &ModelConfig,
    samples: &[Sample],
    valid: Option<&[Sample]>,
    log: &mut MetricsLog,
    threads: usize,
) -> Result<TrainRun> {
    let model = Model::<f64>::new(model_cfg.clone(), cfg.train.seed)?.cast::<T>();
    let mut trainer = Trainer::new(model, cfg.train.clone(), threads)?;
    let n_candidates = model_cfg.n_candidates;
    let summary = trainer.fit(samples, log, |_, m| {
        let record = valid.map(|v| quick_metrics(m, v, n_candidates)).transpose()?;
        Ok(EpochOutcome { record, stop: false })
    })?;
    Ok(TrainRun { model: trainer.model.cast(), summary })
}

/// Ranking metrics plus, when the model has an emoji head, its
/// classification metrics.
pub fn evaluate_model(model: &Model<f64>, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    let mut report = evaluate(model, samples, model.config.n_candidates, opts)?;
    report.emoji = emoji_metrics(model, samples, opts.threads)?;
    Ok(report)
}
