//! Losses, optimizer and the training loop.

pub mod loss;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

pub use loss::{emoji_loss, hinge_loss, hinge_value, sample_loss, LossParts};
pub use optim::{clip_global_norm, global_norm, Adam};

/// Loss terms of one sample, in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub hinge: f64,
    pub emoji: Option<f64>,
}

/// One optimizer step as written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub samples: usize,
    pub loss: f64,
    pub hinge: f64,
    pub emoji: Option<f64>,
    pub grad_norm: f64,
}

/// Mixes the run seed with step and sample positions for dropout streams.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss values and per-parameter gradients.
pub type SampleGrads<T> = (LossValues, BTreeMap<String, Tensor<T>>);

/// Loss value and parameter gradients of one sample.
pub fn sample_gradients<T: Real>(
    model: &Model<T>,
    sample: &Sample,
    cfg: &TrainConfig,
    mode: Mode,
    seed: u64,
) -> Result<SampleGrads<T>> {
    let mut g = Graph::new(&model.params, mode, seed);
    let out = model.forward(&mut g, sample)?;
    let lambda = model.config.classify().then_some(cfg.lambda_cls);
    let parts = sample_loss(&mut g, &out, sample.truth_index, sample.emoji_labels.as_deref(), cfg.margin, lambda)?;
    let values = LossValues {
        total: g.scalar(parts.total).to_f64_lossy(),
        hinge: g.scalar(parts.hinge).to_f64_lossy(),
        emoji: parts.emoji.map(|e| g.scalar(e).to_f64_lossy()),
    };
    if !values.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on sample {}", sample.id)));
    }
    let grads = g.backward(parts.total)?.param_grads();
    Ok((values, grads))
}

/// Evaluation-mode loss of one sample.
pub fn sample_loss_value<T: Real>(model: &Model<T>, sample: &Sample, cfg: &TrainConfig) -> Result<LossValues> {
    let mut g = Graph::new(&model.params, Mode::Eval, 0);
    let out = model.forward(&mut g, sample)?;
    let lambda = model.config.classify().then_some(cfg.lambda_cls);
    let parts = sample_loss(&mut g, &out, sample.truth_index, sample.emoji_labels.as_deref(), cfg.margin, lambda)?;
    Ok(LossValues {
        total: g.scalar(parts.total).to_f64_lossy(),
        hinge: g.scalar(parts.hinge).to_f64_lossy(),
        emoji: parts.emoji.map(|e| g.scalar(e).to_f64_lossy()),
    })
}

pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub opt: Adam<T>,
    pub cfg: TrainConfig,
    epoch: usize,
    pool: rayon::ThreadPool,
}

/// What an epoch hook wants recorded, and whether to stop.
#[derive(Debug, Default)]
pub struct EpochOutcome {
    pub record: Option<serde_json::Value>,
    pub stop: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: f64,
}

impl<T: Real> Trainer<T> {
    /// `threads == 0` lets the pool pick; results do not depend on it.
    pub fn new(model: Model<T>, cfg: TrainConfig, threads: usize) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        let opt = Adam::new(&cfg);
        Ok(Trainer { model, opt, cfg, epoch: 0, pool })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on the mean loss of `batch`. Per-sample gradients
    /// are computed in parallel and summed in batch order.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let step = self.opt.steps() + 1;
        let (model, cfg) = (&self.model, &self.cfg);
        let results: Vec<Result<SampleGrads<T>>> = self.pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(i, s)| sample_gradients(model, s, cfg, Mode::Train, derive_seed(cfg.seed, step, i as u64)))
                .collect()
        });
        let inv = T::lit(1.0 / batch.len() as f64);
        let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let (mut loss, mut hinge, mut emoji) = (0.0, 0.0, None::<f64>);
        for r in results {
            let (v, grads) = r?;
            loss += v.total;
            hinge += v.hinge;
            if let Some(e) = v.emoji {
                *emoji.get_or_insert(0.0) += e;
            }
            for (name, gt) in grads {
                match acc.get_mut(&name) {
                    Some(a) => a.data_mut().iter_mut().zip(gt.data()).for_each(|(x, &y)| *x = *x + y),
                    None => {
                        acc.insert(name, gt);
                    }
                }
            }
        }
        for t in acc.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x * inv);
        }
        let grad_norm = clip_global_norm(&mut acc, self.cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {step}")));
        }
        self.opt.step(&mut self.model.params, &acc)?;
        let n = batch.len() as f64;
        Ok(StepMetrics {
            step,
            epoch: self.epoch,
            samples: batch.len(),
            loss: loss / n,
            hinge: hinge / n,
            emoji: emoji.map(|e| e / n),
            grad_norm,
        })
    }

    /// Runs up to `max_epochs` epochs over `train`, shuffled per epoch from
    /// the run seed. `hook` runs after every epoch.
    pub fn fit(
        &mut self,
        train: &[Sample],
        log: &mut MetricsLog,
        mut hook: impl FnMut(usize, &Model<T>) -> Result<EpochOutcome>,
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::data(None, "training set is empty"));
        }
        let mut last = f64::NAN;
        while self.epoch < self.cfg.max_epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 0, self.epoch as u64 + 1)));
            let mut sum = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                let t0 = Instant::now();
                let m = self.step(&batch)?;
                log.step(&m, t0.elapsed().as_secs_f64())?;
                sum += m.loss * m.samples as f64;
                if self.cfg.checkpoint_every > 0 && m.step % self.cfg.checkpoint_every as u64 == 0 {
                    log.checkpoint(&self.model, m.step)?;
                }
            }
            last = sum / train.len() as f64;
            let outcome = hook(self.epoch, &self.model)?;
            log.epoch(self.epoch, last, outcome.record)?;
            self.epoch += 1;
            if outcome.stop {
                break;
            }
        }
        Ok(TrainSummary { epochs: self.epoch, steps: self.opt.steps(), final_loss: last })
    }
}

/// Line-delimited training records. Timing goes to a separate file so the
/// metrics file is reproducible byte for byte.
pub struct MetricsLog {
    dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
    timing: Option<BufWriter<File>>,
    pub records: Vec<serde_json::Value>,
}

impl MetricsLog {
    /// Keeps records in memory only.
    pub fn memory() -> Self {
        MetricsLog { dir: None, metrics: None, timing: None, records: Vec::new() }
    }

    /// Writes `metrics.jsonl`, `timing.jsonl` and checkpoints under `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        };
        Ok(MetricsLog {
            dir: Some(dir.to_path_buf()),
            metrics: Some(open("metrics.jsonl")?),
            timing: Some(open("timing.jsonl")?),
            records: Vec::new(),
        })
    }

    pub fn write_record(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    fn step(&mut self, m: &StepMetrics, seconds: f64) -> Result<()> {
        let mut rec = serde_json::to_value(m)?;
        rec["kind"] = "step".into();
        self.write_record(rec)?;
        if let Some(w) = &mut self.timing {
            serde_json::to_writer(&mut *w, &serde_json::json!({"step": m.step, "wall_seconds": seconds}))?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("timing.jsonl", e))?;
        }
        Ok(())
    }

    fn epoch(&mut self, epoch: usize, loss: f64, extra: Option<serde_json::Value>) -> Result<()> {
        let mut rec = serde_json::json!({"kind": "epoch", "epoch": epoch, "train_loss": loss});
        if let Some(x) = extra {
            rec["eval"] = x;
        }
        self.write_record(rec)
    }

    fn checkpoint<T: Real>(&mut self, model: &Model<T>, step: u64) -> Result<()> {
        if let Some(dir) = &self.dir {
            model.save(&dir.join(format!("step-{step:06}.ckpt")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
