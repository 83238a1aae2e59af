//! The sticker ranking network: parameter layout per configuration and the
//! per-sample forward pass.

pub mod encoders;
pub mod fusion;
pub mod interaction;
pub mod memory;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{MemoryVariant, ModelConfig};
use crate::data::{Sample, Sticker};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::nn::{sinusoidal_positions, ParamBuilder};
use crate::params::{Init, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

use encoders::{StickerRep, UtteranceRep};
use fusion::ScoreBreakdown;
use memory::PositionLayer;

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    positions: Tensor<T>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
}

/// Creates every parameter the configuration wires in.
pub fn build_params<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let d = cfg.hidden;
    let mut b = ParamBuilder::<T, _>::new(rng, Init::TruncNormal(cfg.init_std));
    let ab = &cfg.ablation;
    b.tensor(encoders::WORD_EMB, &[cfg.vocab_size, d])?;
    b.transformer(encoders::UTTERANCE, d, cfg.ffn_dim)?;
    b.conv_stack(encoders::STICKER, &cfg.conv_geom())?;
    if let Some(n) = cfg.n_emoji {
        b.linear(encoders::EMOJI, d, n)?;
    }
    if ab.no_din {
        b.linear(interaction::PLAIN, 2 * d, d)?;
    } else {
        b.tensor(interaction::RELATION, &[3 * d])?;
        b.linear(interaction::INTEGRATE, 4 * d, d)?;
        b.linear(interaction::COMBINE, 2 * d, d)?;
    }
    if ab.fr2t {
        b.transformer(fusion::SHORT_ATTN, d, cfg.ffn_dim)?;
    } else if !ab.no_fr {
        b.tensor(fusion::INIT_STATE, &[d])?;
        b.gru(fusion::SHORT_RNN, d, d)?;
    }
    b.transformer(fusion::LONG_ATTN, d, cfg.ffn_dim)?;
    b.linear(fusion::SUMULTI, 2 * d, d)?;
    b.gru(fusion::MATCH_RNN, d, d)?;
    if !ab.no_upm {
        if !cfg.share_history_encoder {
            b.transformer(encoders::HISTORY_UTTERANCE, d, cfg.ffn_dim)?;
        }
        if !ab.no_tar {
            b.tensor(memory::POSITION, &[cfg.max_history, cfg.position_dim])?;
            if cfg.share_history_grus {
                b.gru(memory::SHARED_RNN, d + cfg.position_dim, d)?;
            } else {
                b.gru(memory::KEY_RNN, d + cfg.position_dim, d)?;
                b.gru(memory::VALUE_RNN, d + cfg.position_dim, d)?;
            }
        }
        if cfg.memory_variant != MemoryVariant::AverageMem {
            b.projection(memory::ADDRESS, d, d)?;
        }
        b.projection(fusion::PREF_PROJ, d, d)?;
    }
    b.linear(fusion::GATE, 2 * d, 1)?;
    b.linear(fusion::SCORE, d, 1)?;
    Ok(b.set)
}

/// Everything one forward pass exposes for losses, reports and checks.
#[derive(Debug, Clone)]
pub struct CandidateOutput {
    pub score: ScoreBreakdown,
    pub emoji_logits: Option<Var>,
    /// Per real utterance: grid weights `[p*p]` and word weights `[T_x]`.
    pub tau_s: Vec<Var>,
    pub tau_u: Vec<Var>,
    /// Attention of the fusion self-attention blocks (long path, and the
    /// short path when it is attention based).
    pub fusion_attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub candidates: Vec<CandidateOutput>,
    /// Memory read weights over slots.
    pub delta: Option<Var>,
    pub slot_mask: Vec<bool>,
    pub no_history: bool,
    /// Encoder attention maps with the key mask they were computed under.
    pub encoder_attention: Vec<(Var, Vec<bool>)>,
    pub utterance_mask: Vec<bool>,
}

impl SampleOutput {
    pub fn score_vars(&self) -> Vec<Var> {
        self.candidates.iter().map(|c| c.score.y_hat).collect()
    }

    pub fn scores<T: Real>(&self, g: &Graph<'_, T>) -> Vec<f64> {
        self.candidates.iter().map(|c| g.value(c.score.y_hat)[0].to_f64_lossy()).collect()
    }

    pub fn gates<T: Real>(&self, g: &Graph<'_, T>) -> Vec<f64> {
        self.candidates.iter().map(|c| g.value(c.score.gate)[0].to_f64_lossy()).collect()
    }
}

/// Scores and gates of one sample in evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub gates: Vec<f64>,
    pub no_history: bool,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = build_params(&config, &mut rng)?;
        Ok(Self::assemble(config, params))
    }

    /// Wraps existing parameters after checking them against the layout the
    /// configuration expects.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = build_params::<T>(&ModelConfig { init_std: 0.0, ..config.clone() }, &mut rng)?;
        for (name, t) in layout.iter() {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.names().find(|n| !layout.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: ParamSet<T>) -> Self {
        let len = config.max_words.max(config.max_utterances);
        let positions = sinusoidal_positions(len, config.hidden);
        Model { config, params, positions }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model::assemble(self.config.clone(), self.params.cast())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&CheckpointMeta { model: self.config.clone() })?;
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = ParamSet::load(path)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("unreadable metadata: {e}")))?;
        Self::from_params(meta.model, params)
    }

    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    fn encode_sticker_cached(
        &self,
        g: &mut Graph<'_, T>,
        cache: &mut HashMap<String, StickerRep>,
        s: &Sticker,
    ) -> Result<StickerRep> {
        if let Some(r) = cache.get(&s.id) {
            return Ok(*r);
        }
        let rep = encoders::encode_sticker(g, &s.image, &self.config.conv_geom())?;
        cache.insert(s.id.clone(), rep);
        Ok(rep)
    }

    fn encode_context(&self, g: &mut Graph<'_, T>, ctx: &crate::data::DialogContext, block: &str) -> Result<Vec<UtteranceRep>> {
        let cfg = &self.config;
        ctx.real_utterances()
            .map(|u| {
                if u.tokens.len() > self.positions.shape()[0] {
                    return Err(Error::shape(
                        "encode_utterance",
                        format!("{} words exceeds model.max_words {}", u.tokens.len(), cfg.max_words),
                    ));
                }
                encoders::encode_utterance(g, u, block, &self.positions, cfg.n_head, cfg.dropout)
            })
            .collect()
    }

    /// Builds the graph for every candidate of `sample`.
    pub fn forward(&self, g: &mut Graph<'_, T>, sample: &Sample) -> Result<SampleOutput> {
        let cfg = &self.config;
        let ab = cfg.ablation;
        let d = cfg.hidden;
        let utt_mask = sample.context.utterance_mask.clone();
        if utt_mask.len() > self.positions.shape()[0] {
            return Err(Error::shape("forward", format!("{} utterances exceeds the configured maximum", utt_mask.len())));
        }
        let reps = self.encode_context(g, &sample.context, encoders::UTTERANCE)?;
        let mut encoder_attention: Vec<(Var, Vec<bool>)> =
            reps.iter().flat_map(|r| r.attention.iter().map(|&a| (a, r.mask.clone()))).collect();
        let mut stickers = HashMap::new();

        // Preference path.
        let (r_used, delta, no_history, slot_mask) = if ab.no_upm {
            (g.constant(Tensor::zeros(&[d])), None, sample.history.is_empty(), vec![false; cfg.max_history])
        } else {
            let block = if cfg.share_history_encoder { encoders::UTTERANCE } else { encoders::HISTORY_UTTERANCE };
            let mut keys = Vec::with_capacity(sample.history.len());
            let mut values = Vec::with_capacity(sample.history.len());
            for pair in &sample.history {
                let hreps = self.encode_context(g, &pair.context, block)?;
                encoder_attention.extend(hreps.iter().flat_map(|r| r.attention.iter().map(|&a| (a, r.mask.clone()))));
                keys.push(memory::build_query(g, &hreps)?);
                values.push(self.encode_sticker_cached(g, &mut stickers, &pair.sticker)?.flat);
            }
            let positions: Vec<usize> = sample.history.iter().map(|h| h.position).collect();
            let layer = (!ab.no_tar).then_some({
                if cfg.share_history_grus {
                    PositionLayer { table: memory::POSITION, key_rnn: memory::SHARED_RNN, value_rnn: memory::SHARED_RNN }
                } else {
                    PositionLayer { table: memory::POSITION, key_rnn: memory::KEY_RNN, value_rnn: memory::VALUE_RNN }
                }
            });
            let mem = memory::encode_history(g, &keys, &values, &positions, cfg.max_history, layer)?;
            let query = memory::build_query(g, &reps)?;
            let read = memory::memory_read(g, query, mem.as_ref(), cfg.memory_variant)?;
            let r = fusion::project_preference(g, read.r_pref)?;
            let slot_mask = mem.map(|m| m.slot_mask).unwrap_or_else(|| vec![false; cfg.max_history]);
            (r, read.delta, read.no_history, slot_mask)
        };

        let zero_row = g.constant(Tensor::zeros(&[d]));
        let mut candidates = Vec::with_capacity(sample.candidates.len());
        for cand in &sample.candidates {
            let srep = self.encode_sticker_cached(g, &mut stickers, cand)?;
            let emoji_logits = if cfg.n_emoji.is_some() { Some(encoders::classify_emoji(g, srep.flat)?) } else { None };
            let mut rows = Vec::with_capacity(utt_mask.len());
            let (mut tau_s, mut tau_u) = (Vec::new(), Vec::new());
            let mut real = reps.iter();
            for &m in &utt_mask {
                if !m {
                    rows.push(zero_row);
                    continue;
                }
                let urep = real.next().ok_or_else(|| Error::data(Some(sample.id), "utterance mask is not a prefix"))?;
                if ab.no_din {
                    rows.push(interaction::plain_interact(g, &srep, urep)?);
                } else {
                    let res = interaction::deep_interact(g, &srep, urep)?;
                    rows.push(res.q2);
                    tau_s.push(res.tau_s);
                    tau_u.push(res.tau_u);
                }
            }
            let q2 = g.stack_rows(&rows)?;
            let mut fusion_attention = Vec::new();
            let short = if ab.fr2t {
                let out = fusion::fuse_short_attention(g, q2, &utt_mask, &self.positions, cfg.n_head, cfg.dropout)?;
                fusion_attention.extend(out.attention);
                out.hidden
            } else if ab.no_fr {
                q2
            } else {
                fusion::fuse_short(g, q2, &utt_mask)?
            };
            let long = fusion::fuse_long(g, q2, &utt_mask, cfg.n_head, cfg.dropout)?;
            fusion_attention.extend(long.attention);
            let combined = fusion::sumulti(g, short, long.hidden)?;
            let mv = fusion::match_vector(g, combined, &utt_mask)?;
            let score = fusion::gated_score(g, mv, r_used)?;
            candidates.push(CandidateOutput { score, emoji_logits, tau_s, tau_u, fusion_attention });
        }
        Ok(SampleOutput { candidates, delta, slot_mask, no_history, encoder_attention, utterance_mask: utt_mask })
    }

    /// Evaluation-mode scores and gates.
    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let mut g = Graph::new(&self.params, Mode::Eval, 0);
        let out = self.forward(&mut g, sample)?;
        Ok(Prediction { scores: out.scores(&g), gates: out.gates(&g), no_history: out.no_history })
    }
}
