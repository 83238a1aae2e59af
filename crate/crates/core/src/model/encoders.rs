//! Sticker and utterance encoders.

use crate::data::{Image, Utterance};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, ConvStackGeom};
use crate::real::Real;
use crate::tensor::Tensor;

pub const STICKER: &str = "sticker";
pub const EMOJI: &str = "emoji";
pub const WORD_EMB: &str = "word.emb";
pub const UTTERANCE: &str = "utt";
pub const HISTORY_UTTERANCE: &str = "hist_utt";

/// Spatial feature map (`[p*p, d]`, row-major grid units) and pooled vector.
#[derive(Debug, Clone, Copy)]
pub struct StickerRep {
    pub map: Var,
    pub flat: Var,
}

pub fn encode_sticker<T: Real>(g: &mut Graph<'_, T>, image: &Image, geom: &ConvStackGeom) -> Result<StickerRep> {
    let x = g.constant(image.to_input());
    let out = nn::conv_stack(g, x, STICKER, geom)?;
    Ok(StickerRep { map: out.map, flat: out.flat })
}

/// Unnormalised emoji-label logits from the pooled sticker vector.
pub fn classify_emoji<T: Real>(g: &mut Graph<'_, T>, flat: Var) -> Result<Var> {
    if !g.has_param(&format!("{EMOJI}.w")) {
        return Err(Error::config("emoji classification needs model.n_emoji"));
    }
    nn::linear(g, flat, EMOJI)
}

#[derive(Debug, Clone)]
pub struct UtteranceRep {
    /// `[T_x, d]`, zero rows at padded words.
    pub hidden: Var,
    pub mask: Vec<bool>,
    /// Per-head attention `[T_x, T_x]`.
    pub attention: Vec<Var>,
}

/// Word embeddings plus sinusoidal positions, then one self-attention block.
/// `positions` must be at least `[T_x, d]`.
pub fn encode_utterance<T: Real>(
    g: &mut Graph<'_, T>,
    utt: &Utterance,
    block: &str,
    positions: &Tensor<T>,
    n_head: usize,
    dropout: f64,
) -> Result<UtteranceRep> {
    if !utt.mask.iter().any(|&m| m) {
        return Err(Error::data(None, "cannot encode an utterance with no real tokens"));
    }
    let table = g.param(WORD_EMB)?;
    let emb = g.embedding(table, &utt.tokens)?;
    let (t, d) = (utt.tokens.len(), g.shape(table)[1]);
    if positions.shape()[0] < t || positions.shape()[1] != d {
        return Err(Error::shape("encode_utterance", format!("position table {:?} for [{t}, {d}]", positions.shape())));
    }
    // Embeddings are scaled by sqrt(d) before the positions are added.
    let emb = g.affine(emb, T::lit((d as f64).sqrt()), T::zero());
    let pos = g.constant(Tensor::new(vec![t, d], positions.data()[..t * d].to_vec())?);
    let x = g.add(emb, pos)?;
    let out = nn::transformer_block(g, x, &utt.mask, block, n_head, dropout)?;
    Ok(UtteranceRep { hidden: out.hidden, mask: utt.mask.clone(), attention: out.attention })
}
