//! Co-attention between one sticker feature map and one utterance.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::encoders::{StickerRep, UtteranceRep};
use crate::nn;
use crate::real::Real;

pub const RELATION: &str = "inter.rel";
pub const INTEGRATE: &str = "inter.if";
pub const COMBINE: &str = "inter.q2";
pub const PLAIN: &str = "inter.plain";

#[derive(Debug, Clone, Copy)]
pub struct InteractionResult {
    pub q2: Var,
    /// Word weights `[T_x]`, zero at padded words.
    pub tau_u: Var,
    /// Grid-unit weights `[p*p]`.
    pub tau_s: Var,
}

/// `M[k, j] = w · [O_k ; h_j ; O_k * h_j]` with one learned `w` of width
/// `3d`, computed as `O w1 + (H w2)^T + O diag(w3) H^T`. Columns at padded
/// words hold the most negative finite value.
pub fn relation_matrix<T: Real>(g: &mut Graph<'_, T>, map: Var, utt: &UtteranceRep) -> Result<Var> {
    let (units, d) = match g.shape(map) {
        [u, d] => (*u, *d),
        s => return Err(Error::shape("relation_matrix", format!("feature map {s:?}"))),
    };
    let (words, dh) = match g.shape(utt.hidden) {
        [t, d] => (*t, *d),
        s => return Err(Error::shape("relation_matrix", format!("utterance states {s:?}"))),
    };
    let w = g.param(RELATION)?;
    if dh != d || g.shape(w) != [3 * d] {
        return Err(Error::shape("relation_matrix", format!("map width {d}, word width {dh}, relation vector {:?}", g.shape(w))));
    }
    let w1 = g.slice_last(w, 0, d)?;
    let w1 = g.reshape(w1, &[d, 1])?;
    let w2 = g.slice_last(w, d, d)?;
    let w2 = g.reshape(w2, &[d, 1])?;
    let w3 = g.slice_last(w, 2 * d, d)?;
    let scaled = g.mul_row_vec(map, w3)?;
    let ht = g.transpose(utt.hidden)?;
    let m = g.matmul(scaled, ht)?;
    let a = g.matmul(map, w1)?;
    let a = g.reshape(a, &[units])?;
    let b = g.matmul(utt.hidden, w2)?;
    let b = g.reshape(b, &[words])?;
    let m = g.add_col_vec(m, a)?;
    let m = g.add_row_vec(m, b)?;
    let keep: Vec<bool> = (0..units * words).map(|i| utt.mask[i % words]).collect();
    g.mask_fill(m, &keep, T::min_value())
}

/// Two-way max pooling of the relation matrix, weighted sums, the integrate
/// layer and the combination with the sticker-aware utterance vector.
pub fn deep_interact<T: Real>(g: &mut Graph<'_, T>, sticker: &StickerRep, utt: &UtteranceRep) -> Result<InteractionResult> {
    let m = relation_matrix(g, sticker.map, utt)?;
    let tau_u = g.max_rows(m, None)?;
    let tau_u = g.mask_fill(tau_u, &utt.mask, T::zero())?;
    let tau_s = g.max_cols(m, Some(&utt.mask))?;
    let l = g.matmul(tau_u, utt.hidden)?;
    let r = g.matmul(tau_s, sticker.map)?;
    let prod = g.mul(sticker.flat, r)?;
    let sum = g.add(sticker.flat, r)?;
    let feats = g.concat(&[sticker.flat, r, prod, sum])?;
    let q1 = nn::linear(g, feats, INTEGRATE)?;
    let q1 = g.relu(q1);
    let joined = g.concat(&[q1, l])?;
    let q2 = nn::linear(g, joined, COMBINE)?;
    let q2 = g.relu(q2);
    Ok(InteractionResult { q2, tau_u, tau_s })
}

/// Interaction-free replacement: `ReLU(FC(O_flat ; mean of word states))`.
pub fn plain_interact<T: Real>(g: &mut Graph<'_, T>, sticker: &StickerRep, utt: &UtteranceRep) -> Result<Var> {
    let mean = g.mean_rows(utt.hidden, Some(&utt.mask))?;
    let joined = g.concat(&[sticker.flat, mean])?;
    let q2 = nn::linear(g, joined, PLAIN)?;
    Ok(g.relu(q2))
}
