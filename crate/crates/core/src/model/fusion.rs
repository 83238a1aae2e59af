//! Short- and long-range fusion of per-utterance interaction vectors, the
//! matching vector, and the gated final score.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, BlockOutput};
use crate::real::Real;
use crate::tensor::Tensor;

pub const INIT_STATE: &str = "fuse.g0";
pub const SHORT_RNN: &str = "fuse.rnn";
pub const SHORT_ATTN: &str = "fuse.short_tf";
pub const LONG_ATTN: &str = "fuse.long";
pub const SUMULTI: &str = "fuse.sumulti";
pub const MATCH_RNN: &str = "fuse.match";
pub const PREF_PROJ: &str = "pref.proj";
pub const GATE: &str = "gate";
pub const SCORE: &str = "score";

/// GRU over utterances from a learned initial state; padded steps skipped.
pub fn fuse_short<T: Real>(g: &mut Graph<'_, T>, q2: Var, mask: &[bool]) -> Result<Var> {
    let h0 = g.param(INIT_STATE)?;
    let (seq, _) = nn::gru_chain(g, q2, mask, h0, SHORT_RNN)?;
    Ok(seq)
}

/// Self-attention replacement for [`fuse_short`], with sinusoidal positions
/// added to the inputs.
pub fn fuse_short_attention<T: Real>(
    g: &mut Graph<'_, T>,
    q2: Var,
    mask: &[bool],
    positions: &Tensor<T>,
    n_head: usize,
    dropout: f64,
) -> Result<BlockOutput> {
    let (t, d) = dims(g, q2, "fuse_short_attention")?;
    let pos = g.constant(Tensor::new(vec![t, d], positions.data()[..t * d].to_vec())?);
    let x = g.add(q2, pos)?;
    let x = g.mask_rows(x, mask)?;
    nn::transformer_block(g, x, mask, SHORT_ATTN, n_head, dropout)
}

pub fn fuse_long<T: Real>(g: &mut Graph<'_, T>, q2: Var, mask: &[bool], n_head: usize, dropout: f64) -> Result<BlockOutput> {
    dims(g, q2, "fuse_long")?;
    nn::transformer_block(g, q2, mask, LONG_ATTN, n_head, dropout)
}

/// `ReLU(W [(ĝ - g) * (ĝ - g) ; ĝ * g] + b)` row by row.
pub fn sumulti<T: Real>(g: &mut Graph<'_, T>, short: Var, long: Var) -> Result<Var> {
    if g.shape(short) != g.shape(long) {
        return Err(Error::shape("sumulti", format!("{:?} vs {:?}", g.shape(short), g.shape(long))));
    }
    let diff = g.sub(long, short)?;
    let sq = g.mul(diff, diff)?;
    let prod = g.mul(long, short)?;
    let x = g.concat(&[sq, prod])?;
    let y = nn::linear(g, x, SUMULTI)?;
    Ok(g.relu(y))
}

/// Final state of a second GRU over the combined rows, taken after the last
/// real utterance.
pub fn match_vector<T: Real>(g: &mut Graph<'_, T>, combined: Var, mask: &[bool]) -> Result<Var> {
    let (_, d) = dims(g, combined, "match_vector")?;
    let h0 = g.constant(Tensor::zeros(&[d]));
    let (_, last) = nn::gru_chain(g, combined, mask, h0, MATCH_RNN)?;
    Ok(last)
}

/// Maps the memory read-out into the fusion width (no bias, so an empty
/// history stays zero).
pub fn project_preference<T: Real>(g: &mut Graph<'_, T>, r_pref: Var) -> Result<Var> {
    nn::projection(g, r_pref, PREF_PROJ)
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreBreakdown {
    /// `[1]`, the matching score.
    pub y_hat: Var,
    /// `[1]`, weight on the context path.
    pub gate: Var,
    pub match_vec: Var,
    pub r_pref_used: Var,
}

/// `f = σ(FC([r ; g̃]))`, `ŷ = σ(FC(f g̃ + (1 - f) r))`.
pub fn gated_score<T: Real>(g: &mut Graph<'_, T>, match_vec: Var, r_pref: Var) -> Result<ScoreBreakdown> {
    if g.shape(match_vec) != g.shape(r_pref) {
        return Err(Error::shape("gated_score", format!("{:?} vs {:?}", g.shape(match_vec), g.shape(r_pref))));
    }
    let x = g.concat(&[r_pref, match_vec])?;
    let gate = nn::linear(g, x, GATE)?;
    let gate = g.sigmoid(gate);
    let rest = g.affine(gate, -T::one(), T::one());
    let a = g.scale_by(match_vec, gate)?;
    let b = g.scale_by(r_pref, rest)?;
    let blend = g.add(a, b)?;
    let y = nn::linear(g, blend, SCORE)?;
    let y_hat = g.sigmoid(y);
    Ok(ScoreBreakdown { y_hat, gate, match_vec, r_pref_used: r_pref })
}

fn dims<T: Real>(g: &Graph<'_, T>, x: Var, op: &'static str) -> Result<(usize, usize)> {
    match g.shape(x) {
        [t, d] => Ok((*t, *d)),
        s => Err(Error::shape(op, format!("expected [T, d], got {s:?}"))),
    }
}
