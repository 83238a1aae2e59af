use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::SampleOutput;
use crate::real::Real;

/// `Σ_neg max(0, ŷ_neg − ŷ_pos + margin)` over all negatives.
pub fn hinge_loss<T: Real>(g: &mut Graph<'_, T>, scores: &[Var], truth: usize, margin: f64) -> Result<Var> {
    check(scores.len(), truth)?;
    let pos = scores[truth];
    let mut total: Option<Var> = None;
    for (i, &s) in scores.iter().enumerate() {
        if i == truth {
            continue;
        }
        let d = g.sub(s, pos)?;
        let d = g.affine(d, T::one(), T::lit(margin));
        let h = g.relu(d);
        total = Some(match total {
            None => h,
            Some(t) => g.add(t, h)?,
        });
    }
    Ok(total.expect("at least one negative"))
}

/// Plain-number version of [`hinge_loss`].
pub fn hinge_value(scores: &[f64], truth: usize, margin: f64) -> Result<f64> {
    check(scores.len(), truth)?;
    Ok(scores.iter().enumerate().filter(|&(i, _)| i != truth).map(|(_, &s)| (s - scores[truth] + margin).max(0.0)).sum())
}

fn check(n: usize, truth: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::data(None, format!("hinge loss needs at least 2 candidates, got {n}")));
    }
    if truth >= n {
        return Err(Error::data(None, format!("truth index {truth} out of range for {n} candidates")));
    }
    Ok(())
}

/// Cross-entropy of the emoji label.
pub fn emoji_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, label: usize) -> Result<Var> {
    let n = g.shape(logits).iter().product::<usize>();
    if label >= n {
        return Err(Error::data(None, format!("emoji label {label} outside {n} classes")));
    }
    g.cross_entropy(logits, label)
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub hinge: Var,
    /// Mean emoji cross-entropy over labelled candidates, when used.
    pub emoji: Option<Var>,
}

/// Hinge loss plus `lambda_cls` times the mean emoji loss over candidates.
pub fn sample_loss<T: Real>(
    g: &mut Graph<'_, T>,
    out: &SampleOutput,
    truth: usize,
    labels: Option<&[usize]>,
    margin: f64,
    lambda_cls: Option<f64>,
) -> Result<LossParts> {
    let hinge = hinge_loss(g, &out.score_vars(), truth, margin)?;
    let (Some(lambda), Some(labels)) = (lambda_cls, labels) else {
        return Ok(LossParts { total: hinge, hinge, emoji: None });
    };
    let mut terms = Vec::with_capacity(labels.len());
    for (c, &label) in out.candidates.iter().zip(labels) {
        let logits = c.emoji_logits.ok_or_else(|| Error::config("emoji loss requested but the model has no emoji head"))?;
        terms.push(emoji_loss(g, logits, label)?);
    }
    if terms.is_empty() {
        return Ok(LossParts { total: hinge, hinge, emoji: None });
    }
    let stacked = g.concat(&terms)?;
    let sum = g.sum(stacked);
    let emoji = g.affine(sum, T::lit(1.0 / terms.len() as f64), T::zero());
    let weighted = g.affine(emoji, T::lit(lambda), T::zero());
    let total = g.add(hinge, weighted)?;
    Ok(LossParts { total, hinge, emoji: Some(emoji) })
}
