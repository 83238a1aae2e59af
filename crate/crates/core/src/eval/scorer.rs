//! Things that rank a sample's candidates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::MemoryVariant;
use crate::data::Sample;
use crate::error::Result;
use crate::model::memory::frequency_scores;
use crate::model::Model;
use crate::real::Real;
use crate::train::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub enum Scores {
    Ranked(Vec<f64>),
    /// No opinion; the truth is counted as ranked last.
    Abstain,
}

pub trait Scorer: Sync {
    fn score(&self, sample: &Sample) -> Result<Scores>;
}

/// Network scores, or the most-selected heuristic when the model is
/// configured with that memory variant.
impl<T: Real> Scorer for Model<T> {
    fn score(&self, sample: &Sample) -> Result<Scores> {
        if self.config.memory_variant == MemoryVariant::MostSelected {
            return MostSelected.score(sample);
        }
        Ok(Scores::Ranked(self.predict(sample)?.scores))
    }
}

/// Ranks candidates by how often the user picked them before.
#[derive(Debug, Clone, Copy)]
pub struct MostSelected;

impl Scorer for MostSelected {
    fn score(&self, sample: &Sample) -> Result<Scores> {
        let cands: Vec<&str> = sample.candidates.iter().map(|c| c.id.as_str()).collect();
        Ok(match frequency_scores(&sample.history_sticker_ids(), &cands) {
            Some(s) => Scores::Ranked(s),
            None => Scores::Abstain,
        })
    }
}

/// Uniform scores, a fixed function of the seed and the sample id.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, sample: &Sample) -> Result<Scores> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, sample.id as u64, 0));
        Ok(Scores::Ranked((0..sample.candidates.len()).map(|_| rng.random::<f64>()).collect()))
    }
}

/// Scores the truth 1 and everything else 0.
#[derive(Debug, Clone, Copy)]
pub struct PerfectScorer;

impl Scorer for PerfectScorer {
    fn score(&self, sample: &Sample) -> Result<Scores> {
        Ok(Scores::Ranked((0..sample.candidates.len()).map(|i| f64::from(u8::from(i == sample.truth_index))).collect()))
    }
}
