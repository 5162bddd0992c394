//! Win-or-tie scores from evaluation-token likelihoods, and deterministic ranking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{EvalLikelihoods, SampleRef};

/// Normalized good-token likelihood, `p_good / (p_good + p_bad)`.
pub fn normalize(l: &EvalLikelihoods) -> Result<f64> {
    if !(l.p_good >= 0.0 && l.p_bad >= 0.0) {
        return Err(Error::Misuse("evaluation likelihoods must be non-negative"));
    }
    let total = l.p_good + l.p_bad;
    if total <= 0.0 {
        return Err(Error::DegenerateEvaluation);
    }
    Ok(l.p_good / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub sample_ref: SampleRef,
    /// 1-based generation batch the sample came from.
    pub batch: usize,
    pub tokens_at_eval: u32,
    pub likelihoods: EvalLikelihoods,
    pub score: f64,
}

impl EvalScore {
    pub fn new(
        sample_ref: SampleRef,
        batch: usize,
        tokens_at_eval: u32,
        likelihoods: EvalLikelihoods,
    ) -> Result<Self> {
        Ok(EvalScore {
            sample_ref,
            batch,
            tokens_at_eval,
            likelihoods,
            score: normalize(&likelihoods)?,
        })
    }
}

/// Highest score first; ties go to the earlier batch, then the lower sample index.
pub fn rank_order(a: &EvalScore, b: &EvalScore) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.batch.cmp(&b.batch))
        .then(a.sample_ref.sample_index.cmp(&b.sample_ref.sample_index))
}

pub fn rank(scores: &[EvalScore]) -> Result<Vec<EvalScore>> {
    if scores.is_empty() {
        return Err(Error::Misuse("cannot rank an empty list of scores"));
    }
    let mut out = scores.to_vec();
    out.sort_by(rank_order);
    Ok(out)
}

/// Top-ranked entry without materializing the full order.
pub fn best(scores: &[EvalScore]) -> Result<EvalScore> {
    scores
        .iter()
        .copied()
        .min_by(rank_order)
        .ok_or(Error::Misuse("cannot select from an empty list of scores"))
}
