//! Fixed best-of-N and adaptive sampling with exponentially growing batches
//! and temperature annealing.
//!
//! The adaptive loop draws batch `k` of size [`batch_size`]`(k)` at
//! [`temperature`]`(k)`, scores every finished response, and stops after the
//! first batch in which some score is strictly above `tau` or once `n_max`
//! samples exist. The winner is the top-ranked sample over everything drawn.

use serde::{Deserialize, Serialize};

use crate::error::{Error, GenError, PartialAccounting, Result};
use crate::generator::{GenerationRequest, Generator, Prompt, Sample};
use crate::par;
use crate::scoring::{self, EvalScore};

/// Default token cap for a "full" response.
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 4096;

/// Number of samples drawn in iteration `k` (1-based): 1, 1, 2, 4, 8, ...
/// The cumulative count through iteration `k` is `2^(k-1)`.
pub fn batch_size(k: u32) -> usize {
    match k {
        0 | 1 => 1,
        k if k - 2 >= usize::BITS - 1 => usize::MAX,
        k => 1usize << (k - 2),
    }
}

/// Sampling temperature for iteration `k`: `1 - 2^-(k-1)` when annealing,
/// otherwise 1.
pub fn temperature(k: u32, annealing: bool) -> f64 {
    if !annealing {
        return 1.0;
    }
    let exp = i32::try_from(k.max(1) - 1).unwrap_or(i32::MAX);
    1.0 - 0.5f64.powi(exp)
}

/// What the stop threshold is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StopSignal {
    /// The normalized win-or-tie score.
    #[default]
    Score,
    /// The underlying reward (simulation only); baseline for comparing
    /// capability-aware stopping against a plain reward threshold.
    LatentReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptivePolicy {
    pub tau: f64,
    pub n_max: usize,
    pub annealing: bool,
    #[serde(default)]
    pub stop_on: StopSignal,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
}

fn default_max_new_tokens() -> u32 {
    DEFAULT_MAX_NEW_TOKENS
}

impl Default for AdaptivePolicy {
    fn default() -> Self {
        AdaptivePolicy {
            tau: 0.98,
            n_max: 16,
            annealing: true,
            stop_on: StopSignal::Score,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

impl AdaptivePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be >= 1".into()));
        }
        match self.stop_on {
            StopSignal::Score if !(0.0..=1.0).contains(&self.tau) => Err(Error::Config(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            ))),
            StopSignal::LatentReward if self.tau.is_nan() => {
                Err(Error::Config("reward threshold is NaN".into()))
            }
            _ if self.max_new_tokens == 0 => {
                Err(Error::Config("max_new_tokens must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Upper bound on batches: `ceil(log2(n_max)) + 1`.
    pub fn max_batches(&self) -> usize {
        let mut k = 1u32;
        let mut cum = 0usize;
        while cum < self.n_max {
            cum = cum.saturating_add(batch_size(k));
            k += 1;
        }
        (k - 1) as usize
    }
}

/// Per-prompt outcome of one strategy run.
#[derive(Debug, Clone, Serialize)]
pub struct RunStats {
    pub prompt_id: u64,
    pub samples_used: usize,
    pub batches_used: usize,
    pub tokens_generated: u64,
    pub best: EvalScore,
    pub stopped_early: bool,
    /// Samples stopped at the prune barrier.
    pub pruned: usize,
    /// Underlying reward of the selected sample, when the backend knows it.
    pub selected_reward: Option<f64>,
    /// Every sample touched, pruned ones included, in index order.
    #[serde(skip)]
    pub samples: Vec<Sample>,
    /// Full-response scores of every selectable sample.
    #[serde(skip)]
    pub scores: Vec<EvalScore>,
}

impl RunStats {
    pub fn selected_sample(&self) -> Option<&Sample> {
        self.samples
            .iter()
            .find(|s| s.sample_index == self.best.sample_ref.sample_index)
    }
}

/// Sum of tokens over all samples, pruned prefixes included.
pub fn tokens_accounting(samples: &[Sample]) -> u64 {
    samples.iter().map(|s| u64::from(s.tokens_generated)).sum()
}

pub(crate) fn interrupted(e: GenError, partial: PartialAccounting) -> Error {
    Error::Interrupted {
        source: Box::new(Error::Generator(e)),
        partial,
    }
}

/// Generates `count` full responses with indices `first..first + count` in
/// parallel and scores each. Output is ordered by sample index.
#[allow(clippy::too_many_arguments)]
fn full_batch<G: Generator>(
    prompt: &Prompt,
    gen: &G,
    first: usize,
    count: usize,
    batch: usize,
    temp: f64,
    max_new_tokens: u32,
    seed: u64,
) -> std::result::Result<Vec<(Sample, EvalScore)>, Error> {
    par::try_map_indexed(count, |j| {
        let req = GenerationRequest::new(prompt, first + j, temp, max_new_tokens, seed);
        let sample = gen.start_generation(&req)?;
        let l = gen.self_evaluate(prompt, &sample)?;
        let score = EvalScore::new(sample.sample_ref(), batch, sample.tokens_generated, l)?;
        Ok((sample, score))
    })
}

fn unwrap_gen(e: Error, partial: PartialAccounting) -> Error {
    match e {
        Error::Generator(g) => interrupted(g, partial),
        other => other,
    }
}

/// Best-of-`n` at temperature 1 in a single parallel batch.
pub fn run_fixed<G: Generator>(
    prompt: &Prompt,
    gen: &G,
    n: usize,
    max_new_tokens: u32,
    seed: u64,
) -> Result<RunStats> {
    if n == 0 {
        return Err(Error::Config("best-of-n needs n >= 1".into()));
    }
    let out = full_batch(prompt, gen, 0, n, 1, 1.0, max_new_tokens, seed)
        .map_err(|e| unwrap_gen(e, PartialAccounting::default()))?;
    let (samples, scores): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    finish(prompt, samples, scores, 1, false, 0)
}

fn finish(
    prompt: &Prompt,
    samples: Vec<Sample>,
    scores: Vec<EvalScore>,
    batches_used: usize,
    stopped_early: bool,
    pruned: usize,
) -> Result<RunStats> {
    let best = scoring::best(&scores)?;
    let selected_reward = samples
        .iter()
        .find(|s| s.sample_index == best.sample_ref.sample_index)
        .and_then(|s| s.latent_reward);
    Ok(RunStats {
        prompt_id: prompt.id,
        samples_used: scores.len(),
        batches_used,
        tokens_generated: tokens_accounting(&samples),
        best,
        stopped_early,
        pruned,
        selected_reward,
        samples,
        scores,
    })
}

pub(crate) fn finish_run(
    prompt: &Prompt,
    samples: Vec<Sample>,
    scores: Vec<EvalScore>,
    batches_used: usize,
    pruned: usize,
) -> Result<RunStats> {
    finish(prompt, samples, scores, batches_used, false, pruned)
}

/// Adaptive sampling with annealing for one prompt.
pub fn run_adaptive<G: Generator>(
    prompt: &Prompt,
    gen: &G,
    policy: &AdaptivePolicy,
    seed: u64,
) -> Result<RunStats> {
    policy.validate()?;
    let mut samples = Vec::new();
    let mut scores = Vec::new();
    let mut cumulative = 0usize;
    let mut k = 1u32;
    let mut batches = 0usize;
    let mut stopped_early = false;

    while cumulative < policy.n_max {
        let count = batch_size(k).min(policy.n_max - cumulative);
        let temp = temperature(k, policy.annealing);
        let batch = full_batch(
            prompt,
            gen,
            cumulative,
            count,
            k as usize,
            temp,
            policy.max_new_tokens,
            seed,
        )
        .map_err(|e| {
            unwrap_gen(
                e,
                PartialAccounting {
                    samples_used: cumulative,
                    batches_used: batches,
                    tokens_generated: tokens_accounting(&samples),
                },
            )
        })?;
        cumulative += count;
        batches += 1;

        let fired = batch.iter().any(|(sample, score)| match policy.stop_on {
            StopSignal::Score => score.score > policy.tau,
            StopSignal::LatentReward => sample.latent_reward.is_some_and(|r| r > policy.tau),
        });
        for (sample, score) in batch {
            samples.push(sample);
            scores.push(score);
        }
        if fired {
            stopped_early = true;
            break;
        }
        k += 1;
    }

    finish(prompt, samples, scores, batches, stopped_early, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::sim::{SimGenerator, SimWorld};

    #[test]
    fn schedule_values() {
        let sizes: Vec<_> = (1..=5).map(batch_size).collect();
        assert_eq!(sizes, vec![1, 1, 2, 4, 8]);
        for k in 1..=20u32 {
            let cum: usize = (1..=k).map(batch_size).sum();
            assert_eq!(cum, 1 << (k - 1));
        }
        let temps: Vec<_> = (1..=5).map(|k| temperature(k, true)).collect();
        assert_eq!(temps, vec![0.0, 0.5, 0.75, 0.875, 0.9375]);
        assert_eq!(temperature(3, false), 1.0);
        assert_eq!(batch_size(200), usize::MAX);
    }

    #[test]
    fn max_batches_bound() {
        for (n, b) in [(1, 1), (2, 2), (5, 4), (16, 5), (17, 6)] {
            let p = AdaptivePolicy {
                n_max: n,
                ..Default::default()
            };
            assert_eq!(p.max_batches(), b, "n_max={n}");
        }
    }

    #[test]
    fn policy_validation() {
        assert!(AdaptivePolicy {
            tau: 1.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdaptivePolicy {
            n_max: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let reward = AdaptivePolicy {
            tau: f64::INFINITY,
            stop_on: StopSignal::LatentReward,
            ..Default::default()
        };
        assert!(reward.validate().is_ok());
    }

    fn sim() -> SimGenerator {
        SimGenerator::new(vec![SimWorld::new(0.0, 1.0, 0.2, 50, 0.01)]).unwrap()
    }

    #[test]
    fn clamped_final_batch() {
        let p = Prompt::new(0, "");
        let policy = AdaptivePolicy {
            tau: 1.0,
            n_max: 5,
            ..Default::default()
        };
        let stats = run_adaptive(&p, &sim(), &policy, 3).unwrap();
        assert_eq!(stats.samples_used, 5);
        assert_eq!(stats.batches_used, 4);
        let per_batch: Vec<usize> = (1..=4)
            .map(|b| stats.scores.iter().filter(|s| s.batch == b).count())
            .collect();
        assert_eq!(per_batch, vec![1, 1, 2, 1]);
        assert!(!stats.stopped_early);
    }

    #[test]
    fn tau_zero_stops_after_first_batch() {
        let p = Prompt::new(0, "");
        let policy = AdaptivePolicy {
            tau: 0.0,
            n_max: 16,
            ..Default::default()
        };
        let stats = run_adaptive(&p, &sim(), &policy, 3).unwrap();
        assert_eq!((stats.samples_used, stats.batches_used), (1, 1));
        assert!(stats.stopped_early);
        assert_eq!(stats.tokens_generated, 50);
    }

    #[test]
    fn fixed_n_accounting() {
        let p = Prompt::new(0, "");
        let stats = run_fixed(&p, &sim(), 16, 4096, 1).unwrap();
        assert_eq!(stats.samples_used, 16);
        assert_eq!(stats.batches_used, 1);
        assert_eq!(stats.tokens_generated, 16 * 50);
        let best_reward = stats
            .samples
            .iter()
            .map(|s| s.latent_reward.unwrap())
            .fold(f64::MIN, f64::max);
        assert_eq!(stats.selected_reward, Some(best_reward));
        assert!(run_fixed(&p, &sim(), 0, 4096, 1).is_err());
    }

    #[test]
    fn tokens_accounting_basics() {
        assert_eq!(tokens_accounting(&[]), 0);
        let g = sim();
        let s = g
            .start_generation(&GenerationRequest::new(&Prompt::new(0, ""), 0, 1.0, 40, 0))
            .unwrap();
        assert_eq!(tokens_accounting(&[s]), 40);
    }
}
