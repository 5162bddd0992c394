//! Parallel best-of-N with a single mid-generation prune barrier.
//!
//! All `n_initial` samples are generated to `prune_at_tokens` tokens, the
//! unfinished prefixes are scored and ranked, the bottom `prune_fraction` of
//! them stop, and the survivors run to completion. Prefixes that already
//! finished before the barrier skip pruning and compete in final selection.
//! `prune_at_tokens = 0` picks the survivors uniformly at random before any
//! token is generated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, PartialAccounting, Result};
use crate::generator::{mix64, GenerationRequest, Generator, Prompt, Sample};
use crate::par;
use crate::sampler::{
    finish_run, interrupted, tokens_accounting, RunStats, DEFAULT_MAX_NEW_TOKENS,
};
use crate::scoring::{self, EvalScore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub n_initial: usize,
    /// Tokens generated before the prune decision; 0 means random pruning.
    pub prune_at_tokens: u32,
    pub prune_fraction: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
}

fn default_max_new_tokens() -> u32 {
    DEFAULT_MAX_NEW_TOKENS
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            n_initial: 16,
            prune_at_tokens: 128,
            prune_fraction: 0.75,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_initial == 0 {
            return Err(Error::Config("n_initial must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(Error::Config(format!(
                "prune_fraction must lie in [0, 1), got {}",
                self.prune_fraction
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Survivors out of `m` candidates: `max(1, m - floor(m * fraction))`.
    pub fn keep_count(&self, m: usize) -> usize {
        let cut = (m as f64 * self.prune_fraction).floor() as usize;
        m.saturating_sub(cut).max(1)
    }
}

fn random_survivors(n: usize, keep: usize, seed: u64, prompt_id: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ 0x5052_554E) ^ prompt_id));
    let mut picked = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    picked.sort_unstable();
    picked
}

/// Completes `samples` and scores each as a full response.
fn complete_and_score<G: Generator>(
    prompt: &Prompt,
    gen: &G,
    samples: &[Sample],
    max_new_tokens: u32,
) -> Result<Vec<(Sample, EvalScore)>> {
    par::try_map_indexed(samples.len(), |i| {
        let mut s = samples[i].clone();
        if !s.finished && s.tokens_generated < max_new_tokens {
            s = gen.continue_generation(&s, max_new_tokens - s.tokens_generated)?;
        }
        let l = gen.self_evaluate(prompt, &s)?;
        let score = EvalScore::new(s.sample_ref(), 1, s.tokens_generated, l)?;
        Ok((s, score))
    })
}

fn with_partial(e: Error, samples: &[Sample]) -> Error {
    match e {
        Error::Generator(g) => interrupted(
            g,
            PartialAccounting {
                samples_used: 0,
                batches_used: 0,
                tokens_generated: tokens_accounting(samples),
            },
        ),
        other => other,
    }
}

pub fn run_pruned<G: Generator>(
    prompt: &Prompt,
    gen: &G,
    cfg: &PruneConfig,
    seed: u64,
) -> Result<RunStats> {
    cfg.validate()?;
    let n = cfg.n_initial;

    if cfg.prune_at_tokens == 0 {
        let keep = cfg.keep_count(n);
        let survivors = random_survivors(n, keep, seed, prompt.id);
        let done = par::try_map_indexed(survivors.len(), |j| -> Result<_> {
            let req = GenerationRequest::new(prompt, survivors[j], 1.0, cfg.max_new_tokens, seed);
            let s = gen.start_generation(&req)?;
            let l = gen.self_evaluate(prompt, &s)?;
            let score = EvalScore::new(s.sample_ref(), 1, s.tokens_generated, l)?;
            Ok((s, score))
        })
        .map_err(|e| with_partial(e, &[]))?;
        let (samples, scores): (Vec<_>, Vec<_>) = done.into_iter().unzip();
        return finish_run(prompt, samples, scores, 1, n - keep);
    }

    let budget = cfg.prune_at_tokens.min(cfg.max_new_tokens);
    let prefixes = par::try_map_indexed(n, |i| {
        gen.start_generation(&GenerationRequest::new(prompt, i, 1.0, budget, seed))
    })
    .map_err(|e| with_partial(e.into(), &[]))?;

    let open: Vec<&Sample> = prefixes
        .iter()
        .filter(|s| !s.finished && s.tokens_generated < cfg.max_new_tokens)
        .collect();
    let mid_scores = par::try_map_slice(&open, |s| -> Result<EvalScore> {
        let l = gen.self_evaluate(prompt, s)?;
        EvalScore::new(s.sample_ref(), 1, s.tokens_generated, l)
    })
    .map_err(|e| with_partial(e, &prefixes))?;

    let mut stopped = vec![false; n];
    if !mid_scores.is_empty() {
        let keep = cfg.keep_count(mid_scores.len());
        for s in scoring::rank(&mid_scores)?.iter().skip(keep) {
            stopped[s.sample_ref.sample_index] = true;
        }
    }
    let pruned = stopped.iter().filter(|&&p| p).count();

    let selectable: Vec<Sample> = prefixes
        .iter()
        .filter(|s| !stopped[s.sample_index])
        .cloned()
        .collect();
    let done = complete_and_score(prompt, gen, &selectable, cfg.max_new_tokens)
        .map_err(|e| with_partial(e, &prefixes))?;

    let mut samples: Vec<Sample> = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(done.len());
    let mut done = done.into_iter().peekable();
    for prefix in prefixes {
        match done.peek() {
            Some((s, _)) if s.sample_index == prefix.sample_index => {
                let (s, score) = done.next().expect("peeked");
                samples.push(s);
                scores.push(score);
            }
            _ => samples.push(prefix),
        }
    }
    finish_run(prompt, samples, scores, 1, pruned)
}
