//! Simulated generator with a closed-form win-or-tie probability.
//!
//! Every response carries a latent reward. At temperature `g` it is
//! `(1 - min(g, 1)) * greedy_reward + min(g, 1) * z` with `z ~ Normal(mu, sigma)`,
//! so greedy decoding is deterministic and `g = 1` is the on-policy
//! distribution. A finished response with reward `r` wins or ties against a
//! fresh on-policy response with probability `Phi((r + eps - mu) / sigma)`.
//!
//! Mid-generation the evaluator sees `r + sigma_mid(t) * xi` where
//! `sigma_mid(t) = mid_noise_sigma0 * sqrt(1 - t / L)` and `xi` is one
//! standard-normal draw per sample, and the score inflates the spread to
//! `sqrt(sigma^2 + sigma_mid(t)^2)`.
//!
//! All randomness comes from per-sample ChaCha streams keyed by
//! `(seed, prompt_id, sample_index)`, so results do not depend on thread
//! count or call order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{
    finished_misuse, mix64, sample_stream_key, Continuation, ContinuationState, EvalLikelihoods,
    GenerationRequest, Generator, Prompt, Sample,
};
use crate::error::GenError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Calibration {
    /// Self-evaluation returns the analytic win-or-tie probability.
    #[default]
    Exact,
    /// The analytic score is perturbed in logit space by `Normal(0, logit_std)`.
    Noisy { logit_std: f64 },
}

/// Per-prompt parameters of the simulated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub mu: f64,
    pub sigma: f64,
    pub greedy_reward: f64,
    pub full_length: u32,
    /// Standard deviation of response lengths; 0 means every response has
    /// exactly `full_length` tokens.
    #[serde(default)]
    pub length_sigma: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub mid_noise_sigma0: f64,
    #[serde(default)]
    pub calibration: Calibration,
}

impl SimWorld {
    pub fn new(mu: f64, sigma: f64, greedy_reward: f64, full_length: u32, epsilon: f64) -> Self {
        SimWorld {
            mu,
            sigma,
            greedy_reward,
            full_length,
            length_sigma: 0.0,
            epsilon,
            mid_noise_sigma0: 0.0,
            calibration: Calibration::Exact,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |what: &str| Err(GenError::InvalidRequest(format!("sim world: {what}")));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be > 0");
        }
        if self.full_length == 0 {
            return bad("full_length must be >= 1");
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return bad("epsilon must be >= 0");
        }
        if [self.mid_noise_sigma0, self.length_sigma]
            .iter()
            .any(|x| x.is_nan() || *x < 0.0)
        {
            return bad("noise scales must be >= 0");
        }
        if let Calibration::Noisy { logit_std } = self.calibration {
            if logit_std.is_nan() || logit_std < 0.0 {
                return bad("logit_std must be >= 0");
            }
        }
        Ok(())
    }

    /// Win-or-tie probability of a response with reward `r` observed after
    /// `t` of this world's `full_length` tokens.
    pub fn true_score(&self, r: f64, t: u32) -> f64 {
        score_at(self, r, t, self.full_length)
    }

    /// Spread of the mid-generation observation after `t` of `len` tokens.
    pub fn mid_sigma(&self, t: u32, len: u32) -> f64 {
        let frac = (f64::from(t.min(len)) / f64::from(len.max(1))).clamp(0.0, 1.0);
        self.mid_noise_sigma0 * (1.0 - frac).sqrt()
    }
}

/// Free-function form of [`SimWorld::true_score`].
pub fn sim_true_score(world: &SimWorld, r: f64, t: u32) -> f64 {
    world.true_score(r, t)
}

fn std_normal_cdf(x: f64) -> f64 {
    // Normal::new(0, 1) cannot fail.
    Normal::standard().cdf(x)
}

fn score_at(world: &SimWorld, r: f64, t: u32, len: u32) -> f64 {
    let mid = world.mid_sigma(t, len);
    let spread = (world.sigma * world.sigma + mid * mid).sqrt();
    std_normal_cdf((r + world.epsilon - world.mu) / spread)
}

// Stream purposes within a sample's key.
const STREAM_REWARD: u64 = 1;
const STREAM_LENGTH: u64 = 2;
const STREAM_OBSERVATION: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn stream(key: u64, purpose: u64, extra: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(key ^ purpose.rotate_left(32)) ^ extra))
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Simulated backend over a fixed list of worlds; prompt `i` uses world `i`.
#[derive(Debug, Clone, Default)]
pub struct SimGenerator {
    worlds: Vec<SimWorld>,
}

impl SimGenerator {
    pub fn new(worlds: Vec<SimWorld>) -> Result<Self, GenError> {
        for w in &worlds {
            w.validate()?;
        }
        Ok(SimGenerator { worlds })
    }

    pub fn world(&self, prompt_id: u64) -> Result<&SimWorld, GenError> {
        usize::try_from(prompt_id)
            .ok()
            .and_then(|i| self.worlds.get(i))
            .ok_or(GenError::UnknownPrompt(prompt_id))
    }

    pub fn worlds(&self) -> &[SimWorld] {
        &self.worlds
    }

    /// Same worlds with the calibration mode replaced everywhere.
    pub fn with_calibration(&self, calibration: Calibration) -> Self {
        SimGenerator {
            worlds: self
                .worlds
                .iter()
                .map(|w| SimWorld { calibration, ..*w })
                .collect(),
        }
    }

    /// Same worlds with a different mid-generation noise scale everywhere.
    pub fn with_mid_noise(&self, sigma0: f64) -> Self {
        SimGenerator {
            worlds: self
                .worlds
                .iter()
                .map(|w| SimWorld {
                    mid_noise_sigma0: sigma0,
                    ..*w
                })
                .collect(),
        }
    }

    fn response_length(world: &SimWorld, key: u64) -> u32 {
        if world.length_sigma == 0.0 {
            return world.full_length;
        }
        let mut rng = stream(key, STREAM_LENGTH, 0);
        let draw = f64::from(world.full_length) + world.length_sigma * std_normal(&mut rng);
        draw.round().clamp(1.0, f64::from(u32::MAX)) as u32
    }
}

impl Generator for SimGenerator {
    fn start_generation(&self, req: &GenerationRequest) -> Result<Sample, GenError> {
        req.validate()?;
        let world = self.world(req.prompt_id)?;
        let key = sample_stream_key(req.seed, req.prompt_id, req.sample_index);

        let z = world.mu + world.sigma * std_normal(&mut stream(key, STREAM_REWARD, 0));
        let g = req.temperature.min(1.0);
        let latent = (1.0 - g) * world.greedy_reward + g * z;

        let full_length = Self::response_length(world, key);
        let observation_noise = std_normal(&mut stream(key, STREAM_OBSERVATION, 0));
        let tokens = req.token_budget.min(full_length);
        let finished = tokens == full_length;

        Ok(Sample {
            prompt_id: req.prompt_id,
            sample_index: req.sample_index,
            tokens_generated: tokens,
            text: String::new(),
            finished,
            continuation: (!finished).then_some(Continuation(ContinuationState::Sim {
                full_length,
                observation_noise,
            })),
            temperature_used: req.temperature,
            latent_reward: Some(latent),
            stream_key: key,
        })
    }

    fn continue_generation(&self, sample: &Sample, extra_budget: u32) -> Result<Sample, GenError> {
        if sample.finished {
            return Err(finished_misuse(sample));
        }
        if extra_budget == 0 {
            return Err(GenError::InvalidRequest("extra_budget must be >= 1".into()));
        }
        let Some(Continuation(ContinuationState::Sim { full_length, .. })) = &sample.continuation
        else {
            return Err(GenError::InvalidRequest(
                "sample has no simulated continuation handle".into(),
            ));
        };
        let tokens = sample
            .tokens_generated
            .saturating_add(extra_budget)
            .min(*full_length);
        let finished = tokens == *full_length;
        let mut next = sample.clone();
        next.tokens_generated = tokens;
        next.finished = finished;
        if finished {
            next.continuation = None;
        }
        Ok(next)
    }

    fn self_evaluate(
        &self,
        _prompt: &Prompt,
        sample: &Sample,
    ) -> Result<EvalLikelihoods, GenError> {
        let world = self.world(sample.prompt_id)?;
        let r = sample.latent_reward.ok_or_else(|| {
            GenError::InvalidRequest("sample was not produced by the simulated backend".into())
        })?;
        let t = sample.tokens_generated;
        let score = match &sample.continuation {
            Some(Continuation(ContinuationState::Sim {
                full_length,
                observation_noise,
            })) if !sample.finished => {
                let observed = r + world.mid_sigma(t, *full_length) * observation_noise;
                score_at(world, observed, t, *full_length)
            }
            _ => score_at(world, r, t, t.max(1)),
        };
        let score = match world.calibration {
            Calibration::Exact => score,
            Calibration::Noisy { logit_std } => {
                let mut rng = stream(sample.stream_key, STREAM_EVAL, u64::from(t));
                let logit = (score / (1.0 - score)).ln() + logit_std * std_normal(&mut rng);
                1.0 / (1.0 + (-logit).exp())
            }
        };
        Ok(EvalLikelihoods::new(score, 1.0 - score))
    }
}
