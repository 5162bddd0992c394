//! Generation backends.
//!
//! A [`Generator`] produces [`Sample`]s at a requested temperature, can stop
//! a sample at a token budget and resume it later, and answers the
//! self-evaluation query for full or partial responses. Two backends ship
//! here: [`sim::SimGenerator`], an analytically tractable simulation, and
//! [`remote::RemoteGenerator`], which talks to an HTTP completions server.

pub mod remote;
pub mod sim;

use serde::{Deserialize, Serialize};

use crate::error::GenError;

/// Question appended after a response to elicit the self-evaluation.
pub const SELF_EVAL_PROMPT: &str = "Would you do better if you started over? (\"Yes.\" or \"No.\")";
/// Answer meaning the response is as good as the model can do.
pub const GOOD_TOKEN: &str = "No";
/// Answer meaning resampling would likely help.
pub const BAD_TOKEN: &str = "Yes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub text: String,
}

impl Prompt {
    pub fn new(id: u64, text: impl Into<String>) -> Self {
        Prompt {
            id,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt_id: u64,
    pub prompt_text: String,
    pub sample_index: usize,
    /// Softmax temperature; 0 is greedy decoding.
    pub temperature: f64,
    /// Maximum tokens to produce in this call.
    pub token_budget: u32,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(
        prompt: &Prompt,
        sample_index: usize,
        temperature: f64,
        token_budget: u32,
        seed: u64,
    ) -> Self {
        GenerationRequest {
            prompt_id: prompt.id,
            prompt_text: prompt.text.clone(),
            sample_index,
            temperature,
            token_budget,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GenError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.token_budget == 0 {
            return Err(GenError::InvalidRequest("token_budget must be >= 1".into()));
        }
        Ok(())
    }
}

/// Opaque handle for resuming an unfinished sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Continuation(pub(crate) ContinuationState);

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ContinuationState {
    Sim {
        full_length: u32,
        /// Standard-normal draw scaling the mid-generation observation noise.
        observation_noise: f64,
    },
    Remote {
        /// Fully formatted prompt the partial text continues.
        formatted_prompt: String,
    },
}

/// One generated response, possibly partial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub prompt_id: u64,
    pub sample_index: usize,
    pub tokens_generated: u32,
    pub text: String,
    pub finished: bool,
    #[serde(skip)]
    pub continuation: Option<Continuation>,
    pub temperature_used: f64,
    /// Underlying reward, known only to the simulated backend. Strategies
    /// never select on it.
    pub latent_reward: Option<f64>,
    #[serde(skip)]
    pub(crate) stream_key: u64,
}

impl Sample {
    /// A finished response produced elsewhere, e.g. for scoring existing text.
    pub fn finished_text(prompt_id: u64, sample_index: usize, text: impl Into<String>) -> Self {
        Sample {
            prompt_id,
            sample_index,
            tokens_generated: 0,
            text: text.into(),
            finished: true,
            continuation: None,
            temperature_used: 0.0,
            latent_reward: None,
            stream_key: 0,
        }
    }

    pub fn sample_ref(&self) -> SampleRef {
        SampleRef {
            prompt_id: self.prompt_id,
            sample_index: self.sample_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub prompt_id: u64,
    pub sample_index: usize,
}

/// Likelihoods of the good and bad evaluation tokens from one next-token
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalLikelihoods {
    pub p_good: f64,
    pub p_bad: f64,
}

impl EvalLikelihoods {
    pub fn new(p_good: f64, p_bad: f64) -> Self {
        EvalLikelihoods { p_good, p_bad }
    }
}

/// A generation backend. Implementations must tolerate concurrent calls from
/// many in-flight samples.
pub trait Generator: Send + Sync {
    fn start_generation(&self, req: &GenerationRequest) -> Result<Sample, GenError>;

    /// Extends an unfinished sample by at most `extra_budget` tokens.
    /// Continuing a finished sample is an error.
    fn continue_generation(&self, sample: &Sample, extra_budget: u32) -> Result<Sample, GenError>;

    /// Likelihoods of the good/bad tokens after the response so far and the
    /// self-evaluation question.
    fn self_evaluate(&self, prompt: &Prompt, sample: &Sample) -> Result<EvalLikelihoods, GenError>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn start_generation(&self, req: &GenerationRequest) -> Result<Sample, GenError> {
        (**self).start_generation(req)
    }
    fn continue_generation(&self, sample: &Sample, extra_budget: u32) -> Result<Sample, GenError> {
        (**self).continue_generation(sample, extra_budget)
    }
    fn self_evaluate(&self, prompt: &Prompt, sample: &Sample) -> Result<EvalLikelihoods, GenError> {
        (**self).self_evaluate(prompt, sample)
    }
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn start_generation(&self, req: &GenerationRequest) -> Result<Sample, GenError> {
        (**self).start_generation(req)
    }
    fn continue_generation(&self, sample: &Sample, extra_budget: u32) -> Result<Sample, GenError> {
        (**self).continue_generation(sample, extra_budget)
    }
    fn self_evaluate(&self, prompt: &Prompt, sample: &Sample) -> Result<EvalLikelihoods, GenError> {
        (**self).self_evaluate(prompt, sample)
    }
}

pub(crate) fn finished_misuse(sample: &Sample) -> GenError {
    GenError::ContinueFinished {
        prompt_id: sample.prompt_id,
        sample_index: sample.sample_index,
    }
}

/// SplitMix64 finalizer; used to derive independent per-sample seeds.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the stream owned by `(seed, prompt_id, sample_index)`.
pub fn sample_stream_key(seed: u64, prompt_id: u64, sample_index: usize) -> u64 {
    mix64(mix64(mix64(seed) ^ prompt_id) ^ sample_index as u64)
}
