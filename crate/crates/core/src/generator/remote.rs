//! Completions-API backend.
//!
//! Talks to any server exposing the common `POST /v1/completions` JSON shape
//! with per-token top-k log-probabilities. Self-evaluation is a one-token
//! completion after `(prompt, response, question)`; the likelihoods of the
//! good/bad answers are read from the first position's top log-probabilities.

pub mod stub;

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    finished_misuse, sample_stream_key, Continuation, ContinuationState, EvalLikelihoods,
    GenerationRequest, Generator, Prompt, Sample, BAD_TOKEN, GOOD_TOKEN, SELF_EVAL_PROMPT,
};
use crate::error::GenError;

/// Turn markers used when the server expects a chat-formatted raw prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub user_start: String,
    pub user_end: String,
    pub assistant_start: String,
    pub assistant_end: String,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        ChatTemplate {
            user_start: "<|start_header_id|>user<|end_header_id|>\n\n".into(),
            user_end: "<|eot_id|>".into(),
            assistant_start: "<|start_header_id|>assistant<|end_header_id|>\n\n".into(),
            assistant_end: "<|eot_id|>".into(),
        }
    }
}

/// How the self-evaluation question is spliced after a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptFormat {
    /// Plain text continuation: `prompt + response + "\n\n" + question + "\n"`.
    #[default]
    Raw,
    /// The question becomes a new user turn.
    Chat(ChatTemplate),
}

impl PromptFormat {
    pub fn generation_prompt(&self, prompt: &str) -> String {
        match self {
            PromptFormat::Raw => prompt.to_owned(),
            PromptFormat::Chat(t) => {
                format!(
                    "{}{prompt}{}{}",
                    t.user_start, t.user_end, t.assistant_start
                )
            }
        }
    }

    pub fn eval_prompt(&self, prompt: &str, response: &str) -> String {
        match self {
            PromptFormat::Raw => format!("{prompt}{response}\n\n{SELF_EVAL_PROMPT}\n"),
            PromptFormat::Chat(t) => format!(
                "{}{response}{}{}{SELF_EVAL_PROMPT}{}{}",
                self.generation_prompt(prompt),
                t.assistant_end,
                t.user_start,
                t.user_end,
                t.assistant_start
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Full URL of the completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Top-k depth of returned log-probabilities.
    pub logprobs: u32,
    pub timeout_secs: f64,
    /// Extra attempts after the first on transport errors, 429 and 5xx.
    pub retries: u32,
    pub backoff_ms: u64,
    pub prompt_format: PromptFormat,
    /// Lower bound applied to every requested temperature.
    pub temperature_floor: f64,
    pub send_seed: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            model: "default".into(),
            api_key: None,
            logprobs: 5,
            timeout_secs: 120.0,
            retries: 3,
            backoff_ms: 250,
            prompt_format: PromptFormat::Raw,
            temperature_floor: 0.0,
            send_seed: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CompletionRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub temperature: f64,
    pub max_tokens: u32,
    pub logprobs: u32,
    pub echo: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<Choice>,
    #[serde(default)]
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Choice {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub finish_reason: Option<String>,
    #[serde(default)]
    pub logprobs: Option<Logprobs>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Logprobs {
    #[serde(default)]
    pub tokens: Option<Vec<String>>,
    #[serde(default)]
    pub top_logprobs: Option<Vec<Option<HashMap<String, f64>>>>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Usage {
    pub completion_tokens: u32,
}

/// Good/bad likelihoods from one top-logprobs map. Tokens match after
/// stripping leading whitespace, so `"No"` and `" No"` both count; when several
/// variants are present their probabilities are summed.
pub fn extract_eval_likelihoods(
    top: &HashMap<String, f64>,
    depth: u32,
) -> Result<EvalLikelihoods, GenError> {
    let mut good = None::<f64>;
    let mut bad = None::<f64>;
    // Sorted so float summation order is fixed.
    let mut entries: Vec<_> = top.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    for (token, logprob) in entries {
        let p = logprob.exp();
        match token.trim_start() {
            t if t == GOOD_TOKEN => *good.get_or_insert(0.0) += p,
            t if t == BAD_TOKEN => *bad.get_or_insert(0.0) += p,
            _ => {}
        }
    }
    if good.is_none() && bad.is_none() {
        return Err(GenError::MissingEvalTokens {
            good: GOOD_TOKEN.into(),
            bad: BAD_TOKEN.into(),
            depth,
        });
    }
    Ok(EvalLikelihoods::new(
        good.unwrap_or(0.0),
        bad.unwrap_or(0.0),
    ))
}

pub struct RemoteGenerator {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteGenerator")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .finish()
    }
}

struct Completion {
    text: String,
    tokens: u32,
    finished: bool,
    first_top_logprobs: Option<HashMap<String, f64>>,
}

impl RemoteGenerator {
    pub fn new(config: RemoteConfig) -> Result<Self, GenError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs.max(0.001)))
            .build()
            .map_err(|e| GenError::Transport {
                endpoint: config.endpoint.clone(),
                message: e.to_string(),
            })?;
        Ok(RemoteGenerator { config, client })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post_once(&self, body: &CompletionRequest<'_>) -> Result<String, GenError> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GenError::Transport {
            endpoint: self.config.endpoint.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GenError::Transport {
            endpoint: self.config.endpoint.clone(),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GenError::HttpStatus {
                status: status.as_u16(),
                body: text,
            });
        }
        Ok(text)
    }

    fn post(&self, body: &CompletionRequest<'_>) -> Result<String, GenError> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.config.retries && retryable(&e) => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::debug!("retrying completion request in {wait} ms: {e}");
                    thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn complete(
        &self,
        prompt: &str,
        temperature: f64,
        max_tokens: u32,
        seed: Option<u64>,
    ) -> Result<Completion, GenError> {
        let body = CompletionRequest {
            model: &self.config.model,
            prompt,
            temperature: temperature.max(self.config.temperature_floor),
            max_tokens,
            logprobs: self.config.logprobs,
            echo: false,
            seed: seed.filter(|_| self.config.send_seed),
        };
        let raw = self.post(&body)?;
        let parsed: CompletionResponse =
            serde_json::from_str(&raw).map_err(|e| GenError::MalformedBody(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GenError::MalformedBody("response has no choices".into()))?;
        let logprob_tokens = choice
            .logprobs
            .as_ref()
            .and_then(|l| l.tokens.as_ref())
            .map(|t| t.len() as u32);
        let tokens = parsed
            .usage
            .map(|u| u.completion_tokens)
            .or(logprob_tokens)
            .ok_or_else(|| {
                GenError::MalformedBody("no usage.completion_tokens or logprobs.tokens".into())
            })?;
        let finished = match choice.finish_reason.as_deref() {
            Some("length") => false,
            Some(_) => true,
            None => tokens < max_tokens,
        };
        let first_top_logprobs = choice
            .logprobs
            .and_then(|l| l.top_logprobs)
            .and_then(|v| v.into_iter().next())
            .flatten();
        Ok(Completion {
            text: choice.text,
            tokens,
            finished,
            first_top_logprobs,
        })
    }
}

fn retryable(e: &GenError) -> bool {
    match e {
        GenError::Transport { .. } => true,
        GenError::HttpStatus { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl Generator for RemoteGenerator {
    fn start_generation(&self, req: &GenerationRequest) -> Result<Sample, GenError> {
        req.validate()?;
        let formatted = self
            .config
            .prompt_format
            .generation_prompt(&req.prompt_text);
        let seed = sample_stream_key(req.seed, req.prompt_id, req.sample_index);
        let out = self.complete(&formatted, req.temperature, req.token_budget, Some(seed))?;
        Ok(Sample {
            prompt_id: req.prompt_id,
            sample_index: req.sample_index,
            tokens_generated: out.tokens,
            text: out.text,
            finished: out.finished,
            continuation: (!out.finished).then_some(Continuation(ContinuationState::Remote {
                formatted_prompt: formatted,
            })),
            temperature_used: req.temperature,
            latent_reward: None,
            stream_key: seed,
        })
    }

    fn continue_generation(&self, sample: &Sample, extra_budget: u32) -> Result<Sample, GenError> {
        if sample.finished {
            return Err(finished_misuse(sample));
        }
        if extra_budget == 0 {
            return Err(GenError::InvalidRequest("extra_budget must be >= 1".into()));
        }
        let Some(Continuation(ContinuationState::Remote { formatted_prompt })) =
            &sample.continuation
        else {
            return Err(GenError::InvalidRequest(
                "sample has no remote continuation handle".into(),
            ));
        };
        let resumed = format!("{formatted_prompt}{}", sample.text);
        let out = self.complete(
            &resumed,
            sample.temperature_used,
            extra_budget,
            Some(
                sample
                    .stream_key
                    .wrapping_add(u64::from(sample.tokens_generated)),
            ),
        )?;
        let mut next = sample.clone();
        next.text.push_str(&out.text);
        next.tokens_generated = sample.tokens_generated.saturating_add(out.tokens);
        next.finished = out.finished;
        if out.finished {
            next.continuation = None;
        }
        Ok(next)
    }

    fn self_evaluate(&self, prompt: &Prompt, sample: &Sample) -> Result<EvalLikelihoods, GenError> {
        let eval_prompt = self
            .config
            .prompt_format
            .eval_prompt(&prompt.text, &sample.text);
        let out = self.complete(&eval_prompt, 0.0, 1, None)?;
        let top = out.first_top_logprobs.ok_or_else(|| {
            GenError::MalformedBody("scoring response carries no top_logprobs".into())
        })?;
        extract_eval_likelihoods(&top, self.config.logprobs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn top(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn extracts_with_and_without_leading_space() {
        let l = extract_eval_likelihoods(&top(&[(" No", 0.6f64.ln()), ("Yes", 0.2f64.ln())]), 5)
            .unwrap();
        assert!((l.p_good - 0.6).abs() < 1e-12 && (l.p_bad - 0.2).abs() < 1e-12);
    }

    #[test]
    fn variants_are_summed() {
        let l = extract_eval_likelihoods(
            &top(&[
                ("No", 0.5f64.ln()),
                (" No", 0.1f64.ln()),
                ("\nYes", 0.3f64.ln()),
            ]),
            5,
        )
        .unwrap();
        assert!((l.p_good - 0.6).abs() < 1e-12 && (l.p_bad - 0.3).abs() < 1e-12);
    }

    #[test]
    fn one_missing_is_zero_both_missing_errors() {
        let l = extract_eval_likelihoods(&top(&[("No", 0.9f64.ln()), ("The", -3.0)]), 2).unwrap();
        assert_eq!(l.p_bad, 0.0);
        let e = extract_eval_likelihoods(&top(&[("The", -1.0), ("I", -2.0)]), 2).unwrap_err();
        assert!(matches!(e, GenError::MissingEvalTokens { depth: 2, .. }));
        // "Nope" is not "No"
        assert!(extract_eval_likelihoods(&top(&[("Nope", -0.1)]), 1).is_err());
    }

    #[test]
    fn prompt_formats() {
        assert_eq!(
            PromptFormat::Raw.eval_prompt("Q: 1+1? ", "2"),
            format!("Q: 1+1? 2\n\n{SELF_EVAL_PROMPT}\n")
        );
        let chat = PromptFormat::Chat(ChatTemplate {
            user_start: "<u>".into(),
            user_end: "</u>".into(),
            assistant_start: "<a>".into(),
            assistant_end: "</a>".into(),
        });
        assert_eq!(chat.generation_prompt("hi"), "<u>hi</u><a>");
        assert_eq!(
            chat.eval_prompt("hi", "yo"),
            format!("<u>hi</u><a>yo</a><u>{SELF_EVAL_PROMPT}</u><a>")
        );
    }

    #[test]
    fn request_shape() {
        let body = CompletionRequest {
            model: "m",
            prompt: "p",
            temperature: 0.5,
            max_tokens: 1,
            logprobs: 5,
            echo: false,
            seed: None,
        };
        let v = serde_json::to_value(&body).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"model":"m","prompt":"p","temperature":0.5,"max_tokens":1,"logprobs":5,"echo":false})
        );
    }
}
