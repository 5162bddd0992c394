//! On-policy preference pairs with ties, and the self-evaluation training set
//! derived from them.
//!
//! A pair is labeled Win (1), Tie (0) or Loss (-1) by comparing the reward
//! difference against `epsilon`. Win and Tie responses become records whose
//! target is the good token; Loss responses target the bad token. With
//! truncation enabled each response also yields one record cut at a uniform
//! point in `[1, T-1]`, keeping the same target.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::remote::{PromptFormat, RemoteGenerator};
use crate::generator::sim::SimGenerator;
use crate::generator::{
    mix64, GenerationRequest, Generator, Prompt, Sample, BAD_TOKEN, GOOD_TOKEN, SELF_EVAL_PROMPT,
};
use crate::par;
use crate::scoring::normalize;

pub const WIN: i8 = 1;
pub const TIE: i8 = 0;
pub const LOSS: i8 = -1;

/// Preference label of response 1 against response 2.
pub fn label_pair(r1: f64, r2: f64, eps: f64) -> i8 {
    let d = r1 - r2;
    if d > eps {
        WIN
    } else if d < -eps {
        LOSS
    } else {
        TIE
    }
}

/// One line of a pairs file. Rewards may be missing when a [`RewardSource`]
/// fills them in. Token counts, when present, switch truncation to token
/// granularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInput {
    pub prompt: String,
    pub response_1: String,
    pub response_2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_1_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_2_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub response_1: String,
    pub response_2: String,
    pub reward_1: f64,
    pub reward_2: f64,
    pub label: i8,
    #[serde(default)]
    pub response_1_tokens: Option<u32>,
    #[serde(default)]
    pub response_2_tokens: Option<u32>,
}

impl PreferencePair {
    pub fn from_input(input: &PairInput, eps: f64) -> Result<Self> {
        let (Some(reward_1), Some(reward_2)) = (input.reward_1, input.reward_2) else {
            return Err(Error::Config(
                "pair is missing a reward; attach a reward source".into(),
            ));
        };
        Ok(PreferencePair {
            prompt: input.prompt.clone(),
            response_1: input.response_1.clone(),
            response_2: input.response_2.clone(),
            reward_1,
            reward_2,
            label: label_pair(reward_1, reward_2, eps),
            response_1_tokens: input.response_1_tokens,
            response_2_tokens: input.response_2_tokens,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationUnit {
    Token,
    Char,
}

/// One supervised example: `(prompt, response, question) -> target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfEvalRecord {
    pub prompt: String,
    pub response: String,
    pub truncated: bool,
    pub truncation_point: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_unit: Option<TruncationUnit>,
    pub eval_prompt: String,
    pub target: String,
}

impl SelfEvalRecord {
    /// Concatenated model input in the given prompt format.
    pub fn input_text(&self, format: &PromptFormat) -> String {
        format.eval_prompt(&self.prompt, &self.response)
    }
}

/// Target token for a response whose outcome (from its own side) is `label`.
pub fn target_for(label: i8) -> &'static str {
    if label == LOSS {
        BAD_TOKEN
    } else {
        GOOD_TOKEN
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub pairs: usize,
    pub records: usize,
    pub ties: usize,
    /// Truncated variants skipped because the response was one unit long.
    pub skipped_truncations: usize,
}

fn truncate_response(
    text: &str,
    tokens: Option<u32>,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(String, u32, TruncationUnit)>> {
    match tokens {
        Some(0) => Err(Error::Misuse("response has zero tokens")),
        Some(1) => Ok(None),
        Some(len) => {
            let t = rng.random_range(1..len);
            // Whitespace pieces stand in for tokens when text accompanies counts.
            let cut: Vec<&str> = text.split_whitespace().take(t as usize).collect();
            Ok(Some((cut.join(" "), t, TruncationUnit::Token)))
        }
        None => {
            let len = text.chars().count();
            if len == 0 {
                return Err(Error::Misuse("response text is empty"));
            }
            if len == 1 {
                return Ok(None);
            }
            let t = rng.random_range(1..len);
            let cut: String = text.chars().take(t).collect();
            Ok(Some((cut, t as u32, TruncationUnit::Char)))
        }
    }
}

/// Records for one pair, plus the number of skipped truncations.
pub fn pair_to_records(
    pair: &PreferencePair,
    rng: &mut ChaCha8Rng,
    truncate: bool,
) -> Result<(Vec<SelfEvalRecord>, usize)> {
    let sides = [
        (&pair.response_1, pair.response_1_tokens, pair.label),
        (&pair.response_2, pair.response_2_tokens, -pair.label),
    ];
    for (text, tokens, _) in &sides {
        if tokens.is_none() && text.is_empty() {
            return Err(Error::Misuse("pair responses must be non-empty"));
        }
    }
    let mut out = Vec::with_capacity(4);
    for (text, _, label) in &sides {
        out.push(SelfEvalRecord {
            prompt: pair.prompt.clone(),
            response: (*text).clone(),
            truncated: false,
            truncation_point: None,
            truncation_unit: None,
            eval_prompt: SELF_EVAL_PROMPT.into(),
            target: target_for(*label).into(),
        });
    }
    let mut skipped = 0;
    if truncate {
        for (text, tokens, label) in &sides {
            match truncate_response(text, *tokens, rng)? {
                Some((cut, t, unit)) => out.push(SelfEvalRecord {
                    prompt: pair.prompt.clone(),
                    response: cut,
                    truncated: true,
                    truncation_point: Some(t),
                    truncation_unit: Some(unit),
                    eval_prompt: SELF_EVAL_PROMPT.into(),
                    target: target_for(*label).into(),
                }),
                None => skipped += 1,
            }
        }
    }
    Ok((out, skipped))
}

pub fn tie_rate(pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Misuse("tie rate of an empty pair list"));
    }
    let ties = pairs.iter().filter(|p| p.label == TIE).count();
    Ok(ties as f64 / pairs.len() as f64)
}

/// Smallest epsilon at which at least `target` of the absolute reward
/// differences count as ties, by bisection.
pub fn calibrate_epsilon(abs_diffs: &[f64], target: f64) -> Result<f64> {
    if abs_diffs.is_empty() {
        return Err(Error::Misuse("no reward differences to calibrate against"));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!(
            "target tie rate {target} outside [0, 1]"
        )));
    }
    let rate = |eps: f64| {
        abs_diffs.iter().filter(|d| d.abs() <= eps).count() as f64 / abs_diffs.len() as f64
    };
    let (mut lo, mut hi) = (0.0f64, abs_diffs.iter().fold(0.0f64, |m, d| m.max(d.abs())));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rate(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Builds the self-evaluation dataset. Pair `i` draws its truncation points
/// from its own stream, so output does not depend on thread count.
pub fn build_dataset(
    pairs: &[PreferencePair],
    seed: u64,
    truncate: bool,
) -> Result<(Vec<SelfEvalRecord>, DatasetStats)> {
    let per_pair = par::try_map_indexed(pairs.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(mix64(seed) ^ i as u64));
        pair_to_records(&pairs[i], &mut rng, truncate)
    })?;
    let mut stats = DatasetStats {
        pairs: pairs.len(),
        ties: pairs.iter().filter(|p| p.label == TIE).count(),
        ..Default::default()
    };
    let mut records = Vec::with_capacity(pairs.len() * if truncate { 4 } else { 2 });
    for (recs, skipped) in per_pair {
        stats.skipped_truncations += skipped;
        records.extend(recs);
    }
    stats.records = records.len();
    Ok((records, stats))
}

/// Scalar reward for a response.
pub trait RewardSource: Send + Sync {
    fn reward(&self, prompt: &str, response: &str) -> Result<f64>;
}

/// Scores responses with a judge model behind a completions endpoint: the
/// reward is the normalized good-token likelihood after the evaluation question.
#[derive(Debug)]
pub struct RemoteJudgeReward {
    generator: RemoteGenerator,
}

impl RemoteJudgeReward {
    pub fn new(generator: RemoteGenerator) -> Self {
        RemoteJudgeReward { generator }
    }
}

impl RewardSource for RemoteJudgeReward {
    fn reward(&self, prompt: &str, response: &str) -> Result<f64> {
        let sample = Sample::finished_text(0, 0, response);
        let l = self
            .generator
            .self_evaluate(&Prompt::new(0, prompt), &sample)?;
        normalize(&l)
    }
}

/// Fills in missing rewards from `source`; existing rewards are kept.
pub fn attach_rewards(inputs: &mut [PairInput], source: &dyn RewardSource) -> Result<()> {
    let filled = par::try_map_slice(inputs, |p| -> Result<(f64, f64)> {
        let r1 = match p.reward_1 {
            Some(r) => r,
            None => source.reward(&p.prompt, &p.response_1)?,
        };
        let r2 = match p.reward_2 {
            Some(r) => r,
            None => source.reward(&p.prompt, &p.response_2)?,
        };
        Ok((r1, r2))
    })?;
    for (p, (r1, r2)) in inputs.iter_mut().zip(filled) {
        p.reward_1 = Some(r1);
        p.reward_2 = Some(r2);
    }
    Ok(())
}

/// On-policy pairs from the simulator: pair `i` uses prompt `i % worlds` and
/// two temperature-1 samples; rewards are the latent rewards and texts are
/// empty, so truncation works in tokens.
pub fn simulate_pairs(sim: &SimGenerator, n_pairs: usize, seed: u64) -> Result<Vec<PairInput>> {
    let worlds = sim.worlds().len();
    if worlds == 0 {
        return Err(Error::Config("simulator has no prompts".into()));
    }
    par::try_map_indexed(n_pairs, |i| -> Result<PairInput> {
        let prompt = Prompt::new((i % worlds) as u64, format!("sim-prompt-{}", i % worlds));
        let round = i / worlds;
        let draw = |j: usize| {
            sim.start_generation(&GenerationRequest::new(
                &prompt,
                2 * round + j,
                1.0,
                u32::MAX,
                seed,
            ))
        };
        let (a, b) = (draw(0)?, draw(1)?);
        Ok(PairInput {
            prompt: prompt.text.clone(),
            response_1: String::new(),
            response_2: String::new(),
            reward_1: a.latent_reward,
            reward_2: b.latent_reward,
            response_1_tokens: Some(a.tokens_generated),
            response_2_tokens: Some(b.tokens_generated),
        })
    })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
