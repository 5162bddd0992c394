//! Evaluation protocol: strategies run over a prompt set, averaged into
//! metric rows, written as CSV plus a per-prompt audit log.
//!
//! Every strategy selects its final response by the same rule (top
//! win-or-tie score), so strategies differ only in how much they generate.

pub mod stats;
pub mod workload;

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{mix64, Generator, Prompt};
use crate::par::{self, Exec};
use crate::pruner::{run_pruned, PruneConfig};
use crate::sampler::{
    run_adaptive, run_fixed, AdaptivePolicy, RunStats, StopSignal, DEFAULT_MAX_NEW_TOKENS,
};

pub use stats::{bootstrap_mean, bootstrap_paired_diff, interpolate, mean, Interval};
pub use workload::{Workload, WorkloadConfig};

/// Version tag written at the top of `metrics.csv`.
pub const METRICS_SCHEMA: &str = "# adaptive-compute metrics v1";
/// Fixed best-of-N baselines present in every grid.
pub const BASELINE_NS: [usize; 5] = [1, 2, 4, 8, 16];

/// `100 * (q - q_one) / (q_max - q_one)`.
pub fn percent_of_max_improvement(q: f64, q_one: f64, q_max: f64) -> Result<f64> {
    if q_max == q_one {
        return Err(Error::UndefinedBaseline);
    }
    Ok(100.0 * ((q - q_one) / (q_max - q_one)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Fixed { n: usize },
    Adaptive(AdaptivePolicy),
    Prune(PruneConfig),
}

impl Strategy {
    pub fn fixed(n: usize) -> Self {
        Strategy::Fixed { n }
    }

    pub fn adaptive(tau: f64, n_max: usize, annealing: bool) -> Self {
        Strategy::Adaptive(AdaptivePolicy {
            tau,
            n_max,
            annealing,
            ..Default::default()
        })
    }

    /// Adaptive sampling that stops on the underlying reward instead of the score.
    pub fn reward_threshold(threshold: f64, n_max: usize, annealing: bool) -> Self {
        Strategy::Adaptive(AdaptivePolicy {
            tau: threshold,
            n_max,
            annealing,
            stop_on: StopSignal::LatentReward,
            ..Default::default()
        })
    }

    pub fn prune(n: usize, at: u32, fraction: f64) -> Self {
        Strategy::Prune(PruneConfig {
            n_initial: n,
            prune_at_tokens: at,
            prune_fraction: fraction,
            ..Default::default()
        })
    }

    pub fn run<G: Generator>(&self, prompt: &Prompt, gen: &G, seed: u64) -> Result<RunStats> {
        match self {
            Strategy::Fixed { n } => run_fixed(prompt, gen, *n, DEFAULT_MAX_NEW_TOKENS, seed),
            Strategy::Adaptive(p) => run_adaptive(prompt, gen, p, seed),
            Strategy::Prune(c) => run_pruned(prompt, gen, c, seed),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Fixed { n } => write!(f, "fixed_n={n}"),
            Strategy::Adaptive(p) => {
                let anneal = if p.annealing { "anneal" } else { "no_anneal" };
                match p.stop_on {
                    StopSignal::Score => {
                        write!(f, "adaptive_tau={}_nmax={}_{anneal}", p.tau, p.n_max)
                    }
                    StopSignal::LatentReward => {
                        write!(f, "adaptive_reward={}_nmax={}_{anneal}", p.tau, p.n_max)
                    }
                }
            }
            Strategy::Prune(c) => write!(
                f,
                "prune_n={}_at={}_frac={}",
                c.n_initial, c.prune_at_tokens, c.prune_fraction
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub seed: u64,
    pub exec: ExecConfig,
    /// Latent reward at or above which a selected response counts as a success.
    pub success_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ExecConfig {
    pub jobs: Option<usize>,
}

impl From<ExecConfig> for Exec {
    fn from(c: ExecConfig) -> Self {
        Exec { jobs: c.jobs }
    }
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: 0,
            exec: ExecConfig::default(),
            success_threshold: 0.14,
        }
    }
}

/// Runs one strategy over every prompt; results are in prompt order.
pub fn evaluate_strategy<G: Generator>(
    gen: &G,
    prompts: &[Prompt],
    strategy: &Strategy,
    seed: u64,
) -> Result<Vec<RunStats>> {
    par::try_map_slice(prompts, |p| strategy.run(p, gen, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub avg_samples: f64,
    pub avg_batches: f64,
    pub avg_tokens: f64,
    /// Mean underlying reward of the selected responses (simulation only).
    pub mean_quality: Option<f64>,
    pub success_rate: Option<f64>,
    pub mean_selected_score: f64,
    pub percent_of_max_improvement: Option<f64>,
}

impl MetricRow {
    pub fn from_runs(strategy: &str, runs: &[RunStats], success_threshold: f64) -> Self {
        let avg =
            |f: &dyn Fn(&RunStats) -> f64| stats::mean(&runs.iter().map(f).collect::<Vec<_>>());
        let rewards: Option<Vec<f64>> = runs.iter().map(|r| r.selected_reward).collect();
        MetricRow {
            strategy: strategy.to_owned(),
            avg_samples: avg(&|r| r.samples_used as f64),
            avg_batches: avg(&|r| r.batches_used as f64),
            avg_tokens: avg(&|r| r.tokens_generated as f64),
            mean_quality: rewards.as_deref().map(stats::mean),
            success_rate: rewards.as_deref().map(|rs| {
                rs.iter().filter(|&&r| r >= success_threshold).count() as f64 / rs.len() as f64
            }),
            mean_selected_score: avg(&|r| r.best.score),
            percent_of_max_improvement: None,
        }
    }
}

/// Per-prompt line of `per_prompt.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct PromptRecord<'a> {
    pub strategy: &'a str,
    #[serde(flatten)]
    pub stats: &'a RunStats,
}

#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub label: String,
    pub runs: Vec<RunStats>,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub rows: Vec<MetricRow>,
    pub results: Vec<StrategyResult>,
}

impl GridReport {
    pub fn row(&self, label: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.strategy == label)
    }

    pub fn runs(&self, label: &str) -> Option<&[RunStats]> {
        self.results
            .iter()
            .find(|r| r.label == label)
            .map(|r| r.runs.as_slice())
    }
}

/// Baselines first (fixed best-of-{1,2,4,8,16}), then the caller's strategies
/// in order with duplicates dropped.
pub fn with_baselines(strategies: &[Strategy]) -> Vec<Strategy> {
    let mut all: Vec<Strategy> = BASELINE_NS.iter().map(|&n| Strategy::fixed(n)).collect();
    for s in strategies {
        if !all.contains(s) {
            all.push(*s);
        }
    }
    all
}

/// Runs every strategy (plus the fixed baselines) and computes metric rows.
/// When `out_dir` is given, writes `metrics.csv` and `per_prompt.jsonl` there;
/// a write failure returns the computed rows inside the error.
pub fn run_grid<G: Generator>(
    gen: &G,
    prompts: &[Prompt],
    strategies: &[Strategy],
    opts: &RunOptions,
    out_dir: Option<&Path>,
) -> Result<GridReport> {
    if strategies.is_empty() {
        return Err(Error::Misuse("grid needs at least one strategy"));
    }
    if prompts.is_empty() {
        return Err(Error::Misuse("grid needs at least one prompt"));
    }
    let all = with_baselines(strategies);
    let exec: Exec = opts.exec.into();
    let results = exec.install(|| -> Result<Vec<StrategyResult>> {
        all.iter()
            .map(|s| {
                Ok(StrategyResult {
                    strategy: *s,
                    label: s.to_string(),
                    runs: evaluate_strategy(gen, prompts, s, opts.seed)?,
                })
            })
            .collect()
    })?;

    let mut rows: Vec<MetricRow> = results
        .iter()
        .map(|r| MetricRow::from_runs(&r.label, &r.runs, opts.success_threshold))
        .collect();
    let q = |n: usize| {
        rows.iter()
            .find(|r| r.strategy == Strategy::fixed(n).to_string())
            .and_then(|r| r.mean_quality)
    };
    if let (Some(q_one), Some(q_max)) = (q(1), q(*BASELINE_NS.last().expect("non-empty"))) {
        for row in &mut rows {
            row.percent_of_max_improvement = row
                .mean_quality
                .and_then(|qq| percent_of_max_improvement(qq, q_one, q_max).ok());
        }
    }

    let report = GridReport { rows, results };
    if let Some(dir) = out_dir {
        if let Err(e) = write_report(&report, dir) {
            return Err(Error::WithPartialRows {
                source: Box::new(e),
                rows: report.rows,
            });
        }
    }
    Ok(report)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_default()
}

/// CSV text of the metric rows, schema line first.
pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "strategy",
        "avg_samples",
        "avg_batches",
        "avg_tokens",
        "mean_quality",
        "success_rate",
        "mean_selected_score",
        "percent_of_max_improvement",
    ])?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            fmt_f(r.avg_samples),
            fmt_f(r.avg_batches),
            fmt_f(r.avg_tokens),
            fmt_opt(r.mean_quality),
            fmt_opt(r.success_rate),
            fmt_f(r.mean_selected_score),
            fmt_opt(r.percent_of_max_improvement),
        ])?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::io("metrics.csv", e.into_error()))?;
    Ok(format!(
        "{METRICS_SCHEMA}\n{}",
        String::from_utf8_lossy(&body)
    ))
}

pub fn write_report(report: &GridReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, metrics_csv(&report.rows)?).map_err(|e| Error::io(&metrics, e))?;
    let records: Vec<PromptRecord<'_>> = report
        .results
        .iter()
        .flat_map(|r| {
            r.runs.iter().map(|stats| PromptRecord {
                strategy: &r.label,
                stats,
            })
        })
        .collect();
    crate::dataset::write_jsonl(&dir.join("per_prompt.jsonl"), &records)
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectorRow {
    pub selector: &'static str,
    pub quality: Interval,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectorTable {
    pub n: usize,
    pub rows: Vec<SelectorRow>,
    /// Per-prompt selected rewards in row order.
    #[serde(skip)]
    pub per_prompt: Vec<Vec<f64>>,
}

impl SelectorTable {
    pub fn quality(&self, selector: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.selector == selector)
            .map(|r| r.quality.estimate)
    }

    pub fn per_prompt(&self, selector: &str) -> Option<&[f64]> {
        self.rows
            .iter()
            .position(|r| r.selector == selector)
            .map(|i| self.per_prompt[i].as_slice())
    }
}

/// Best-of-`n` under three selectors sharing the same samples: a uniform
/// random pick, the generator's self-evaluation score, and the underlying
/// reward itself. Needs a backend that exposes latent rewards.
pub fn compare_selectors<G: Generator>(
    gen: &G,
    prompts: &[Prompt],
    n: usize,
    seed: u64,
) -> Result<SelectorTable> {
    let per = par::try_map_slice(prompts, |p| -> Result<[f64; 3]> {
        let stats = run_fixed(p, gen, n, DEFAULT_MAX_NEW_TOKENS, seed)?;
        let rewards: Vec<f64> = stats
            .samples
            .iter()
            .map(|s| {
                s.latent_reward
                    .ok_or(Error::Misuse("selector comparison needs latent rewards"))
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ 0x0053_454C) ^ p.id));
        let random = rewards[rng.random_range(0..rewards.len())];
        let by_score = stats
            .selected_reward
            .ok_or(Error::Misuse("no selected reward"))?;
        let oracle = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok([random, by_score, oracle])
    })?;
    let names = ["random", "self_eval", "oracle"];
    let per_prompt: Vec<Vec<f64>> = (0..3).map(|j| per.iter().map(|v| v[j]).collect()).collect();
    let rows = names
        .iter()
        .zip(&per_prompt)
        .enumerate()
        .map(|(j, (name, xs))| SelectorRow {
            selector: name,
            quality: bootstrap_mean(xs, 2000, 0.95, seed.wrapping_add(j as u64)),
        })
        .collect();
    Ok(SelectorTable {
        n,
        rows,
        per_prompt,
    })
}
