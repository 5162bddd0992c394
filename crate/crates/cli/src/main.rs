use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptive_compute::config::Config;
use adaptive_compute::dataset::{self, PairInput, PreferencePair, RemoteJudgeReward};
use adaptive_compute::experiment::{
    self, compare_selectors, evaluate_strategy, run_grid, ExecConfig, GridReport, MetricRow,
    RunOptions, Strategy, StrategyResult,
};
use adaptive_compute::generator::remote::RemoteGenerator;
use adaptive_compute::par::Exec;
use adaptive_compute::{Error, Prompt};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

#[derive(Parser, Debug)]
#[command(
    name = "adaptive-compute",
    version,
    about = "Adaptive best-of-N sampling and pruning"
)]
struct Cli {
    /// TOML config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Number of simulated prompts.
    #[arg(long, global = true)]
    prompts: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the simulated workload (and optionally on-policy pairs) to the output directory.
    Simulate {
        /// Also write this many simulated preference pairs to pairs.jsonl.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Fixed best-of-N.
    Fixed {
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Adaptive sampling with optional annealing.
    Adaptive(AdaptiveArgs),
    /// Early pruning of partial responses.
    Prune(PruneArgs),
    /// Full strategy sweep plus the selector comparison.
    Grid,
    /// Build the self-evaluation training set from preference pairs.
    BuildDataset {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, conflicts_with = "no_truncate")]
        truncate: bool,
        #[arg(long)]
        no_truncate: bool,
        #[arg(long)]
        out: PathBuf,
        /// Fill missing rewards with the configured remote judge.
        #[arg(long)]
        remote_rewards: bool,
    },
    /// Run one strategy against a live completions endpoint.
    RemoteEval {
        /// JSONL file of `{"id": .., "text": ..}` prompts.
        #[arg(long = "prompt-file")]
        prompt_file: PathBuf,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[command(subcommand)]
        strategy: RemoteStrategy,
    },
}

#[derive(Args, Debug)]
struct AdaptiveArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    no_annealing: bool,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    prune_at: Option<u32>,
    #[arg(long)]
    prune_frac: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum RemoteStrategy {
    Fixed {
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    Adaptive(AdaptiveArgs),
    Prune(PruneArgs),
}

fn adaptive_strategy(cfg: &Config, a: &AdaptiveArgs) -> Strategy {
    let mut p = cfg.adaptive;
    p.tau = a.tau.unwrap_or(p.tau);
    p.n_max = a.n_max.unwrap_or(p.n_max);
    if a.no_annealing {
        p.annealing = false;
    }
    Strategy::Adaptive(p)
}

fn prune_strategy(cfg: &Config, a: &PruneArgs) -> Strategy {
    let mut p = cfg.prune;
    p.n_initial = a.n.unwrap_or(p.n_initial);
    p.prune_at_tokens = a.prune_at.unwrap_or(p.prune_at_tokens);
    p.prune_fraction = a.prune_frac.unwrap_or(p.prune_fraction);
    Strategy::Prune(p)
}

/// Strategies swept by `grid`.
fn grid_strategies(cfg: &Config) -> Vec<Strategy> {
    let n_max = cfg.adaptive.n_max;
    let mut s = Vec::new();
    for annealing in [true, false] {
        for tau in [0.92, 0.96, 0.98, 0.99, 1.0] {
            s.push(Strategy::adaptive(tau, n_max, annealing));
        }
    }
    for r in [0.10, 0.12, 0.13, 0.14, 0.15, 0.16, 0.17, 0.18, 0.20] {
        s.push(Strategy::reward_threshold(r, n_max, false));
    }
    let n = cfg.prune.n_initial;
    for frac in [0.5, 0.75] {
        for at in [0, 64, 128] {
            s.push(Strategy::prune(n, at, frac));
        }
    }
    s
}

fn opts(cfg: &Config) -> RunOptions {
    RunOptions {
        seed: cfg.seed,
        exec: ExecConfig { jobs: cfg.jobs },
        success_threshold: cfg.success_threshold,
    }
}

fn print_rows(rows: &[MetricRow]) -> Result<(), Error> {
    print!("{}", experiment::metrics_csv(rows)?);
    Ok(())
}

fn sim_run(cfg: &Config, strategies: &[Strategy]) -> Result<GridReport, Error> {
    let w = cfg.workload.build()?;
    let gen = w.generator()?;
    let prompts = w.prompts();
    info!(
        "{} prompts, {} strategies + baselines",
        prompts.len(),
        strategies.len()
    );
    let report = run_grid(&gen, &prompts, strategies, &opts(cfg), Some(&cfg.out_dir))?;
    print_rows(&report.rows)?;
    Ok(report)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Error> {
    let s = serde_json::to_string_pretty(v)?;
    std::fs::write(path, s + "\n").map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    if let Some(n) = cli.prompts {
        cfg.workload.n_prompts = n;
    }

    match cli.cmd {
        Cmd::Simulate { pairs } => {
            let w = cfg.workload.build()?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
                path: cfg.out_dir.display().to_string(),
                source: e,
            })?;
            write_json(&cfg.out_dir.join("workload.json"), &w)?;
            dataset::write_jsonl(&cfg.out_dir.join("prompts.jsonl"), &w.prompts())?;
            if let Some(n) = pairs {
                let gen = w.generator()?;
                let p = Exec::from(ExecConfig { jobs: cfg.jobs })
                    .install(|| dataset::simulate_pairs(&gen, n, cfg.seed))?;
                dataset::write_jsonl(&cfg.out_dir.join("pairs.jsonl"), &p)?;
            }
            println!(
                "wrote workload with {} prompts to {}",
                w.worlds.len(),
                cfg.out_dir.display()
            );
        }
        Cmd::Fixed { n } => {
            sim_run(&cfg, &[Strategy::fixed(n)])?;
        }
        Cmd::Adaptive(a) => {
            let s = adaptive_strategy(&cfg, &a);
            sim_run(&cfg, &[s])?;
        }
        Cmd::Prune(a) => {
            let s = prune_strategy(&cfg, &a);
            sim_run(&cfg, &[s])?;
        }
        Cmd::Grid => {
            sim_run(&cfg, &grid_strategies(&cfg))?;
            let w = cfg.workload.build()?;
            let gen = w.generator()?;
            let n = cfg.adaptive.n_max;
            let table = Exec::from(ExecConfig { jobs: cfg.jobs })
                .install(|| compare_selectors(&gen, &w.prompts(), n, cfg.seed))?;
            write_json(&cfg.out_dir.join("selectors.json"), &table)?;
        }
        Cmd::BuildDataset {
            pairs,
            epsilon,
            truncate,
            no_truncate,
            out,
            remote_rewards,
        } => {
            let eps = epsilon.unwrap_or(cfg.dataset.epsilon);
            let truncate = if no_truncate {
                false
            } else {
                truncate || cfg.dataset.truncate
            };
            let mut inputs: Vec<PairInput> = dataset::read_jsonl(&pairs)?;
            let exec = Exec::from(ExecConfig { jobs: cfg.jobs });
            if remote_rewards {
                let judge = RemoteJudgeReward::new(RemoteGenerator::new(cfg.remote.clone())?);
                exec.install(|| dataset::attach_rewards(&mut inputs, &judge))?;
            }
            let labeled = inputs
                .iter()
                .map(|p| PreferencePair::from_input(p, eps))
                .collect::<Result<Vec<_>, _>>()?;
            let (records, stats) =
                exec.install(|| dataset::build_dataset(&labeled, cfg.seed, truncate))?;
            dataset::write_jsonl(&out, &records)?;
            if stats.skipped_truncations > 0 {
                warn!(
                    "{} responses too short to truncate",
                    stats.skipped_truncations
                );
            }
            println!("{}", serde_json::to_string(&stats)?);
        }
        Cmd::RemoteEval {
            prompt_file,
            endpoint,
            model,
            strategy,
        } => {
            if let Some(e) = endpoint {
                cfg.remote.endpoint = e;
            }
            if let Some(m) = model {
                cfg.remote.model = m;
            }
            let gen = RemoteGenerator::new(cfg.remote.clone())?;
            let prompts: Vec<Prompt> = dataset::read_jsonl(&prompt_file)?;
            let s = match strategy {
                RemoteStrategy::Fixed { n } => Strategy::fixed(n),
                RemoteStrategy::Adaptive(a) => adaptive_strategy(&cfg, &a),
                RemoteStrategy::Prune(a) => prune_strategy(&cfg, &a),
            };
            let runs = Exec::from(ExecConfig { jobs: cfg.jobs })
                .install(|| evaluate_strategy(&gen, &prompts, &s, cfg.seed))?;
            let label = s.to_string();
            let report = GridReport {
                rows: vec![MetricRow::from_runs(&label, &runs, cfg.success_threshold)],
                results: vec![StrategyResult {
                    strategy: s,
                    label,
                    runs,
                }],
            };
            experiment::write_report(&report, &cfg.out_dir)?;
            print_rows(&report.rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let top = e.to_string();
            eprintln!("error: {top}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let msg = s.to_string();
                if !top.contains(&msg) {
                    eprintln!("  caused by: {msg}");
                }
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
