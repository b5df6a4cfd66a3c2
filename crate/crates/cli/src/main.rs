// SPDX-License-Identifier: MIT OR Apache-2.0

//! `probesteer`: collect activations, sweep probes, steer generation.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 model/weights, 4 numeric.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use probesteer::probes::Pooling;
use probesteer::steering::{Positions, Strategy};
use probesteer::ErrorKind;

use config::{HookSelection, RunConfig};

/// A command-line mistake that maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "probesteer", version, about = "Bias probes and activation steering for GPT-2 models")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model preset: gpt2-small, gpt2-medium, gpt2-large or tiny-test.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Checkpoint file or weights directory [default: $PROBESTEER_WEIGHTS_DIR].
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Root seed for the split and the sampler.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `dataset gen` and `init-random`, the output file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Builtin corpus utilities.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Capture pooled activations for every statement and hook.
    Collect(PipelineArgs),
    /// Train a probe per hook and write sweep.csv, probes.json and report.json.
    Sweep {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Reuse features written by `collect` instead of running the model.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Print baseline and steered completions side by side.
    Steer {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        steer: SteerArgs,
        #[command(flatten)]
        generation: GenerationArgs,
        /// Prompt to complete; repeatable.
        #[arg(long)]
        prompt: Vec<String>,
        /// File with one prompt per line.
        #[arg(long)]
        prompts_file: Option<PathBuf>,
    },
    /// Complete one prompt, optionally steered.
    Generate {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        steer: SteerArgs,
        #[command(flatten)]
        generation: GenerationArgs,
        #[arg(long)]
        prompt: String,
        /// Apply steering (implied by --layer or --steering).
        #[arg(long)]
        steered: bool,
    },
    /// Full run: sweep, PCA at the best residual hook, steering demo, report.json.
    Report {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        steer: SteerArgs,
        #[command(flatten)]
        generation: GenerationArgs,
    },
    /// Write randomly initialised weights for a preset (for smoke tests).
    InitRandom,
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Write the builtin 140-statement corpus as JSONL.
    Gen,
}

#[derive(Args)]
struct PipelineArgs {
    /// Hook kinds to probe.
    #[arg(long, value_enum)]
    hooks: Option<HookSelection>,
    /// Token pooling: mean or last_token.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// JSONL corpus [default: builtin].
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// L2 regularisation strength.
    #[arg(long)]
    l2: Option<f64>,
}

#[derive(Args)]
struct SteerArgs {
    /// Residual layer to steer at [default: best resid_post probe].
    #[arg(long)]
    layer: Option<usize>,
    /// Steering strength [default: 4.0, or the config value].
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f32>,
    /// Load a steering vector file instead of computing one.
    #[arg(long)]
    steering: Option<PathBuf>,
}

#[derive(Args)]
struct GenerationArgs {
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Sampling strategy: greedy or top_k.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Intervention positions: all or generated_only.
    #[arg(long, value_parser = parse_positions)]
    positions: Option<Positions>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "greedy" => Ok(Strategy::Greedy),
        "top_k" | "topk" => Ok(Strategy::TopK),
        other => Err(format!("unknown strategy `{other}` (expected greedy or top_k)")),
    }
}

fn parse_positions(s: &str) -> Result<Positions, String> {
    match s {
        "all" => Ok(Positions::All),
        "generated_only" => Ok(Positions::GeneratedOnly),
        other => Err(format!("unknown positions `{other}` (expected all or generated_only)")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl PipelineArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.hooks, self.hooks);
        set(&mut cfg.pooling, self.pooling);
        if self.dataset.is_some() {
            cfg.dataset_path = self.dataset;
        }
        set(&mut cfg.split.test_fraction, self.test_fraction);
        set(&mut cfg.l2, self.l2);
    }
}

impl SteerArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.layer.is_some() {
            cfg.steer_layer = self.layer;
        }
        set(&mut cfg.alpha, self.alpha);
    }
}

impl GenerationArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let g = &mut cfg.generation;
        set(&mut g.max_new_tokens, self.max_new_tokens);
        set(&mut g.strategy, self.strategy);
        set(&mut g.k, self.k);
        set(&mut g.temperature, self.temperature);
        set(&mut g.positions, self.positions);
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.model_preset, cli.model.clone());
    if cli.weights.is_some() {
        cfg.weights_path = cli.weights.clone();
    }
    set(&mut cfg.seed, cli.seed);
    Ok(cfg)
}

fn read_prompts(path: &PathBuf) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| probesteer::Error::io(path.clone(), e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    let out = cli.out.clone();
    let set_dir = |cfg: &mut RunConfig| {
        if let Some(o) = &out {
            cfg.output_dir = o.clone();
        }
    };
    match cli.command {
        Command::Dataset { action: DatasetAction::Gen } => {
            let path = out.unwrap_or_else(|| cfg.output_dir.join("dataset.jsonl"));
            commands::dataset_gen(&path)
        }
        Command::InitRandom => {
            let path = out.unwrap_or_else(|| {
                PathBuf::from("weights").join(&cfg.model_preset).join(probesteer::model::WEIGHTS_FILE)
            });
            commands::init_random(&cfg, &path)
        }
        Command::Collect(p) => {
            set_dir(&mut cfg);
            p.apply(&mut cfg);
            commands::collect_cmd(&cfg.resolved())
        }
        Command::Sweep { pipeline, features } => {
            set_dir(&mut cfg);
            pipeline.apply(&mut cfg);
            commands::sweep_cmd(&cfg.resolved(), features.as_deref())
        }
        Command::Steer { pipeline, steer, generation, prompt, prompts_file } => {
            set_dir(&mut cfg);
            pipeline.apply(&mut cfg);
            steer.apply(&mut cfg);
            generation.apply(&mut cfg);
            let mut prompts = prompt;
            if let Some(f) = &prompts_file {
                prompts.extend(read_prompts(f)?);
            }
            if !prompts.is_empty() {
                cfg.prompts = prompts;
            }
            commands::steer_cmd(&cfg.resolved(), steer.steering.as_deref())
        }
        Command::Generate { pipeline, steer, generation, prompt, steered } => {
            set_dir(&mut cfg);
            pipeline.apply(&mut cfg);
            steer.apply(&mut cfg);
            generation.apply(&mut cfg);
            let steered = steered || steer.layer.is_some();
            commands::generate_cmd(&cfg.resolved(), &prompt, steered, steer.steering.as_deref())
        }
        Command::Report { pipeline, steer, generation } => {
            set_dir(&mut cfg);
            pipeline.apply(&mut cfg);
            steer.apply(&mut cfg);
            generation.apply(&mut cfg);
            commands::report_cmd(&cfg.resolved())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<probesteer::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Model => 3,
                ErrorKind::Numeric => 4,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
