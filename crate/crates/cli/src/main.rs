use std::path::PathBuf;

use anyhow::Context;
use bevcar_cli::checkpoint::read_checkpoint;
use bevcar_cli::commands;
use bevcar_cli::config::{parse_override, RunConfig};
use bevcar_cli::eval::{format_report, EvalOptions};
use bevcar_cli::train::{train, TrainOptions};
use bevcar_data::Condition;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bevcar", version, about = "Camera-radar BEV segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its condition split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "day,rain,night")]
        conditions: Vec<Condition>,
        /// Run config supplying grid and image size.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_parser = parse_override)]
        set: Vec<(String, String)>,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
        /// Override any config key, e.g. `--set optimizer.lr=0.0005`.
        #[arg(long = "set", value_parser = parse_override)]
        set: Vec<(String, String)>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        ranges: bool,
        #[arg(long)]
        conditions: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Predict one sample; writes logits as .npy and optionally a PNG.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        token: String,
        /// Dataset directory; defaults to the checkpoint's training dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        render: Option<PathBuf>,
        #[arg(long)]
        error_map: bool,
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Forward-pass runtime.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { out, num, seed, conditions, config, set } => {
            let cfg = RunConfig::from_env(config.as_deref(), &set)?;
            let split = commands::gen_data(&cfg, &out, num, seed, &conditions)?;
            let counts = split.counts();
            println!(
                "wrote {num} samples to {} (day {}, rain {}, night {})",
                out.display(),
                counts[&Condition::Day],
                counts[&Condition::Rain],
                counts[&Condition::Night]
            );
        }
        Command::Train { config, deterministic, mut set, seed, steps, data, out } => {
            if let Some(s) = seed {
                set.push(("seed".into(), s.to_string()));
            }
            if let Some(s) = steps {
                set.push(("optimizer.steps".into(), s.to_string()));
            }
            if let Some(d) = data {
                set.push(("dataset".into(), serde_json::to_string(&d)?));
            }
            if let Some(o) = out {
                set.push(("checkpoint_dir".into(), serde_json::to_string(&o)?));
            }
            let cfg = RunConfig::from_env(config.as_deref(), &set)?;
            let outcome = train(&cfg, TrainOptions { deterministic })?;
            println!("trained {} steps; checkpoint {}", outcome.steps, outcome.checkpoint.display());
            if let Some(r) = outcome.last_eval {
                print!("{}", bevcar_core::metrics::format_table(&[("eval".into(), r)]));
            }
        }
        Command::Eval { ckpt, data, split, ranges, conditions, json } => {
            let report = commands::eval(&ckpt, &data, split.as_deref(), EvalOptions { ranges, conditions })?;
            print!("{}", format_report(&report));
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Predict { ckpt, token, data, render, error_map, logits } => {
            let data = match data {
                Some(d) => d,
                None => read_checkpoint(&ckpt)?.0.config.dataset,
            };
            let logits = logits.unwrap_or_else(|| PathBuf::from(format!("{token}_logits.npy")));
            let out = commands::predict(&ckpt, &data, &token, &logits, render.as_deref(), error_map)?;
            println!("logits: {}", out.logits.display());
            if let Some(r) = out.render {
                println!("render: {}", r.display());
            }
        }
        Command::Bench { ckpt, reps, data } => {
            let r = commands::bench(&ckpt, data.as_deref(), reps)?;
            println!("{:.1} ms per forward pass ({:.2} FPS, median of {})", r.median_ms, r.fps, r.repetitions);
        }
    }
    Ok(())
}
