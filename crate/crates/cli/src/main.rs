use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use remind_cli::commands::{
    cmd_ablate, cmd_diagnose, cmd_gen_data, cmd_rollout, cmd_train, DATASET_FILE,
};
use remind_cli::config::VERSION;
use remind_cli::RunConfig;
use remind_core::trainer::RolloutMode;

#[derive(Parser)]
#[command(name = "remind", version = VERSION, about = "Train and probe a chunk-causal video diffusion model on synthetic worlds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, default_value = DATASET_FILE)]
        out: PathBuf,
    },
    /// Train a model; writes metrics, checkpoints and a summary.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate chunks for one clip from a checkpoint.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// i2v, v2v or refcache; overrides `rollout.mode`.
        #[arg(long)]
        mode: Option<RolloutMode>,
        /// Overrides `rollout.clip`.
        #[arg(long)]
        clip: Option<usize>,
    },
    /// Export KV-importance heatmaps and scores for one clip.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also run the memory-identifiability simulation.
        #[arg(long)]
        identifiability: bool,
    },
    /// Train every configured attention mode and tabulate recovery.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut overrides = cli.common.overrides.clone();
    if let Some(seed) = cli.common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Command::Rollout { mode, clip, .. } = &cli.command {
        if let Some(m) = mode {
            overrides.push(format!("rollout.mode=\"{}\"", m.name()));
        }
        if let Some(c) = clip {
            overrides.push(format!("rollout.clip={c}"));
        }
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData { out } => {
            let clips = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} clips to {}", clips.len(), out.display());
        }
        Command::Train { data, out } => {
            let s = cmd_train(&cfg, &data, &out)?;
            println!(
                "trained {} iterations; flow {:.4} -> {:.4}; outputs in {}",
                s.iterations,
                s.early_flow.unwrap_or(f64::NAN),
                s.late_flow.unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Rollout {
            checkpoint,
            data,
            out,
            ..
        } => {
            let r = cmd_rollout(&cfg, &checkpoint, &data, &out)?;
            println!(
                "{} rollout of clip {}: {} chunks from position {}",
                r.mode.name(),
                r.clip,
                r.generated_chunks,
                r.first_target_position
            );
            if let Some(e) = r.mean_abs_error {
                println!("mean absolute state error {e:.4}");
            }
        }
        Command::Diagnose {
            checkpoint,
            data,
            clip,
            out,
            identifiability,
        } => {
            let d = cmd_diagnose(&cfg, &checkpoint, &data, clip, &out, identifiability)?;
            match d.scores.anchor_retrieval_score {
                Some(s) => println!("anchor retrieval score {s:.4}"),
                None => println!("clip {clip} has no recovery chunk"),
            }
            for f in d.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Ablate { data, out } => {
            for r in cmd_ablate(&cfg, &data, &out)? {
                println!(
                    "{:8} recovery {:.4}  freeze {:.4}  ratio {:.3}  anchor score {:.4}",
                    r.mode.name(),
                    r.recovery_error,
                    r.freeze_error,
                    r.error_ratio,
                    r.anchor_retrieval_score
                );
            }
        }
    }
    Ok(())
}
