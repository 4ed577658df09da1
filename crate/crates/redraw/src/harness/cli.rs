//! Command-line entry points. Five subcommands drive the phases; shared
//! flags are --config, --seed, and --out-dir. When --out-dir is absent the
//! REDRAW_RUN_DIR environment variable supplies the output root, then
//! ./redraw_run as a last resort.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapt::AdaptationMode;
use crate::envs::Variant;
use crate::error::{Error, Result};

use super::config::{DatasetPolicy, RunConfig};
use super::formats::export_metrics;
use super::phases;

#[derive(Parser)]
#[command(name = "redraw", about = "World-model pretraining and offline dynamics adaptation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration file ([section] headers, key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; falls back to $REDRAW_RUN_DIR, then ./redraw_run.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Online pretraining in the source environment (resumes if the output
    /// directory already holds a checkpoint).
    Pretrain {
        #[command(flatten)]
        common: Common,
    },

    /// Gather a dataset with a scripted expert, uniform-random actions, or a
    /// checkpoint policy.
    Collect {
        #[command(flatten)]
        common: Common,

        /// expert | random | checkpoint
        #[arg(long)]
        policy: Option<String>,

        /// Exact number of transitions to record.
        #[arg(long)]
        steps: Option<usize>,

        /// source | target
        #[arg(long)]
        variant: Option<String>,

        /// Store reward labels (pretraining-buffer schema).
        #[arg(long)]
        with_rewards: bool,

        /// Checkpoint for --policy checkpoint.
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,

        /// Dataset file to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Offline adaptation of a pretrained checkpoint to a shifted variant.
    Adapt {
        #[command(flatten)]
        common: Common,

        /// zeroshot | residual | residual_in_sigma | residual_in_prior |
        /// finetune_dyn | finetune_all | new_dyn_a | new_dyn_b | new_dyn_c
        #[arg(long)]
        mode: Option<String>,

        /// Dataset collected in the target variant.
        #[arg(long)]
        dataset: Option<PathBuf>,

        /// Pretrained source checkpoint.
        #[arg(long)]
        source_checkpoint: Option<PathBuf>,
    },

    /// Mode-action evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,

        #[arg(long)]
        checkpoint: PathBuf,

        /// source | target
        #[arg(long)]
        variant: String,

        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },

    /// Split a run's metrics into one file per (phase, metric) series.
    ExportMetrics {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn resolve_out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    if let Some(dir) = &common.out_dir {
        return dir.clone();
    }
    if let Some(dir) = &cfg.out_dir {
        return PathBuf::from(dir);
    }
    if let Ok(dir) = std::env::var("REDRAW_RUN_DIR") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    PathBuf::from("redraw_run")
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Pretrain { common } => {
            let cfg = load_config(&common)?;
            let out_dir = resolve_out_dir(&common, &cfg);
            let outcome = phases::pretrain(&cfg, &out_dir)?;
            println!(
                "pretrain done: {} env steps, {} update rounds, final return {:.3}",
                outcome.env_steps, outcome.rounds, outcome.final_return
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Cmd::Collect { common, policy, steps, variant, with_rewards, source_checkpoint, out } => {
            let cfg = load_config(&common)?;
            let out_dir = resolve_out_dir(&common, &cfg);
            let policy = match policy {
                Some(p) => DatasetPolicy::parse(&p)?,
                None => cfg.dataset_policy,
            };
            let steps = steps.unwrap_or(cfg.collect_steps);
            let variant = match variant {
                Some(v) => Variant::parse(&v)?,
                None => cfg.variant,
            };
            let with_rewards = with_rewards || cfg.with_rewards;
            let out_path = out
                .or_else(|| cfg.collect_out.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| out_dir.join("dataset.ds"));
            let ck = source_checkpoint
                .or_else(|| cfg.source_checkpoint.as_ref().map(PathBuf::from));
            let outcome = phases::collect(
                &cfg,
                variant,
                policy,
                steps,
                ck.as_deref(),
                &out_path,
                with_rewards,
            )?;
            println!(
                "collect done: {} transitions in {} episodes ({} {} {})",
                outcome.steps,
                outcome.episodes,
                policy.name(),
                cfg.env.name(),
                variant.name()
            );
            println!("dataset: {}", outcome.path.display());
        }
        Cmd::Adapt { common, mode, dataset, source_checkpoint } => {
            let cfg = load_config(&common)?;
            let out_dir = resolve_out_dir(&common, &cfg);
            let mode = match mode {
                Some(m) => AdaptationMode::parse(&m)?,
                None => cfg.mode,
            };
            let dataset = dataset
                .or_else(|| cfg.dataset.as_ref().map(PathBuf::from))
                .ok_or_else(|| Error::Config("adapt needs --dataset".into()))?;
            let source = source_checkpoint
                .or_else(|| cfg.source_checkpoint.as_ref().map(PathBuf::from))
                .ok_or_else(|| Error::Config("adapt needs --source-checkpoint".into()))?;
            let outcome = phases::adapt(&cfg, &out_dir, mode, &source, &dataset)?;
            let last = outcome.evals.last().copied().unwrap_or((0, f64::NAN));
            println!(
                "adapt done: mode {}, {} updates, return {:.3} at update {}",
                mode.name(),
                outcome.updates,
                last.1,
                last.0
            );
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Cmd::Eval { common, checkpoint, variant, episodes } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let variant = Variant::parse(&variant)?;
            let summary = phases::evaluate(&checkpoint, variant, episodes, seed)?;
            println!(
                "eval: mean return {:.3} +/- {:.3} (stderr) over {} episodes, mean length {:.1}",
                summary.mean,
                summary.stderr,
                summary.returns.len(),
                summary.mean_length()
            );
        }
        Cmd::ExportMetrics { common } => {
            let cfg = load_config(&common)?;
            let out_dir = resolve_out_dir(&common, &cfg);
            let files = export_metrics(&out_dir)?;
            println!("exported {} series:", files.len());
            for f in &files {
                println!("  {}", f.display());
            }
        }
    }
    Ok(())
}

/// Binary entry point; parses args, runs the phase, maps errors to exit 1.
pub fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

/// Test hook: run the CLI against an explicit argument vector.
pub fn run_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)
        .map_err(|e| Error::Config(format!("argument error: {e}")))?;
    run(cli)
}

/// Resolution rule for the default output root, exposed for tests.
pub fn default_out_dir(explicit: Option<&Path>) -> PathBuf {
    let common = Common { config: None, seed: None, out_dir: explicit.map(Path::to_path_buf) };
    resolve_out_dir(&common, &RunConfig::default())
}
