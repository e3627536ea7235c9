use std::path::PathBuf;
use std::process::ExitCode;

use augbpm::experiment::{
    cmd_evaluate, cmd_run_experiment, cmd_sample_bpm, cmd_synth_ive, cmd_train, BpmWhich, ExperimentConfig, Preset,
};
use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;

// Training allocates large short-lived buffers every step; the system
// allocator maps and unmaps them each time.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

/// Augmented building performance models: sample, synthesize, train, evaluate.
#[derive(Debug, Parser)]
#[command(name = "augbpm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: experiment1 or experiment2.
    #[arg(long)]
    preset: Option<Preset>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Use the scaled-down GAN schedule (m = 256, n = 5000, alpha = 1e-3).
    #[arg(long)]
    desk_scale: bool,
}

impl Common {
    fn resolve(&self) -> augbpm::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(p)) => ExperimentConfig::preset(p),
            (None, None) => {
                return Err(augbpm::Error::Usage("pass either --config <path> or --preset <name>".into()));
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.desk_scale {
            cfg = cfg.with_desk_scale();
        }
        cfg.validate()?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the existing-BPM and target datasets.
    SampleBpm {
        #[command(flatten)]
        common: Common,
        /// existing, target or both.
        #[arg(long, default_value = "both")]
        which: BpmWhich,
        /// Rows per dataset; defaults to the config's sampling counts.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Fit the switch-state HMM to the IVE corpus and sample synthetic records.
    SynthIve {
        #[command(flatten)]
        common: Common,
    },
    /// Train the GAN on the sampled and synthetic datasets.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained checkpoint against the target.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the one in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every stage in order.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> augbpm::Result<()> {
    match cli.command {
        Command::SampleBpm { common, which, count } => {
            let (cfg, out) = common.resolve()?;
            cmd_sample_bpm(&cfg, &out, which, count)
        }
        Command::SynthIve { common } => {
            let (cfg, out) = common.resolve()?;
            cmd_synth_ive(&cfg, &out).map(|_| ())
        }
        Command::Train { common } => {
            let (cfg, out) = common.resolve()?;
            cmd_train(&cfg, &out).map(|_| ())
        }
        Command::Evaluate { common, checkpoint } => {
            let (cfg, out) = common.resolve()?;
            cmd_evaluate(&cfg, &out, checkpoint.as_deref()).map(|_| ())
        }
        Command::Run { common } => {
            let (cfg, out) = common.resolve()?;
            cmd_run_experiment(&cfg, &out).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("[error] {e}");
            ExitCode::FAILURE
        }
    }
}
