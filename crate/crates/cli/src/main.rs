use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flowkin::kinematics::Split;
use flowkin::sampler::Method;
use flowkin::train::Variant;
use flowkin_cli::commands::{self, EvaluateOptions, InterpolateOptions, SampleOptions, SimulateOptions};
use flowkin_cli::{Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "flowkin", version, about = "Action-conditioned point-cloud flows for articulated objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        overrides.extend(extra);
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct ActionArgs {
    /// Joint angles in radians, comma separated. Repeatable.
    #[arg(long = "action", allow_hyphen_values = true)]
    actions: Vec<String>,
    /// File with one action per line.
    #[arg(long)]
    actions_file: Option<PathBuf>,
    /// Sweep one joint: `JOINT:LO:HI:COUNT`.
    #[arg(long, allow_hyphen_values = true)]
    sweep: Option<String>,
    /// Allow actions outside the joint limits.
    #[arg(long)]
    extrapolate: bool,
}

impl ActionArgs {
    fn resolve(&self, j_max: usize) -> Result<Vec<Vec<f64>>> {
        let mut actions = self
            .actions
            .iter()
            .map(|a| commands::parse_action(a))
            .collect::<Result<Vec<_>>>()?;
        if let Some(path) = &self.actions_file {
            actions.extend(commands::read_actions_file(path)?);
        }
        if let Some(spec) = &self.sweep {
            let parts: Vec<&str> = spec.split(':').collect();
            anyhow::ensure!(parts.len() == 4, "--sweep expects JOINT:LO:HI:COUNT");
            actions.extend(commands::sweep_actions(
                parts[0].parse()?,
                parts[1].parse()?,
                parts[2].parse()?,
                parts[3].parse()?,
                j_max,
            )?);
        }
        if actions.is_empty() {
            actions.push(vec![0.0; j_max]);
        }
        Ok(actions)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset directory.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides paths.dataset).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the train split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Integrator recorded in the checkpoint for later sampling.
        #[arg(long)]
        integrator: Option<Method>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate clouds from noise under given actions.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        actions: ActionArgs,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed of the point noise; defaults to --seed.
        #[arg(long)]
        point_seed: Option<u64>,
        /// Reuse one shape code per sample across all actions.
        #[arg(long)]
        shared_latent: bool,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        integrator: Option<Method>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-pose an observed dataset sample and score it against ground truth.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sample id of the observed cloud.
        #[arg(long)]
        reference: usize,
        #[command(flatten)]
        actions: ActionArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        integrator: Option<Method>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a slerp path between two sampled shape codes.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed_a: u64,
        #[arg(long)]
        seed_b: u64,
        /// Point-noise seed shared by all frames; defaults to --seed-a.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of frames, endpoints included.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, allow_hyphen_values = true)]
        action: Option<String>,
        #[arg(long)]
        extrapolate: bool,
        #[arg(long)]
        integrator: Option<Method>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulator-mode CD/EMD over a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        integrator: Option<Method>,
        /// Directory for per-sample records and the summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn action_dim(checkpoint: &std::path::Path) -> Result<usize> {
    Ok(Checkpoint::load(checkpoint)?.header.model.action_dim)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let mut extra = Vec::new();
            if let Some(out) = out {
                extra.push(format!("paths.dataset={}", toml::Value::String(out.display().to_string())));
            }
            let summary = commands::generate_data(&config.load(extra)?)?;
            println!(
                "{} samples: {} train, {} test, J_max {}",
                summary.samples, summary.train, summary.test, summary.j_max
            );
        }
        Command::Train {
            config,
            steps,
            variant,
            integrator,
            resume,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = steps {
                extra.push(format!("train.steps={s}"));
            }
            if let Some(v) = variant {
                extra.push(format!("train.variant=\"{v}\""));
            }
            if let Some(m) = integrator {
                extra.push(format!("integrator.method=\"{m}\""));
            }
            let summary = commands::train(&config.load(extra)?, resume.as_deref())?;
            let loss = summary.last.map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained to step {}; final loss {loss:.6}; wrote {}",
                summary.steps,
                summary.final_checkpoint.display()
            );
        }
        Command::Sample {
            checkpoint,
            actions,
            count,
            seed,
            point_seed,
            shared_latent,
            points,
            integrator,
            out,
        } => {
            let resolved = actions.resolve(action_dim(&checkpoint)?)?;
            let files = commands::sample(&SampleOptions {
                checkpoint,
                actions: resolved,
                count,
                seed,
                point_seed,
                shared_latent,
                points,
                extrapolate: actions.extrapolate,
                integrator,
                out,
            })?;
            println!("wrote {} files", files.len());
        }
        Command::Simulate {
            checkpoint,
            dataset,
            reference,
            actions,
            seed,
            integrator,
            out,
        } => {
            let resolved = actions.resolve(action_dim(&checkpoint)?)?;
            let records = commands::simulate(&SimulateOptions {
                checkpoint,
                dataset,
                reference,
                actions: resolved,
                seed,
                extrapolate: actions.extrapolate,
                integrator,
                out,
            })?;
            println!("action                 CD x1e3    EMD x1e3");
            for r in records {
                println!("{:<20} {:>9.4}  {:>9.4}", format!("{:?}", r.action), r.cd_x1e3, r.emd_x1e3);
            }
        }
        Command::Interpolate {
            checkpoint,
            seed_a,
            seed_b,
            seed,
            steps,
            action,
            extrapolate,
            integrator,
            out,
        } => {
            let action = match action {
                Some(a) => commands::parse_action(&a)?,
                None => vec![0.0; action_dim(&checkpoint)?],
            };
            let files = commands::interpolate(&InterpolateOptions {
                checkpoint,
                seed_a,
                seed_b,
                point_seed: seed,
                steps,
                action,
                extrapolate,
                integrator,
                out,
            })?;
            println!("wrote {} frames", files.len());
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            split,
            seed,
            limit,
            integrator,
            out,
        } => {
            let report = commands::evaluate(&EvaluateOptions {
                checkpoint,
                dataset,
                split,
                seed,
                limit,
                integrator,
                out,
            })?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()).context("flowkin failed") {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
