//! `exit-rl`: train, evaluate and report on ExIt runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use exit_core::harness::io::{read_metrics, read_rollouts, run_path, CONFIG_FILE, METRICS_FILE, ROLLOUTS_FILE};
use exit_core::harness::{
    curriculum_report, diversity_report, eval_settings, evaluate_k_step, run_training, Checkpoint, PolicySampler,
    RunConfig,
};
use exit_core::sidp::BaseTask;
use exit_core::Result;

#[derive(Parser)]
#[command(
    name = "exit-rl",
    version,
    about = "Exploratory Iteration training on synthetic self-improvement tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, rollouts and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `harness.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `harness.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// K-step self-improvement evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: usize,
        /// JSON array of base tasks; defaults to the held-out set from the config.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Samples per task; defaults to `harness.eval_samples`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<ReportKind>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Curriculum,
    Diversity,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.harness.seed = s;
            }
            if let Some(dir) = out {
                cfg.harness.output_dir = dir;
            }
            let out = cfg.harness.output_dir.clone();
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let trainer = run_training(cfg, &out, resume)?;
            eprintln!("trained {} iterations into {}", trainer.iteration(), out.display());
        }
        Command::Eval {
            checkpoint,
            k,
            tasks,
            n,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = &ck.config;
            let tasks: Vec<BaseTask> = match tasks {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => cfg.env.eval_tasks(cfg.harness.eval_tasks)?,
            };
            let policy = cfg.policy()?;
            let sampler = PolicySampler {
                policy: &policy,
                params: &ck.theta,
            };
            let settings = eval_settings(cfg, k, n.unwrap_or(cfg.harness.eval_samples));
            let report = evaluate_k_step(&sampler, &tasks, &settings)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { run, kind } => {
            let mut out = serde_json::Map::new();
            if matches!(kind, None | Some(ReportKind::Curriculum)) {
                let metrics = read_metrics(&run_path(&run, METRICS_FILE))?;
                out.insert("curriculum".into(), serde_json::to_value(curriculum_report(&metrics))?);
            }
            if matches!(kind, None | Some(ReportKind::Diversity)) {
                let cfg = RunConfig::load(&run_path(&run, CONFIG_FILE))?;
                let path = run_path(&run, ROLLOUTS_FILE);
                let rollouts = if path.exists() {
                    read_rollouts(&path)?
                } else {
                    Vec::new()
                };
                out.insert(
                    "diversity".into(),
                    serde_json::to_value(diversity_report(&rollouts, cfg.env.train_tasks))?,
                );
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
