//! Training loop, K-step evaluation, reports, configuration and run files.

pub mod config;
pub mod eval;
pub mod io;
pub mod report;
pub mod rollout;
pub mod trainer;

use std::path::Path;

pub use config::{Ablation, RunConfig};
pub use eval::{evaluate_k_step, EvalReport, EvalSettings, PolicySampler, ResponseSampler};
pub use report::{curriculum_report, diversity_report, CurriculumReport, DiversityReport};
pub use trainer::{Checkpoint, MetricRecord, RolloutRecord, StepOutput, Trainer};

use crate::error::{Error, Result};
use io::{run_path, RunWriter, CHECKPOINT_FILE, CONFIG_FILE};

/// Trains to `config.harness.iterations`, writing every artifact into `out`.
///
/// With a checkpoint the run resumes from it; earlier rows already in `out`
/// are kept and later ones replaced. `config` may then differ from the
/// checkpoint's only in run length, output directory and checkpoint cadence.
pub fn run_training(config: RunConfig, out: &Path, resume: Option<Checkpoint>) -> Result<Trainer> {
    let (mut trainer, resume_at) = match resume {
        Some(mut ck) => {
            let mut expected = ck.config.clone();
            expected.harness.iterations = config.harness.iterations;
            expected.harness.output_dir = config.harness.output_dir.clone();
            expected.harness.checkpoint_every = config.harness.checkpoint_every;
            if expected != config {
                return Err(Error::Config(
                    "resume config differs from the checkpoint's beyond harness.iterations, \
                     harness.output_dir and harness.checkpoint_every"
                        .into(),
                ));
            }
            ck.config = config;
            let at = ck.iteration;
            (Trainer::from_checkpoint(ck)?, Some(at))
        }
        None => (Trainer::new(config)?, None),
    };
    let cfg = trainer.config().clone();
    let mut writer = RunWriter::open(out, cfg.harness.log_rollouts, resume_at)?;
    std::fs::write(run_path(out, CONFIG_FILE), cfg.to_toml_string()?)?;
    while trainer.iteration() < cfg.harness.iterations {
        let step = trainer.step()?;
        writer.write(&step)?;
        let every = cfg.harness.checkpoint_every;
        if every > 0 && trainer.iteration() % every == 0 {
            writer.flush()?;
            trainer.checkpoint().save(&run_path(out, CHECKPOINT_FILE))?;
        }
    }
    writer.flush()?;
    trainer.checkpoint().save(&run_path(out, CHECKPOINT_FILE))?;
    Ok(trainer)
}

/// Evaluation settings taken from a run config.
pub fn eval_settings(config: &RunConfig, k: usize, samples: usize) -> EvalSettings {
    EvalSettings {
        k,
        samples,
        seed: config.harness.eval_seed,
        feedback: config.env.feedback,
        success_threshold: config.env.success_threshold,
    }
}
