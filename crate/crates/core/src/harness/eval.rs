//! K-step self-improvement evaluation with net-correction accounting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::{LinearSoftmaxPolicy, ParamVector, Policy};
use crate::prf::prf;
use crate::sidp::{episode_done, grade, reset, BaseTask, FeedbackMode, History, Iterate, Mode, Observation, Token};

/// Anything that can answer an observation.
pub trait ResponseSampler {
    fn respond(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Vec<Token>>;
}

/// A linear-softmax policy at fixed parameters, sampled at temperature 1.
pub struct PolicySampler<'a> {
    pub policy: &'a LinearSoftmaxPolicy,
    pub params: &'a ParamVector,
}

impl ResponseSampler for PolicySampler<'_> {
    fn respond(&self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Vec<Token>> {
        Ok(self.policy.sample_response(self.params, obs, rng)?.tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    /// Independent samples per task (avg@n).
    pub samples: usize,
    pub seed: u64,
    pub feedback: FeedbackMode,
    /// Per-turn quality at or above this counts as a success.
    pub success_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub tasks: usize,
    pub samples: usize,
    /// Number of (task, sample, turn) records.
    pub records: usize,
    /// Success rate after each step, index 0 being the initial response.
    pub accuracy: Vec<f64>,
    pub mean_quality: Vec<f64>,
    pub corrections: u64,
    pub regressions: u64,
    pub net_corrections: i64,
    /// `accuracy[K] - accuracy[0]`.
    pub delta_k: f64,
    pub generations: u64,
}

/// For every task and sample, each turn gets an initial response followed by
/// `k` Improve steps, each revising the latest iterate.
pub fn evaluate_k_step<S: ResponseSampler + ?Sized>(
    sampler: &S,
    tasks: &[BaseTask],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let k = settings.k;
    let mut successes = vec![0u64; k + 1];
    let mut quality_sum = vec![0.0; k + 1];
    let (mut records, mut corrections, mut regressions, mut generations) = (0usize, 0u64, 0u64, 0u64);
    for task in tasks {
        for s in 0..settings.samples {
            let mut rng = ChaCha8Rng::seed_from_u64(prf(&[settings.seed, task.task_id, task.seed, s as u64]));
            let mut history = History::new();
            while !episode_done(task, &history) {
                let mut prev_ok = None;
                for step in 0..=k {
                    let mode = if step == 0 { Mode::Base } else { Mode::Improve };
                    let obs = reset(task, &history, mode)?;
                    let tokens = sampler.respond(&obs, &mut rng)?;
                    generations += 1;
                    let g = grade(task, obs.turn, &tokens, settings.feedback);
                    let iterate = Iterate {
                        tokens,
                        feedback: g.feedback,
                        quality: g.quality,
                        depth: step as u32,
                        valid: g.valid,
                    };
                    if step == 0 {
                        history.turns.push(vec![iterate]);
                    } else {
                        history.turns.last_mut().expect("turn opened at step 0").push(iterate);
                    }
                    let ok = g.quality >= settings.success_threshold;
                    successes[step] += ok as u64;
                    quality_sum[step] += g.quality;
                    match (prev_ok, ok) {
                        (Some(false), true) => corrections += 1,
                        (Some(true), false) => regressions += 1,
                        _ => {}
                    }
                    prev_ok = Some(ok);
                }
                records += 1;
            }
        }
    }
    let denom = records.max(1) as f64;
    let accuracy: Vec<f64> = successes.iter().map(|&c| c as f64 / denom).collect();
    Ok(EvalReport {
        k,
        tasks: tasks.len(),
        samples: settings.samples,
        records,
        delta_k: accuracy[k] - accuracy[0],
        accuracy,
        mean_quality: quality_sum.iter().map(|q| q / denom).collect(),
        corrections,
        regressions,
        net_corrections: corrections as i64 - regressions as i64,
        generations,
    })
}
