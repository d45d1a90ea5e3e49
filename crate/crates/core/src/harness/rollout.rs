//! Rolling an instance out to the end of its episode.

use rand::Rng;

use crate::curriculum::TaskInstance;
use crate::diversity::embed_history;
use crate::error::Result;
use crate::grpo::{Rollout, Segment};
use crate::policy::{ParamVector, Policy};
use crate::sidp::{
    episode_done, grade, normalize_quality, reset, shaped_iteration_reward, total_quality, FeedbackMode, Iterate, Mode,
    QualityRange, RewardShaping,
};

/// Environment settings shared by every rollout of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutSettings {
    pub feedback: FeedbackMode,
    pub shaping: RewardShaping,
    pub range: QualityRange,
}

/// Generates one group member for `instance`.
///
/// Iteration instances first take one step in their mode on the last turn's
/// final iterate; the episode then continues with fresh responses on later
/// turns until it ends. The reward is the normalized total quality, shaped
/// against the instance's reference quality for Improve steps.
pub fn run_rollout<P: Policy, R: Rng + ?Sized>(
    policy: &P,
    params: &ParamVector,
    instance: &TaskInstance,
    settings: &RolloutSettings,
    rng: &mut R,
) -> Result<Rollout> {
    let task = &instance.base;
    let mut history = instance.history.clone();
    let mut segments = Vec::new();
    let mut valid = true;
    if instance.mode != Mode::Base {
        let obs = reset(task, &history, instance.mode)?;
        let mut response = policy.sample_response(params, &obs, rng)?;
        let g = grade(task, obs.turn, &response.tokens, settings.feedback);
        response.valid = g.valid;
        valid &= g.valid;
        let turn = history.turns.last_mut().expect("reset checked a non-empty history");
        let depth = turn.last().expect("validated non-empty turn").depth + 1;
        turn.push(Iterate {
            tokens: response.tokens.clone(),
            feedback: g.feedback,
            quality: g.quality,
            depth,
            valid: g.valid,
        });
        segments.push(Segment { obs, response });
    }
    while !episode_done(task, &history) {
        let obs = reset(task, &history, Mode::Base)?;
        let mut response = policy.sample_response(params, &obs, rng)?;
        let g = grade(task, obs.turn, &response.tokens, settings.feedback);
        response.valid = g.valid;
        valid &= g.valid;
        history.turns.push(vec![Iterate {
            tokens: response.tokens.clone(),
            feedback: g.feedback,
            quality: g.quality,
            depth: 0,
            valid: g.valid,
        }]);
        segments.push(Segment { obs, response });
    }
    let quality = normalize_quality(total_quality(&history), settings.range);
    let reward = match instance.mode {
        Mode::Improve => shaped_iteration_reward(instance.reference_quality, quality, Mode::Improve, settings.shaping)?,
        mode => shaped_iteration_reward(0.0, quality, mode, settings.shaping)?,
    };
    let embedding = Some(embed_history(&history, &task.params)?);
    Ok(Rollout {
        segments,
        quality,
        reward,
        valid,
        embedding,
        history,
    })
}
