//! The ExIt training loop and its checkpoint.

use std::collections::BTreeSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::rollout::{run_rollout, RolloutSettings};
use crate::curriculum::{
    expand, sample_training_instance, select_expansion_rollout, update_after_rollout, IdAllocator, LineageRegistry,
    TaskBuffer, TaskInstance,
};
use crate::diversity::{diversity_scores, embed_history, scale_advantages};
use crate::error::{Error, Result};
use crate::grpo::{
    mask_invalid, masked_advantages, surrogate_loss_and_grad, update_reference, AdvantageVector, RolloutGroup,
};
use crate::policy::{apply_update, LinearSoftmaxPolicy, OptimizerState, ParamRole, ParamVector, Policy};
use crate::sidp::{BaseTask, Mode, Token};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One row of the metric CSV. Optional columns are empty when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: u64,
    pub objective: f64,
    pub mean_reward: f64,
    pub buffer_size: usize,
    pub mean_score: Option<f64>,
    pub min_score: Option<f64>,
    pub max_score: Option<f64>,
    /// Means over this iteration's replayed instances.
    pub sampled_depth: Option<f64>,
    pub sampled_start_turn: Option<f64>,
    pub sampled_recency: Option<f64>,
    pub mode_base: usize,
    pub mode_improve: usize,
    pub mode_diverge: usize,
    /// Cumulative count of distinct starting points trained on.
    pub distinct_instances: usize,
    pub clip_fraction: f64,
    pub kl_mean: f64,
}

/// Optimizer-side scalars that do not fit the metric CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoRecord {
    pub iteration: u64,
    pub mean_abs_advantage: f64,
    pub degenerate_groups: usize,
    pub grad_norm: f64,
    pub tokens: usize,
}

/// One line of the rollout log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub iteration: u64,
    pub instance_id: u64,
    pub task_id: u64,
    pub lineage: Option<u64>,
    pub mode: Mode,
    pub depth: u32,
    pub start_turn: usize,
    pub start_hash: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_embedding: Option<Vec<f64>>,
    /// Responses in generation order.
    pub tokens: Vec<Vec<Token>>,
    /// Normalized episode quality.
    pub reward: f64,
    /// Mode-shaped training reward.
    pub shaped_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepOutput {
    pub metrics: MetricRecord,
    pub grpo: GrpoRecord,
    pub rollouts: Vec<RolloutRecord>,
}

/// Everything needed to resume a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub descriptor: String,
    pub config: RunConfig,
    pub iteration: u64,
    pub theta: ParamVector,
    pub theta_ref: ParamVector,
    pub optimizer: OptimizerState,
    pub buffer: Option<TaskBuffer>,
    pub ids: IdAllocator,
    pub lineage: LineageRegistry,
    pub distinct: BTreeSet<u64>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub struct Trainer {
    config: RunConfig,
    policy: LinearSoftmaxPolicy,
    settings: RolloutSettings,
    tasks: Vec<BaseTask>,
    iteration: u64,
    theta: ParamVector,
    theta_ref: ParamVector,
    optimizer: OptimizerState,
    buffer: Option<TaskBuffer>,
    ids: IdAllocator,
    lineage: LineageRegistry,
    distinct: BTreeSet<u64>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let policy = config.policy()?;
        let dim = policy.dim();
        let buffer = match config.buffer_update() {
            Some(_) => Some(TaskBuffer::new(config.buffer_config())?),
            None => None,
        };
        Ok(Self {
            settings: RolloutSettings {
                feedback: config.env.feedback,
                shaping: config.env.reward_shaping,
                range: config.env.quality_range()?,
            },
            tasks: config.env.train_tasks()?,
            iteration: 0,
            theta: ParamVector::zeros(dim, ParamRole::Current),
            theta_ref: ParamVector::zeros(dim, ParamRole::Reference),
            optimizer: OptimizerState::new(config.grpo.optimizer, dim),
            buffer,
            ids: IdAllocator::default(),
            lineage: LineageRegistry::default(),
            distinct: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(config.harness.seed),
            policy,
            config,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config)?;
        if ck.descriptor != t.policy.descriptor() || ck.theta.dim() != t.policy.dim() {
            return Err(Error::Config(format!(
                "checkpoint policy {} (dim {}) does not match {} (dim {})",
                ck.descriptor,
                ck.theta.dim(),
                t.policy.descriptor(),
                t.policy.dim()
            )));
        }
        t.iteration = ck.iteration;
        t.theta = ck.theta;
        t.theta_ref = ck.theta_ref;
        t.optimizer = ck.optimizer;
        t.buffer = ck.buffer;
        t.ids = ck.ids;
        t.lineage = ck.lineage;
        t.distinct = ck.distinct;
        t.rng = ck.rng;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            descriptor: self.policy.descriptor(),
            config: self.config.clone(),
            iteration: self.iteration,
            theta: self.theta.clone(),
            theta_ref: self.theta_ref.clone(),
            optimizer: self.optimizer.clone(),
            buffer: self.buffer.clone(),
            ids: self.ids.clone(),
            lineage: self.lineage.clone(),
            distinct: self.distinct.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn policy(&self) -> &LinearSoftmaxPolicy {
        &self.policy
    }

    pub fn params(&self) -> &ParamVector {
        &self.theta
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn buffer(&self) -> Option<&TaskBuffer> {
        self.buffer.as_ref()
    }

    pub fn lineage(&self) -> &LineageRegistry {
        &self.lineage
    }

    pub fn base_tasks(&self) -> &[BaseTask] {
        &self.tasks
    }

    fn sample_instance(&mut self) -> Result<(TaskInstance, bool)> {
        match &self.buffer {
            Some(buffer) => {
                let s = sample_training_instance(buffer, &self.tasks, &mut self.rng, self.iteration)?;
                Ok((s.instance, s.replayed))
            }
            None => {
                let task = &self.tasks[self.rng.random_range(0..self.tasks.len())];
                Ok((TaskInstance::base(task, self.iteration), false))
            }
        }
    }

    /// Runs one iteration: sample, roll out, update the policy, update the buffer.
    pub fn step(&mut self) -> Result<StepOutput> {
        let it = self.iteration;
        self.step_inner().map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("iteration {it}: {m}")),
            other => other,
        })
    }

    fn step_inner(&mut self) -> Result<StepOutput> {
        let it = self.iteration;
        let cfg = self.config.clone();
        let theta_old = self.theta.with_role(ParamRole::Old);
        let mut instances = Vec::with_capacity(cfg.grpo.prompts_per_batch);
        let mut groups = Vec::with_capacity(cfg.grpo.prompts_per_batch);
        let mut replayed = Vec::new();
        let mut mode_counts = [0usize; 3];
        for _ in 0..cfg.grpo.prompts_per_batch {
            let (instance, was_replay) = self.sample_instance()?;
            self.lineage.record(&instance);
            self.distinct.insert(instance.start_hash());
            mode_counts[instance.mode.index()] += 1;
            if was_replay {
                replayed.push(instance.clone());
            }
            let mut rollouts = Vec::with_capacity(cfg.grpo.group_size);
            for _ in 0..cfg.grpo.group_size {
                let mut rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
                rollouts.push(run_rollout(
                    &self.policy,
                    &theta_old,
                    &instance,
                    &self.settings,
                    &mut rng,
                )?);
            }
            groups.push(RolloutGroup {
                instance_id: instance.id,
                rollouts,
                old_params_id: it,
            });
            instances.push(instance);
        }

        let mut masks = Vec::with_capacity(groups.len());
        let mut advantages: Vec<AdvantageVector> = Vec::with_capacity(groups.len());
        for group in &groups {
            let mask = mask_invalid(group, cfg.grpo.invalid_in_baseline);
            let mut adv = masked_advantages(group, &mask)?;
            if cfg.diversity_bonus() {
                let embeddings: Vec<Vec<f64>> = group
                    .rollouts
                    .iter()
                    .map(|r| r.embedding.clone().expect("rollouts carry embeddings"))
                    .collect();
                adv = scale_advantages(&adv, &diversity_scores(&embeddings)?)?;
            }
            masks.push(mask);
            advantages.push(adv);
        }

        let surrogate = cfg.surrogate();
        let n_groups = groups.len() as f64;
        let (mut objective, mut clip_fraction, mut kl_mean, mut grad_norm, mut tokens) = (0.0, 0.0, 0.0, 0.0, 0);
        for epoch in 0..cfg.grpo.epochs_per_batch {
            let mut gradient = vec![0.0; self.policy.dim()];
            let (mut obj, mut clipped, mut kl, mut toks) = (0.0, 0.0, 0.0, 0usize);
            for ((group, mask), adv) in groups.iter().zip(&masks).zip(&advantages) {
                let out =
                    surrogate_loss_and_grad(&self.policy, group, mask, adv, &self.theta, &self.theta_ref, &surrogate)?;
                obj += out.objective;
                clipped += out.clip_fraction * out.tokens as f64;
                kl += out.kl_mean * out.tokens as f64;
                toks += out.tokens;
                for (g, x) in gradient.iter_mut().zip(&out.gradient) {
                    *g += x / n_groups;
                }
            }
            if epoch == 0 {
                objective = obj / n_groups;
                if toks > 0 {
                    clip_fraction = clipped / toks as f64;
                    kl_mean = kl / toks as f64;
                }
                grad_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
                tokens = toks;
            }
            let (theta, opt) = apply_update(&self.theta, &gradient, &self.optimizer, cfg.grpo.learning_rate)?;
            self.theta = theta;
            self.optimizer = opt;
        }
        self.theta_ref = update_reference(
            &self.theta_ref,
            &self.theta,
            cfg.grpo.reference_alpha,
            it + 1,
            cfg.grpo.reference_interval,
        );

        if let (Some(buffer), Some(kind)) = (self.buffer.as_mut(), cfg.buffer_update()) {
            for (instance, group) in instances.iter().zip(&groups) {
                let rewards = group.rewards();
                let pick = select_expansion_rollout(&rewards, cfg.exit.expansion_rule, &mut self.rng);
                let chosen = &group.rollouts[pick];
                let successor = expand(instance, chosen.history.clone(), chosen.quality, &mut self.ids, it)?;
                update_after_rollout(buffer, instance, Some(&successor), &rewards, kind, &mut self.ids, it)?;
            }
        }

        let mut records = Vec::new();
        let env = &self.tasks[0].params;
        for (instance, group) in instances.iter().zip(&groups) {
            let start_embedding = match (instance.is_base(), cfg.harness.log_embeddings) {
                (false, true) => Some(embed_history(&instance.history, env)?),
                _ => None,
            };
            let start_hash = instance.start_hash();
            for r in &group.rollouts {
                records.push(RolloutRecord {
                    iteration: it,
                    instance_id: instance.id,
                    task_id: instance.base.task_id,
                    lineage: instance.lineage,
                    mode: instance.mode,
                    depth: instance.depth,
                    start_turn: instance.start_turn(),
                    start_hash,
                    start_embedding: start_embedding.clone(),
                    tokens: r.segments.iter().map(|s| s.response.tokens.clone()).collect(),
                    reward: r.quality,
                    shaped_reward: r.reward,
                    embedding: if cfg.harness.log_embeddings {
                        r.embedding.clone()
                    } else {
                        None
                    },
                    valid: r.valid,
                });
            }
        }

        let all_rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
        let mean = |xs: &mut dyn Iterator<Item = f64>| -> Option<f64> {
            let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
            (n > 0).then(|| s / n as f64)
        };
        let stats = self.buffer.as_ref().and_then(TaskBuffer::score_stats);
        let mut abs_adv = advantages.iter().flat_map(|a| a.values.iter().map(|v| v.abs()));
        let metrics = MetricRecord {
            iteration: it,
            objective,
            mean_reward: mean(&mut all_rewards.iter().copied()).unwrap_or(0.0),
            buffer_size: self.buffer.as_ref().map_or(0, TaskBuffer::len),
            mean_score: stats.map(|s| s.0),
            min_score: stats.map(|s| s.1),
            max_score: stats.map(|s| s.2),
            sampled_depth: mean(&mut replayed.iter().map(|i| i.depth as f64)),
            sampled_start_turn: mean(&mut replayed.iter().map(|i| i.start_turn() as f64)),
            sampled_recency: mean(&mut replayed.iter().map(|i| (it - i.created_at) as f64)),
            mode_base: mode_counts[0],
            mode_improve: mode_counts[1],
            mode_diverge: mode_counts[2],
            distinct_instances: self.distinct.len(),
            clip_fraction,
            kl_mean,
        };
        let grpo = GrpoRecord {
            iteration: it,
            mean_abs_advantage: mean(&mut abs_adv).unwrap_or(0.0),
            degenerate_groups: advantages.iter().filter(|a| a.degenerate).count(),
            grad_norm,
            tokens,
        };
        self.iteration += 1;
        Ok(StepOutput {
            metrics,
            grpo,
            rollouts: records,
        })
    }
}
