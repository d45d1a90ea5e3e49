//! Run configuration, loaded from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{BufferConfig, BufferUpdate, ExpansionRule};
use crate::error::{Error, Result};
use crate::grpo::{Aggregation, SurrogateConfig};
use crate::policy::{LinearSoftmaxPolicy, OptimizerKind};
use crate::sidp::{BaseTask, EnvKind, EnvParams, FeedbackMode, QualityRange, RewardShaping};

/// Held-out evaluation task ids start here, clear of training ids.
pub const EVAL_TASK_ID_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub exit: ExitConfig,
    #[serde(default)]
    pub harness: HarnessConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_corruption: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turns: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_buckets: Option<usize>,
    /// Size of the base task set.
    #[serde(default = "default_train_tasks")]
    pub train_tasks: usize,
    #[serde(default)]
    pub task_seed: u64,
    #[serde(default)]
    pub feedback: FeedbackMode,
    #[serde(default)]
    pub reward_shaping: RewardShaping,
    /// Raw total-quality endpoints; default `[0, T]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_worst: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality_best: Option<f64>,
    /// Per-turn quality counted as a success at evaluation.
    #[serde(default = "one")]
    pub success_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub epochs_per_batch: usize,
    pub reference_interval: u64,
    pub reference_alpha: f64,
    pub prompts_per_batch: usize,
    pub aggregation: Aggregation,
    pub invalid_in_baseline: bool,
    pub skip_degenerate: bool,
    pub optimizer: OptimizerKind,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.001,
            learning_rate: 0.05,
            epochs_per_batch: 1,
            reference_interval: 100,
            reference_alpha: 1.0,
            prompts_per_batch: 4,
            aggregation: Aggregation::PerRollout,
            invalid_in_baseline: false,
            skip_degenerate: false,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Rungs of the ablation ladder, from plain GRPO to full ExIt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// No buffer: every instance is a fresh base task.
    Grpo,
    /// Learnability replay of base tasks only.
    Curriculum,
    /// Replay of self-iteration instances, Improve mode only.
    Improve,
    /// As `Improve`, with divergence steps.
    Diverge,
    /// As `Diverge`, with the diversity advantage bonus.
    #[default]
    Full,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Grpo => "grpo",
            Ablation::Curriculum => "curriculum",
            Ablation::Improve => "improve",
            Ablation::Diverge => "diverge",
            Ablation::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExitConfig {
    pub ablation: Ablation,
    pub capacity: usize,
    pub min_size: usize,
    pub replay_prob: f64,
    pub divergence_prob: f64,
    pub inverse_temperature: f64,
    pub expansion_rule: ExpansionRule,
    /// Logit penalty on repeating the previous iterate's token in Diverge mode.
    pub divergence_prior: f64,
    /// Defaults to on for `full` only; may not be enabled below it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity_bonus: Option<bool>,
}

impl Default for ExitConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::Full,
            capacity: 128,
            min_size: 32,
            replay_prob: 0.5,
            divergence_prob: 0.2,
            inverse_temperature: 1.0,
            expansion_rule: ExpansionRule::Median,
            divergence_prior: 1.0,
            diversity_bonus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub iterations: u64,
    pub seed: u64,
    pub eval_k: usize,
    pub eval_tasks: usize,
    /// Samples per evaluation task (avg@n).
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub log_rollouts: bool,
    pub log_embeddings: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            seed: 0,
            eval_k: 8,
            eval_tasks: 200,
            eval_samples: 8,
            eval_seed: 0x5eed,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_rollouts: true,
            log_embeddings: true,
        }
    }
}

fn default_train_tasks() -> usize {
    64
}

fn one() -> f64 {
    1.0
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
    }
    Ok(())
}

impl EnvConfig {
    /// Environment parameters, rejecting keys that belong to the other kind.
    pub fn params(&self) -> Result<EnvParams> {
        let stray = |present: bool, key: &str| -> Result<()> {
            if present {
                return Err(Error::Config(format!(
                    "env key `{key}` does not apply to {:?}",
                    self.kind
                )));
            }
            Ok(())
        };
        let missing = |key: &str| Error::Config(format!("env key `{key}` is required for {:?}", self.kind));
        let params = match self.kind {
            EnvKind::BitstringRepair => {
                stray(self.turns.is_some(), "turns")?;
                stray(self.vocab.is_some(), "vocab")?;
                stray(self.feature_buckets.is_some(), "feature_buckets")?;
                EnvParams::BitstringRepair {
                    length: self.length.ok_or_else(|| missing("length"))?,
                    hint_corruption: self.hint_corruption.ok_or_else(|| missing("hint_corruption"))?,
                }
            }
            EnvKind::MultiTurnKeySequence => {
                stray(self.length.is_some(), "length")?;
                stray(self.hint_corruption.is_some(), "hint_corruption")?;
                EnvParams::MultiTurnKeySequence {
                    turns: self.turns.ok_or_else(|| missing("turns"))?,
                    vocab: self.vocab.ok_or_else(|| missing("vocab"))?,
                    feature_buckets: self.feature_buckets.unwrap_or(128),
                }
            }
        };
        params.validate()?;
        Ok(params)
    }

    pub fn quality_range(&self) -> Result<QualityRange> {
        let default = self.params()?.quality_range();
        QualityRange::new(
            self.quality_worst.unwrap_or(default.worst),
            self.quality_best.unwrap_or(default.best),
        )
    }

    /// The training base task set, ids `0..train_tasks`.
    pub fn train_tasks(&self) -> Result<Vec<BaseTask>> {
        let params = self.params()?;
        (0..self.train_tasks as u64)
            .map(|id| BaseTask::new(id, self.task_seed, params.clone()))
            .collect()
    }

    /// `count` held-out tasks disjoint from the training set.
    pub fn eval_tasks(&self, count: usize) -> Result<Vec<BaseTask>> {
        let params = self.params()?;
        (0..count as u64)
            .map(|i| BaseTask::new(EVAL_TASK_ID_BASE + i, self.task_seed, params.clone()))
            .collect()
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.params()?;
        self.env.quality_range()?;
        if self.env.train_tasks < 1 {
            return Err(Error::Config("env.train_tasks must be >= 1".into()));
        }
        check_prob("env.success_threshold", self.env.success_threshold)?;
        let g = &self.grpo;
        if g.group_size < 2 {
            return Err(Error::Config(format!(
                "grpo.group_size = {} must be >= 2",
                g.group_size
            )));
        }
        if g.prompts_per_batch < 1 || g.epochs_per_batch < 1 {
            return Err(Error::Config(
                "grpo.prompts_per_batch and grpo.epochs_per_batch must be >= 1".into(),
            ));
        }
        // Written so that NaN fails too.
        let positive = |x: f64| x > 0.0;
        if !positive(g.clip_epsilon) || !(positive(g.kl_beta) || g.kl_beta == 0.0) || !positive(g.learning_rate) {
            return Err(Error::Config(
                "need grpo.clip_epsilon > 0, grpo.kl_beta >= 0, grpo.learning_rate > 0".into(),
            ));
        }
        check_prob("grpo.reference_alpha", g.reference_alpha)?;
        self.buffer_config().validate()?;
        self.policy()?;
        if self.exit.diversity_bonus == Some(true) && self.exit.ablation != Ablation::Full {
            return Err(Error::Config(format!(
                "exit.diversity_bonus requires ablation = full, got {}",
                self.exit.ablation.as_str()
            )));
        }
        if self.harness.eval_samples < 1 {
            return Err(Error::Config("harness.eval_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Divergence probability after the ablation's forcing.
    pub fn effective_divergence_prob(&self) -> f64 {
        match self.exit.ablation {
            Ablation::Diverge | Ablation::Full => self.exit.divergence_prob,
            _ => 0.0,
        }
    }

    pub fn policy(&self) -> Result<LinearSoftmaxPolicy> {
        LinearSoftmaxPolicy::new(&self.env.params()?).with_divergence_prior(self.exit.divergence_prior)
    }

    pub fn diversity_bonus(&self) -> bool {
        self.exit.ablation == Ablation::Full && self.exit.diversity_bonus.unwrap_or(true)
    }

    pub fn buffer_config(&self) -> BufferConfig {
        BufferConfig {
            capacity: self.exit.capacity,
            min_size: self.exit.min_size,
            replay_prob: self.exit.replay_prob,
            divergence_prob: self.effective_divergence_prob(),
            inverse_temperature: self.exit.inverse_temperature,
        }
    }

    /// How the buffer is fed, or `None` when there is no buffer.
    pub fn buffer_update(&self) -> Option<BufferUpdate> {
        match self.exit.ablation {
            Ablation::Grpo => None,
            Ablation::Curriculum => Some(BufferUpdate::BaseOnly),
            _ => Some(BufferUpdate::Children),
        }
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            clip_epsilon: self.grpo.clip_epsilon,
            kl_beta: self.grpo.kl_beta,
            aggregation: self.grpo.aggregation,
            skip_degenerate: self.grpo.skip_degenerate,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[env]
kind = "bitstring_repair"
length = 12
hint_corruption = 0.25
"#;

    #[test]
    fn defaults_fill_missing_blocks() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.grpo.group_size, 8);
        assert_eq!(cfg.grpo.clip_epsilon, 0.2);
        assert_eq!(cfg.grpo.kl_beta, 0.001);
        assert_eq!(cfg.exit.replay_prob, 0.5);
        assert_eq!(cfg.exit.divergence_prob, 0.2);
        assert_eq!(cfg.grpo.reference_interval, 100);
        assert_eq!(cfg.grpo.reference_alpha, 1.0);
        assert_eq!((cfg.exit.capacity, cfg.exit.min_size), (128, 32));
        assert_eq!(cfg.exit.inverse_temperature, 1.0);
        assert!(cfg.diversity_bonus());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[grpo]\ngroup_sise = 4\n");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = format!("{MINIMAL}\n[extra]\nx = 1\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = MINIMAL.replace("length = 12", "length = 12\nturns = 3");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for extra in [
            "[grpo]\ngroup_size = 1",
            "[exit]\nreplay_prob = 1.5",
            "[exit]\ncapacity = 4\nmin_size = 8",
            "[exit]\nablation = \"improve\"\ndiversity_bonus = true",
            "[exit]\ndivergence_prior = -1.0",
        ] {
            let text = format!("{MINIMAL}\n{extra}\n");
            assert!(RunConfig::from_toml_str(&text).is_err(), "{extra}");
        }
    }

    #[test]
    fn ablation_forces_flags() {
        for (level, p_div, bonus, update) in [
            ("grpo", 0.0, false, None),
            ("curriculum", 0.0, false, Some(BufferUpdate::BaseOnly)),
            ("improve", 0.0, false, Some(BufferUpdate::Children)),
            ("diverge", 0.2, false, Some(BufferUpdate::Children)),
            ("full", 0.2, true, Some(BufferUpdate::Children)),
        ] {
            let text = format!("{MINIMAL}\n[exit]\nablation = \"{level}\"\n");
            let cfg = RunConfig::from_toml_str(&text).unwrap();
            assert_eq!(cfg.effective_divergence_prob(), p_div, "{level}");
            assert_eq!(cfg.diversity_bonus(), bonus, "{level}");
            assert_eq!(cfg.buffer_update(), update, "{level}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn eval_tasks_are_disjoint_from_training() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        let train = cfg.env.train_tasks().unwrap();
        let eval = cfg.env.eval_tasks(10).unwrap();
        assert!(eval.iter().all(|e| train.iter().all(|t| t.task_id != e.task_id)));
    }
}
