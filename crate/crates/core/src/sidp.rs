//! Self-improvement decision process: turns, iterates, histories, grading.
//!
//! A task is a multi-turn process. At each turn the policy emits a response
//! (iterate depth 0) and may then revise it any number of times; each revision
//! is a new iterate one depth deeper. Observations expose the last iterate of
//! every completed turn plus, when iterating, the iterate being revised.
//!
//! Two synthetic environments instantiate the process:
//! - `BitstringRepair`: one turn; recover an `L`-bit hidden target from a hint
//!   whose bits were each flipped with probability `q`. Quality is the fraction
//!   of matching bits.
//! - `MultiTurnKeySequence`: `T` turns; each turn emits one token from a
//!   vocabulary of size `V` and is correct iff it equals that turn's hidden key.
//!   The episode stops at the first turn whose final answer is wrong, so later
//!   turns are only reachable once earlier ones are solved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prf::{prf, unit_interval};

pub type Token = u32;

const DOMAIN_TARGET: u64 = 0x7461_7267;
const DOMAIN_HINT: u64 = 0x6869_6e74;
const DOMAIN_BUCKET: u64 = 0x6275_636b;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    BitstringRepair,
    MultiTurnKeySequence,
}

/// Iteration mode of a response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Base,
    Improve,
    Diverge,
}

impl Mode {
    pub fn index(self) -> usize {
        match self {
            Mode::Base => 0,
            Mode::Improve => 1,
            Mode::Diverge => 2,
        }
    }
}

/// Environment-specific task parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvParams {
    BitstringRepair {
        length: usize,
        hint_corruption: f64,
    },
    MultiTurnKeySequence {
        turns: usize,
        vocab: usize,
        /// Number of hashed (task, turn) feature buckets exposed to the policy.
        #[serde(default = "default_buckets")]
        feature_buckets: usize,
    },
}

fn default_buckets() -> usize {
    128
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EnvParams::BitstringRepair {
                length,
                hint_corruption,
            } => {
                if length < 1 {
                    return Err(Error::Config("bitstring length must be >= 1".into()));
                }
                if !(0.0..=0.5).contains(&hint_corruption) {
                    return Err(Error::Config(format!(
                        "hint corruption {hint_corruption} outside [0, 0.5]"
                    )));
                }
            }
            EnvParams::MultiTurnKeySequence {
                turns,
                vocab,
                feature_buckets,
            } => {
                if turns < 1 {
                    return Err(Error::Config("turn count must be >= 1".into()));
                }
                if vocab < 2 {
                    return Err(Error::Config("vocabulary size must be >= 2".into()));
                }
                if feature_buckets < 1 {
                    return Err(Error::Config("feature_buckets must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvParams::BitstringRepair { .. } => EnvKind::BitstringRepair,
            EnvParams::MultiTurnKeySequence { .. } => EnvKind::MultiTurnKeySequence,
        }
    }

    /// Number of turns `T_m`.
    pub fn turn_count(&self) -> usize {
        match *self {
            EnvParams::BitstringRepair { .. } => 1,
            EnvParams::MultiTurnKeySequence { turns, .. } => turns,
        }
    }

    /// Tokens per response.
    pub fn response_len(&self) -> usize {
        match *self {
            EnvParams::BitstringRepair { length, .. } => length,
            EnvParams::MultiTurnKeySequence { .. } => 1,
        }
    }

    pub fn alphabet(&self) -> usize {
        match *self {
            EnvParams::BitstringRepair { .. } => 2,
            EnvParams::MultiTurnKeySequence { vocab, .. } => vocab,
        }
    }

    /// Length of [`Observation::task_features`].
    pub fn task_feature_len(&self) -> usize {
        match *self {
            EnvParams::BitstringRepair { length, .. } => length,
            EnvParams::MultiTurnKeySequence { feature_buckets, .. } => feature_buckets + 1,
        }
    }

    /// Range of the raw total quality `G`, used to normalize episode returns.
    pub fn quality_range(&self) -> QualityRange {
        QualityRange {
            worst: 0.0,
            best: self.turn_count() as f64,
        }
    }
}

/// A base task instance `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTask {
    pub task_id: u64,
    pub seed: u64,
    pub params: EnvParams,
}

impl BaseTask {
    pub fn new(task_id: u64, seed: u64, params: EnvParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { task_id, seed, params })
    }

    pub fn env_kind(&self) -> EnvKind {
        self.params.kind()
    }

    /// Hidden target tokens for `turn`.
    ///
    /// Keys of the multi-turn environment chain through a hash of all earlier
    /// keys, so the sequence is reproducible from the seed alone.
    pub fn target(&self, turn: usize) -> Vec<Token> {
        match self.params {
            EnvParams::BitstringRepair { length, .. } => (0..length as u64)
                .map(|j| (prf(&[DOMAIN_TARGET, self.seed, self.task_id, 0, 0, j]) & 1) as Token)
                .collect(),
            EnvParams::MultiTurnKeySequence { vocab, .. } => {
                let mut prior = 0u64;
                let mut key = 0;
                for t in 0..=turn as u64 {
                    key = prf(&[DOMAIN_TARGET, self.seed, self.task_id, t, prior]) % vocab as u64;
                    prior = prf(&[prior, key]);
                }
                vec![key as Token]
            }
        }
    }

    /// Corrupted copy of the target shown to the policy (bitstring tasks only).
    pub fn hint(&self) -> Vec<Token> {
        match self.params {
            EnvParams::BitstringRepair { hint_corruption, .. } => self
                .target(0)
                .into_iter()
                .enumerate()
                .map(|(j, bit)| {
                    let u = unit_interval(prf(&[DOMAIN_HINT, self.seed, self.task_id, j as u64]));
                    if u < hint_corruption {
                        1 - bit
                    } else {
                        bit
                    }
                })
                .collect(),
            EnvParams::MultiTurnKeySequence { .. } => Vec::new(),
        }
    }

    fn task_features(&self, turn: usize) -> Vec<f64> {
        match self.params {
            EnvParams::BitstringRepair { .. } => self.hint().into_iter().map(|b| b as f64).collect(),
            EnvParams::MultiTurnKeySequence { feature_buckets, .. } => {
                let mut f = vec![0.0; feature_buckets + 1];
                let bucket = prf(&[DOMAIN_BUCKET, self.task_id, turn as u64]) % feature_buckets as u64;
                f[bucket as usize] = 1.0;
                f[feature_buckets] = turn as f64;
                f
            }
        }
    }
}

/// Signal returned alongside a graded iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Feedback {
    Scalar(f64),
    /// Per-position correctness; a debugging aid that makes repair trivial.
    PerPosition(Vec<f64>),
}

impl Feedback {
    /// Feedback value relevant to position `j`.
    pub fn at(&self, j: usize) -> f64 {
        match self {
            Feedback::Scalar(v) => *v,
            Feedback::PerPosition(v) => v.get(j).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    None,
    #[default]
    Scalar,
    PerPosition,
}

/// One response revision `y_t^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub tokens: Vec<Token>,
    pub feedback: Option<Feedback>,
    pub quality: f64,
    pub depth: u32,
    #[serde(default = "yes")]
    pub valid: bool,
}

fn yes() -> bool {
    true
}

/// Ordered turns, each an ordered chain of iterates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub turns: Vec<Vec<Iterate>>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Index of the last turn holding iterates.
    pub fn current_turn(&self) -> Option<usize> {
        self.turns.len().checked_sub(1)
    }

    /// Final iterate of the last turn.
    pub fn last_iterate(&self) -> Option<&Iterate> {
        self.turns.last().and_then(|t| t.last())
    }

    /// Checks turn count and depth numbering against `task`.
    pub fn validate(&self, task: &BaseTask) -> Result<()> {
        if self.turns.len() > task.params.turn_count() {
            return Err(Error::Structure(format!(
                "history has {} turns but the task has {}",
                self.turns.len(),
                task.params.turn_count()
            )));
        }
        for (t, turn) in self.turns.iter().enumerate() {
            if turn.is_empty() {
                return Err(Error::Structure(format!("turn {t} has no iterates")));
            }
            for (k, it) in turn.iter().enumerate() {
                if it.depth as usize != k {
                    return Err(Error::Structure(format!("turn {t} iterate {k} has depth {}", it.depth)));
                }
            }
        }
        Ok(())
    }

    /// History truncated to turns `0..=turn`.
    pub fn prefix(&self, turn: usize) -> History {
        History {
            turns: self.turns[..=turn].to_vec(),
        }
    }

    /// Last-iterate tokens of every turn.
    pub fn final_tokens(&self) -> Vec<Vec<Token>> {
        self.turns
            .iter()
            .filter_map(|t| t.last().map(|it| it.tokens.clone()))
            .collect()
    }
}

/// The iterate being revised, as seen by the policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreviousIterate {
    pub tokens: Vec<Token>,
    pub feedback: Option<Feedback>,
}

/// Structured policy input for one response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub task_id: u64,
    pub env: EnvParams,
    pub turn: usize,
    pub mode: Mode,
    pub task_features: Vec<f64>,
    pub previous: Option<PreviousIterate>,
    pub visible_history: Vec<PreviousIterate>,
}

impl Observation {
    pub fn response_len(&self) -> usize {
        self.env.response_len()
    }

    pub fn alphabet(&self) -> usize {
        self.env.alphabet()
    }
}

/// Builds the observation for the next response.
///
/// With `Mode::Base` the response opens turn `history.turns.len()`. With
/// `Improve` or `Diverge` it revises the last iterate of the last turn.
pub fn reset(task: &BaseTask, history: &History, mode: Mode) -> Result<Observation> {
    history.validate(task)?;
    let visible = |upto: usize| -> Vec<PreviousIterate> {
        history.turns[..upto]
            .iter()
            .map(|t| {
                let it = t.last().expect("validated non-empty turn");
                PreviousIterate {
                    tokens: it.tokens.clone(),
                    feedback: it.feedback.clone(),
                }
            })
            .collect()
    };
    let (turn, previous, visible_history) = match mode {
        Mode::Base => {
            let turn = history.turns.len();
            if turn >= task.params.turn_count() {
                return Err(Error::Structure(format!("history already covers all {turn} turns")));
            }
            (turn, None, visible(turn))
        }
        Mode::Improve | Mode::Diverge => {
            let turn = history
                .current_turn()
                .ok_or_else(|| Error::Structure("iteration mode requires a non-empty history".into()))?;
            let last = history.last_iterate().expect("validated non-empty turn");
            let prev = PreviousIterate {
                tokens: last.tokens.clone(),
                feedback: last.feedback.clone(),
            };
            (turn, Some(prev), visible(turn))
        }
    };
    Ok(Observation {
        task_id: task.task_id,
        env: task.params.clone(),
        turn,
        mode,
        task_features: task.task_features(turn),
        previous,
        visible_history,
    })
}

/// Result of grading one response.
#[derive(Clone, Debug, PartialEq)]
pub struct Grade {
    pub quality: f64,
    pub feedback: Option<Feedback>,
    pub valid: bool,
}

/// Grades `tokens` as the response for `turn`.
///
/// Responses of the wrong arity or alphabet score 0 and are flagged invalid.
pub fn grade(task: &BaseTask, turn: usize, tokens: &[Token], feedback: FeedbackMode) -> Grade {
    let alphabet = task.params.alphabet() as Token;
    if tokens.len() != task.params.response_len()
        || tokens.iter().any(|&t| t >= alphabet)
        || turn >= task.params.turn_count()
    {
        let fb = match feedback {
            FeedbackMode::None => None,
            FeedbackMode::Scalar => Some(Feedback::Scalar(0.0)),
            FeedbackMode::PerPosition => Some(Feedback::PerPosition(vec![0.0; tokens.len()])),
        };
        return Grade {
            quality: 0.0,
            feedback: fb,
            valid: false,
        };
    }
    let target = task.target(turn);
    let hits: Vec<f64> = tokens
        .iter()
        .zip(&target)
        .map(|(a, b)| if a == b { 1.0 } else { 0.0 })
        .collect();
    let quality = hits.iter().sum::<f64>() / hits.len() as f64;
    let fb = match feedback {
        FeedbackMode::None => None,
        FeedbackMode::Scalar => Some(Feedback::Scalar(quality)),
        FeedbackMode::PerPosition => Some(Feedback::PerPosition(hits)),
    };
    Grade {
        quality,
        feedback: fb,
        valid: true,
    }
}

/// Whether an episode with this history has ended.
pub fn episode_done(task: &BaseTask, history: &History) -> bool {
    if history.turns.len() >= task.params.turn_count() {
        return true;
    }
    match task.env_kind() {
        EnvKind::BitstringRepair => !history.is_empty(),
        EnvKind::MultiTurnKeySequence => history.last_iterate().map(|it| it.quality < 1.0).unwrap_or(false),
    }
}

/// Total quality `G`: sum over turns of the final iterate's quality.
pub fn total_quality(history: &History) -> f64 {
    history.turns.iter().filter_map(|t| t.last()).map(|it| it.quality).sum()
}

/// Worst and best raw scores used for normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRange {
    pub worst: f64,
    pub best: f64,
}

impl QualityRange {
    pub fn new(worst: f64, best: f64) -> Result<Self> {
        if !worst.is_finite() || !best.is_finite() || worst == best {
            return Err(Error::Config(format!(
                "quality range needs distinct finite endpoints, got worst={worst} best={best}"
            )));
        }
        Ok(Self { worst, best })
    }
}

/// Affine rescaling of `raw` onto [0, 1], clamped. Works for either ordering
/// of the endpoints, so loss-like scores (lower is better) normalize too.
pub fn normalize_quality(raw: f64, range: QualityRange) -> f64 {
    ((raw - range.worst) / (range.best - range.worst)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardShaping {
    #[default]
    Delta,
    Absolute,
}

/// Reward for a self-iteration step.
///
/// Improve steps with delta shaping earn `max(0, (new - prev) / (1 - prev))`;
/// from an already-perfect start they earn 1 only if perfection is kept.
/// Diverge and Base steps earn the new quality unchanged.
pub fn shaped_iteration_reward(prev_quality: f64, new_quality: f64, mode: Mode, shaping: RewardShaping) -> Result<f64> {
    for (name, v) in [("previous", prev_quality), ("new", new_quality)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} quality {v} outside [0, 1]")));
        }
    }
    match (mode, shaping) {
        (Mode::Improve, RewardShaping::Delta) => {
            if prev_quality >= 1.0 {
                Ok(if new_quality >= 1.0 { 1.0 } else { 0.0 })
            } else {
                let r = (new_quality - prev_quality) / (1.0 - prev_quality);
                Ok(r.clamp(0.0, 1.0))
            }
        }
        _ => Ok(new_quality),
    }
}
