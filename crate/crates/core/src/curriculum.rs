//! Learnability-prioritized task buffer and the selection/expansion transforms.
//!
//! After a group of rollouts on instance `m'`, the group's reward variance is
//! its learnability score `S`. The median-reward rollout seeds the successor
//! `m+`, whose per-turn partial histories are inserted into the buffer with the
//! inherited score `S`. At capacity an insert succeeds only if it scores at
//! least the current minimum, which it then evicts. Training instances are
//! replayed from the buffer with probability proportional to `exp(κ·S)`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prf::prf;
use crate::sidp::{BaseTask, History, Mode};

/// Generated instance ids start here; smaller ids are base task ids.
pub const GENERATED_ID_BASE: u64 = 1 << 48;

/// Monotone source of generated instance ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdAllocator {
    next: u64,
}

impl Default for IdAllocator {
    fn default() -> Self {
        Self {
            next: GENERATED_ID_BASE,
        }
    }
}

impl IdAllocator {
    pub fn next_id(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }
}

/// A task to roll out: a base task plus the partial history to iterate on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub base: BaseTask,
    /// Self-iteration steps already taken on the starting response, plus one.
    pub depth: u32,
    pub history: History,
    /// Iteration mode. Buffered children hold `Improve` until sampling
    /// reassigns it.
    pub mode: Mode,
    pub lineage: Option<u64>,
    pub created_at: u64,
    /// Normalized total quality of the complete history this instance was cut
    /// from; the baseline for delta-shaped rewards.
    pub reference_quality: f64,
}

impl TaskInstance {
    /// Fresh base instance; its id is the base task id.
    pub fn base(task: &BaseTask, created_at: u64) -> Self {
        Self {
            id: task.task_id,
            base: task.clone(),
            depth: 0,
            history: History::new(),
            mode: Mode::Base,
            lineage: None,
            created_at,
            reference_quality: 0.0,
        }
    }

    pub fn is_base(&self) -> bool {
        self.history.is_empty()
    }

    /// Turn the instance starts on.
    pub fn start_turn(&self) -> usize {
        self.history.current_turn().unwrap_or(0)
    }

    /// Content hash of the starting point (task plus starting iterates).
    pub fn start_hash(&self) -> u64 {
        let mut parts = vec![self.base.task_id, self.base.seed];
        for tokens in self.history.final_tokens() {
            parts.push(u64::MAX);
            parts.extend(tokens.iter().map(|&t| t as u64));
        }
        prf(&parts)
    }

    pub fn validate(&self) -> Result<()> {
        self.history.validate(&self.base)?;
        match (self.mode, self.history.last_iterate()) {
            (Mode::Base, None) if self.depth == 0 => Ok(()),
            (Mode::Base, _) => Err(Error::Structure(
                "base instances have depth 0 and an empty history".into(),
            )),
            (_, None) => Err(Error::Structure("iteration instances need a history".into())),
            (_, Some(last)) if self.depth != last.depth + 1 => Err(Error::Structure(format!(
                "instance depth {} does not follow final iterate depth {}",
                self.depth, last.depth
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub instance: TaskInstance,
    pub score: f64,
    /// True until the entry's own rollouts re-score it.
    pub inherited: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub capacity: usize,
    pub min_size: usize,
    pub replay_prob: f64,
    pub divergence_prob: f64,
    pub inverse_temperature: f64,
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_size < 1 || self.capacity < self.min_size {
            return Err(Error::Config(format!(
                "need capacity ({}) >= min size ({}) >= 1",
                self.capacity, self.min_size
            )));
        }
        for (name, p) in [
            ("replay probability", self.replay_prob),
            ("divergence probability", self.divergence_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !self.inverse_temperature.is_finite() {
            return Err(Error::Config("inverse temperature must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Replaced { evicted: u64 },
    Rejected,
}

/// Capacity-bounded store of instances keyed by learnability score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBuffer {
    config: BufferConfig,
    entries: Vec<BufferEntry>,
}

/// Population variance of the group rewards.
pub fn learnability_score(rewards: &[f64]) -> Result<f64> {
    if rewards.len() < 2 {
        return Err(Error::Structure(format!(
            "learnability needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("non-finite reward {r}")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    Ok(rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n)
}

impl TaskBuffer {
    pub fn new(config: BufferConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            entries: Vec::with_capacity(config.capacity),
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&BufferEntry> {
        self.entries.iter().find(|e| e.instance.id == id)
    }

    /// Index of the entry an insert at capacity would evict: lowest score,
    /// then oldest, then smallest id.
    fn min_index(&self) -> Option<usize> {
        (0..self.entries.len()).min_by(|&a, &b| {
            let (x, y) = (&self.entries[a], &self.entries[b]);
            x.score
                .total_cmp(&y.score)
                .then(x.instance.created_at.cmp(&y.instance.created_at))
                .then(x.instance.id.cmp(&y.instance.id))
        })
    }

    pub fn min_score(&self) -> Option<f64> {
        self.min_index().map(|i| self.entries[i].score)
    }

    pub fn insert(&mut self, instance: TaskInstance, score: f64, inherited: bool) -> Result<InsertOutcome> {
        if !score.is_finite() {
            return Err(Error::Numeric(format!("non-finite buffer score {score}")));
        }
        if self.get(instance.id).is_some() {
            return Err(Error::Structure(format!("instance {} already buffered", instance.id)));
        }
        let entry = BufferEntry {
            instance,
            score,
            inherited,
        };
        if self.entries.len() < self.config.capacity {
            self.entries.push(entry);
            return Ok(InsertOutcome::Inserted);
        }
        let i = self.min_index().expect("capacity >= 1");
        if score >= self.entries[i].score {
            let evicted = std::mem::replace(&mut self.entries[i], entry);
            Ok(InsertOutcome::Replaced {
                evicted: evicted.instance.id,
            })
        } else {
            Ok(InsertOutcome::Rejected)
        }
    }

    /// Overwrites the score of a resident entry. Returns whether it was found.
    pub fn rescore(&mut self, id: u64, score: f64) -> bool {
        match self.entries.iter_mut().find(|e| e.instance.id == id) {
            Some(e) => {
                e.score = score;
                e.inherited = false;
                true
            }
            None => false,
        }
    }

    /// Replay distribution `exp(κ S_i) / Σ_j exp(κ S_j)`.
    pub fn sampling_probabilities(&self) -> Vec<f64> {
        let k = self.config.inverse_temperature;
        let max = self
            .entries
            .iter()
            .map(|e| k * e.score)
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.entries.iter().map(|e| (k * e.score - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    }

    /// Draws an entry index from the replay distribution.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        if self.entries.is_empty() {
            return None;
        }
        let probs = self.sampling_probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Some(i);
            }
        }
        Some(probs.len() - 1)
    }

    pub fn score_stats(&self) -> Option<(f64, f64, f64)> {
        if self.entries.is_empty() {
            return None;
        }
        let scores = self.entries.iter().map(|e| e.score);
        let min = scores.clone().fold(f64::INFINITY, f64::min);
        let max = scores.clone().fold(f64::NEG_INFINITY, f64::max);
        let mean = scores.sum::<f64>() / self.entries.len() as f64;
        Some((mean, min, max))
    }
}

/// `Diverge` with probability `p_div`, else `Improve`.
pub fn assign_mode<R: Rng + ?Sized>(rng: &mut R, p_div: f64) -> Mode {
    if rng.random::<f64>() < p_div {
        Mode::Diverge
    } else {
        Mode::Improve
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledInstance {
    pub instance: TaskInstance,
    pub replayed: bool,
}

/// Replays a buffered instance when the buffer is active and the replay gate
/// fires; otherwise draws a fresh base task uniformly.
pub fn sample_training_instance<R: Rng + ?Sized>(
    buffer: &TaskBuffer,
    base_tasks: &[BaseTask],
    rng: &mut R,
    iteration: u64,
) -> Result<SampledInstance> {
    if base_tasks.is_empty() {
        return Err(Error::Config("base task set is empty".into()));
    }
    let cfg = buffer.config();
    if buffer.len() >= cfg.min_size && rng.random::<f64>() < cfg.replay_prob {
        let i = buffer.sample_index(rng).expect("non-empty buffer");
        let mut instance = buffer.entries[i].instance.clone();
        instance.mode = if instance.is_base() {
            Mode::Base
        } else {
            assign_mode(rng, cfg.divergence_prob)
        };
        return Ok(SampledInstance {
            instance,
            replayed: true,
        });
    }
    let task = &base_tasks[rng.random_range(0..base_tasks.len())];
    Ok(SampledInstance {
        instance: TaskInstance::base(task, iteration),
        replayed: false,
    })
}

/// Which group member seeds the successor instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionRule {
    #[default]
    Median,
    Best,
    Worst,
    Random,
}

/// Index of the rollout chosen for expansion. Ties resolve to the lowest index.
pub fn select_expansion_rollout<R: Rng + ?Sized>(rewards: &[f64], rule: ExpansionRule, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[a].total_cmp(&rewards[b]).then(a.cmp(&b)));
    match rule {
        ExpansionRule::Median => order[(order.len() - 1) / 2],
        ExpansionRule::Worst => order[0],
        ExpansionRule::Best => {
            let top = rewards[order[order.len() - 1]];
            *order.iter().find(|&&i| rewards[i] == top).expect("non-empty")
        }
        ExpansionRule::Random => rng.random_range(0..rewards.len()),
    }
}

/// Successor `m+` of `instance` after a rollout ended in `history`.
pub fn expand(
    instance: &TaskInstance,
    history: History,
    quality: f64,
    ids: &mut IdAllocator,
    created_at: u64,
) -> Result<TaskInstance> {
    let last = history
        .last_iterate()
        .ok_or_else(|| Error::Structure("expansion needs a graded rollout".into()))?;
    let successor = TaskInstance {
        id: ids.next_id(),
        base: instance.base.clone(),
        depth: last.depth + 1,
        history,
        mode: Mode::Improve,
        lineage: Some(instance.id),
        created_at,
        reference_quality: quality,
    };
    successor.validate()?;
    Ok(successor)
}

/// One insertable instance per turn prefix of `successor`'s history, each
/// ending at that turn's final iterate.
pub fn precompute_children(successor: &TaskInstance, ids: &mut IdAllocator, created_at: u64) -> Vec<TaskInstance> {
    (0..successor.history.turns.len())
        .map(|t| {
            let history = successor.history.prefix(t);
            let depth = history.last_iterate().expect("validated turn").depth + 1;
            TaskInstance {
                id: ids.next_id(),
                base: successor.base.clone(),
                depth,
                history,
                mode: Mode::Improve,
                lineage: successor.lineage,
                created_at,
                reference_quality: successor.reference_quality,
            }
        })
        .collect()
}

/// What a buffer update stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferUpdate {
    /// Store the rolled-out base instance itself (selection only).
    BaseOnly,
    /// Store the successor's per-turn children.
    Children,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateSummary {
    pub score: f64,
    pub rescored: bool,
    pub inserted: Vec<u64>,
    pub rejected: usize,
    pub evicted: Vec<u64>,
}

/// Scores the group, re-scores `instance` if resident, and inserts new
/// entries per `kind`.
pub fn update_after_rollout(
    buffer: &mut TaskBuffer,
    instance: &TaskInstance,
    successor: Option<&TaskInstance>,
    group_rewards: &[f64],
    kind: BufferUpdate,
    ids: &mut IdAllocator,
    iteration: u64,
) -> Result<UpdateSummary> {
    let score = learnability_score(group_rewards)?;
    let mut summary = UpdateSummary {
        score,
        rescored: buffer.rescore(instance.id, score),
        ..Default::default()
    };
    let record = |outcome: InsertOutcome, id: u64, summary: &mut UpdateSummary| match outcome {
        InsertOutcome::Inserted => summary.inserted.push(id),
        InsertOutcome::Replaced { evicted } => {
            summary.inserted.push(id);
            summary.evicted.push(evicted);
        }
        InsertOutcome::Rejected => summary.rejected += 1,
    };
    match kind {
        BufferUpdate::BaseOnly => {
            if !summary.rescored && instance.is_base() {
                let mut stored = instance.clone();
                stored.mode = Mode::Base;
                let outcome = buffer.insert(stored, score, false)?;
                record(outcome, instance.id, &mut summary);
            }
        }
        BufferUpdate::Children => {
            if let Some(successor) = successor {
                for child in precompute_children(successor, ids, iteration) {
                    let id = child.id;
                    let outcome = buffer.insert(child, score, true)?;
                    record(outcome, id, &mut summary);
                }
            }
        }
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub parent: Option<u64>,
    pub task_id: u64,
    pub depth: u32,
    pub created_at: u64,
}

/// Parent links of every instance that was rolled out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LineageRegistry {
    records: BTreeMap<u64, LineageRecord>,
}

impl LineageRegistry {
    pub fn record(&mut self, instance: &TaskInstance) {
        self.records.entry(instance.id).or_insert(LineageRecord {
            parent: instance.lineage,
            task_id: instance.base.task_id,
            depth: instance.depth,
            created_at: instance.created_at,
        });
    }

    pub fn get(&self, id: u64) -> Option<&LineageRecord> {
        self.records.get(&id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ids from `start` back to its base instance, or `None` if a link is
    /// missing. `parent` resolves ids that were never rolled out themselves.
    pub fn chain(&self, start: u64, parent: Option<u64>) -> Option<Vec<u64>> {
        let mut chain = vec![start];
        let mut next = if start < GENERATED_ID_BASE {
            return Some(chain);
        } else {
            match self.records.get(&start) {
                Some(r) => r.parent,
                None => parent,
            }
        };
        while let Some(id) = next {
            chain.push(id);
            if id < GENERATED_ID_BASE {
                return Some(chain);
            }
            next = self.records.get(&id)?.parent;
            if chain.len() > self.records.len() + 2 {
                return None;
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sidp::{EnvParams, Feedback, Iterate};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(id: u64) -> BaseTask {
        BaseTask::new(
            id,
            id,
            EnvParams::MultiTurnKeySequence {
                turns: 3,
                vocab: 4,
                feature_buckets: 8,
            },
        )
        .unwrap()
    }

    fn config(capacity: usize) -> BufferConfig {
        BufferConfig {
            capacity,
            min_size: 1,
            replay_prob: 1.0,
            divergence_prob: 0.0,
            inverse_temperature: 1.0,
        }
    }

    fn it(q: f64, depth: u32) -> Iterate {
        Iterate {
            tokens: vec![depth % 4],
            feedback: Some(Feedback::Scalar(q)),
            quality: q,
            depth,
            valid: true,
        }
    }

    fn child_instance(ids: &mut IdAllocator, created_at: u64) -> TaskInstance {
        TaskInstance {
            id: ids.next_id(),
            base: task(1),
            depth: 1,
            history: History {
                turns: vec![vec![it(0.0, 0)]],
            },
            mode: Mode::Improve,
            lineage: Some(1),
            created_at,
            reference_quality: 0.0,
        }
    }

    #[test]
    fn learnability_examples() {
        assert_eq!(learnability_score(&[1.0, 1.0, 0.0, 0.0]).unwrap(), 0.25);
        assert_eq!(learnability_score(&[1.0; 4]).unwrap(), 0.0);
        assert_eq!(learnability_score(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.1875);
        assert!(learnability_score(&[0.5, f64::INFINITY]).is_err());
    }

    #[test]
    fn insert_examples() {
        let mut ids = IdAllocator::default();
        let mut buf = TaskBuffer::new(config(2)).unwrap();
        assert_eq!(
            buf.insert(child_instance(&mut ids, 0), 0.1, true).unwrap(),
            InsertOutcome::Inserted
        );
        assert_eq!(
            buf.insert(child_instance(&mut ids, 1), 0.2, true).unwrap(),
            InsertOutcome::Inserted
        );
        let low_id = buf.entries()[0].instance.id;
        assert_eq!(
            buf.insert(child_instance(&mut ids, 2), 0.05, true).unwrap(),
            InsertOutcome::Rejected
        );
        assert_eq!(
            buf.insert(child_instance(&mut ids, 3), 0.1, true).unwrap(),
            InsertOutcome::Replaced { evicted: low_id }
        );
        assert_eq!(buf.len(), 2);
        let scores: Vec<f64> = buf.entries().iter().map(|e| e.score).collect();
        assert_eq!(scores, vec![0.1, 0.2]);
    }

    #[test]
    fn eviction_ties_break_to_oldest() {
        let mut ids = IdAllocator::default();
        let mut buf = TaskBuffer::new(config(2)).unwrap();
        let old = child_instance(&mut ids, 5);
        let young = child_instance(&mut ids, 9);
        let (old_id, young_id) = (old.id, young.id);
        buf.insert(young, 0.1, true).unwrap();
        buf.insert(old, 0.1, true).unwrap();
        assert_eq!(
            buf.insert(child_instance(&mut ids, 10), 0.1, true).unwrap(),
            InsertOutcome::Replaced { evicted: old_id }
        );
        assert!(buf.get(young_id).is_some());
    }

    #[test]
    fn children_examples() {
        let mut ids = IdAllocator::default();
        let base = TaskInstance::base(&task(1), 0);
        let single = History {
            turns: vec![vec![it(0.0, 0)]],
        };
        let succ = expand(&base, single, 0.0, &mut ids, 0).unwrap();
        assert_eq!(succ.depth, 1);
        assert_eq!(succ.lineage, Some(1));
        let kids = precompute_children(&succ, &mut ids, 0);
        assert_eq!(kids.len(), 1);
        assert_eq!(kids[0].depth, 1);

        let three = History {
            turns: vec![vec![it(1.0, 0)], vec![it(1.0, 0), it(1.0, 1)], vec![it(0.0, 0)]],
        };
        let succ = expand(&base, three, 2.0 / 3.0, &mut ids, 0).unwrap();
        let kids = precompute_children(&succ, &mut ids, 0);
        assert_eq!(kids.len(), 3);
        assert_eq!(kids.iter().map(|k| k.start_turn()).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(kids.iter().map(|k| k.depth).collect::<Vec<_>>(), vec![1, 2, 1]);
        for k in &kids {
            k.validate().unwrap();
        }
    }

    #[test]
    fn successor_appends_one_iterate() {
        let mut ids = IdAllocator::default();
        let parent = child_instance(&mut ids, 0);
        let mut history = parent.history.clone();
        history.turns[0].push(it(0.5, 1));
        let succ = expand(&parent, history, 0.5, &mut ids, 1).unwrap();
        assert_eq!(succ.history.turns[0].len(), parent.history.turns[0].len() + 1);
        assert_eq!(succ.depth, parent.depth + 1);
        assert_eq!(succ.lineage, Some(parent.id));
    }

    #[test]
    fn update_inserts_children_with_group_variance() {
        let mut ids = IdAllocator::default();
        let mut buf = TaskBuffer::new(config(8)).unwrap();
        let base = TaskInstance::base(&task(2), 0);
        let history = History {
            turns: vec![vec![it(1.0, 0)], vec![it(0.0, 0)]],
        };
        let succ = expand(&base, history, 0.5, &mut ids, 0).unwrap();
        let s = update_after_rollout(
            &mut buf,
            &base,
            Some(&succ),
            &[1.0, 0.0, 0.0, 1.0],
            BufferUpdate::Children,
            &mut ids,
            0,
        )
        .unwrap();
        assert_eq!(s.score, 0.25);
        assert_eq!(s.inserted.len(), 2);
        assert!(buf.entries().iter().all(|e| e.score == 0.25 && e.inherited));

        // Replaying a resident child re-scores it in place.
        let resident = buf.entries()[0].instance.clone();
        let s = update_after_rollout(
            &mut buf,
            &resident,
            None,
            &[1.0; 4],
            BufferUpdate::Children,
            &mut ids,
            1,
        )
        .unwrap();
        assert!(s.rescored);
        let e = buf.get(resident.id).unwrap();
        assert_eq!(e.score, 0.0);
        assert!(!e.inherited);
    }

    #[test]
    fn low_scoring_children_leave_a_full_buffer_unchanged() {
        let mut ids = IdAllocator::default();
        let mut buf = TaskBuffer::new(config(2)).unwrap();
        buf.insert(child_instance(&mut ids, 0), 0.2, false).unwrap();
        buf.insert(child_instance(&mut ids, 0), 0.25, false).unwrap();
        let before = buf.clone();
        let base = TaskInstance::base(&task(3), 0);
        let succ = expand(
            &base,
            History {
                turns: vec![vec![it(0.0, 0)]],
            },
            0.0,
            &mut ids,
            1,
        )
        .unwrap();
        let s = update_after_rollout(
            &mut buf,
            &base,
            Some(&succ),
            &[1.0, 0.0, 0.0, 0.0],
            BufferUpdate::Children,
            &mut ids,
            1,
        )
        .unwrap();
        assert_eq!(s.rejected, 1);
        assert_eq!(buf, before);
    }

    #[test]
    fn base_only_updates_store_and_rescore_the_base_instance() {
        let mut ids = IdAllocator::default();
        let mut buf = TaskBuffer::new(config(4)).unwrap();
        let base = TaskInstance::base(&task(4), 0);
        update_after_rollout(&mut buf, &base, None, &[1.0, 0.0], BufferUpdate::BaseOnly, &mut ids, 0).unwrap();
        assert_eq!(buf.len(), 1);
        assert_eq!(buf.get(4).unwrap().score, 0.25);
        update_after_rollout(&mut buf, &base, None, &[1.0, 1.0], BufferUpdate::BaseOnly, &mut ids, 1).unwrap();
        assert_eq!(buf.len(), 1);
        assert_eq!(buf.get(4).unwrap().score, 0.0);
    }

    #[test]
    fn small_buffer_always_yields_base() {
        let mut ids = IdAllocator::default();
        let mut cfg = config(8);
        cfg.min_size = 3;
        let mut buf = TaskBuffer::new(cfg).unwrap();
        buf.insert(child_instance(&mut ids, 0), 0.2, false).unwrap();
        buf.insert(child_instance(&mut ids, 0), 0.2, false).unwrap();
        let tasks = vec![task(1), task(2)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = sample_training_instance(&buf, &tasks, &mut rng, 0).unwrap();
            assert!(!s.replayed);
            assert_eq!(s.instance.mode, Mode::Base);
        }
        buf.insert(child_instance(&mut ids, 0), 0.2, false).unwrap();
        let s = sample_training_instance(&buf, &tasks, &mut rng, 0).unwrap();
        assert!(s.replayed);
        assert_eq!(s.instance.mode, Mode::Improve);
    }

    #[test]
    fn two_entry_softmax_frequency() {
        let mut ids = IdAllocator::default();
        let mut cfg = config(2);
        cfg.inverse_temperature = 4.0;
        let mut buf = TaskBuffer::new(cfg).unwrap();
        buf.insert(child_instance(&mut ids, 0), 0.25, false).unwrap();
        buf.insert(child_instance(&mut ids, 0), 0.0, false).unwrap();
        let e = std::f64::consts::E;
        assert!((buf.sampling_probabilities()[0] - e / (e + 1.0)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let hits = (0..n).filter(|_| buf.sample_index(&mut rng) == Some(0)).count();
        assert!((hits as f64 / n as f64 - 0.7311).abs() < 0.01);
    }

    #[test]
    fn mode_assignment_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| assign_mode(&mut rng, 0.0) == Mode::Improve));
        assert!((0..1000).all(|_| assign_mode(&mut rng, 1.0) == Mode::Diverge));
        let n = 100_000;
        let div = (0..n).filter(|_| assign_mode(&mut rng, 0.2) == Mode::Diverge).count();
        assert!((div as f64 / n as f64 - 0.2).abs() < 0.01);
    }

    #[test]
    fn expansion_rule_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = [0.2, 0.9, 0.5, 0.1];
        assert_eq!(select_expansion_rollout(&r, ExpansionRule::Median, &mut rng), 0);
        assert_eq!(select_expansion_rollout(&r, ExpansionRule::Best, &mut rng), 1);
        assert_eq!(select_expansion_rollout(&r, ExpansionRule::Worst, &mut rng), 3);
        assert_eq!(
            select_expansion_rollout(&[0.3, 0.7, 0.5], ExpansionRule::Median, &mut rng),
            2
        );
        assert!(select_expansion_rollout(&r, ExpansionRule::Random, &mut rng) < 4);
    }

    #[test]
    fn lineage_chain_after_two_expansions() {
        let mut ids = IdAllocator::default();
        let mut reg = LineageRegistry::default();
        let base = TaskInstance::base(&task(5), 0);
        reg.record(&base);
        let h1 = History {
            turns: vec![vec![it(0.0, 0)]],
        };
        let s1 = expand(&base, h1, 0.0, &mut ids, 0).unwrap();
        let c1 = precompute_children(&s1, &mut ids, 0).pop().unwrap();
        reg.record(&c1);
        let mut h2 = c1.history.clone();
        h2.turns[0].push(it(0.5, 1));
        let s2 = expand(&c1, h2, 0.5, &mut ids, 1).unwrap();
        let c2 = precompute_children(&s2, &mut ids, 1).pop().unwrap();
        let chain = reg.chain(c2.id, c2.lineage).unwrap();
        assert_eq!(chain, vec![c2.id, c1.id, 5]);
        assert!(reg.chain(GENERATED_ID_BASE + 999, None).is_none());
    }

    #[test]
    fn instance_invariants_are_checked() {
        let mut ids = IdAllocator::default();
        let mut bad = child_instance(&mut ids, 0);
        bad.depth = 3;
        assert!(bad.validate().is_err());
        let mut base = TaskInstance::base(&task(1), 0);
        base.depth = 1;
        assert!(base.validate().is_err());
    }

    proptest! {
        #[test]
        fn learnability_is_bounded(r in proptest::collection::vec(0.0f64..=1.0, 2..32)) {
            let s = learnability_score(&r).unwrap();
            prop_assert!((0.0..=0.25 + 1e-15).contains(&s));
        }
    }
}
