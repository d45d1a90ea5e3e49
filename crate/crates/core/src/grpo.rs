//! Group-relative policy optimization.
//!
//! For a group of `G` rollouts of the same task instance, advantages are the
//! rewards standardized within the group and broadcast to every token of the
//! rollout. The objective is the clipped importance-weighted surrogate minus a
//! per-token KL penalty against a reference policy, averaged over tokens within
//! each rollout and then over the group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ParamVector, Policy, SampledResponse};
use crate::sidp::{History, Observation, Token};

/// Below this population standard deviation a group carries no signal.
pub const DEGENERATE_STD: f64 = 1e-8;

/// One generated response and the observation it answered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub obs: Observation,
    pub response: SampledResponse,
}

/// One member of a group: every response generated while rolling out an
/// instance, plus its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub segments: Vec<Segment>,
    /// Normalized total quality of the resulting history.
    pub quality: f64,
    /// Training reward (shaped by iteration mode) in [0, 1].
    pub reward: f64,
    pub valid: bool,
    pub embedding: Option<Vec<f64>>,
    /// Complete history after the rollout.
    pub history: History,
}

impl Rollout {
    pub fn token_count(&self) -> usize {
        self.segments.iter().map(|s| s.response.tokens.len()).sum()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.segments
            .iter()
            .flat_map(|s| s.response.tokens.iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub instance_id: u64,
    pub rollouts: Vec<Rollout>,
    /// Iteration whose parameters generated the rollouts.
    pub old_params_id: u64,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// Per-rollout advantages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

impl AdvantageVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            degenerate: true,
        }
    }
}

fn population_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `A_i = (r_i - mean(r)) / std(r)` with population statistics.
pub fn compute_advantages(rewards: &[f64]) -> Result<AdvantageVector> {
    if rewards.len() < 2 {
        return Err(Error::Structure(format!(
            "group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("non-finite reward {r}")));
    }
    let (mean, std) = population_mean_std(rewards);
    if std < DEGENERATE_STD {
        return Ok(AdvantageVector::zeros(rewards.len()));
    }
    Ok(AdvantageVector {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    })
}

/// Which rollouts enter the baseline statistics and which receive gradient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMask {
    pub in_baseline: Vec<bool>,
    pub trainable: Vec<bool>,
}

/// Invalid rollouts never receive gradient; they enter the advantage
/// statistics only when `invalid_in_baseline` is set.
pub fn mask_invalid(group: &RolloutGroup, invalid_in_baseline: bool) -> GroupMask {
    let valid: Vec<bool> = group.rollouts.iter().map(|r| r.valid).collect();
    GroupMask {
        in_baseline: valid.iter().map(|&v| v || invalid_in_baseline).collect(),
        trainable: valid,
    }
}

/// Advantages over the masked group. Rollouts outside the baseline or without
/// gradient get 0; fewer than two baseline members make the group degenerate.
pub fn masked_advantages(group: &RolloutGroup, mask: &GroupMask) -> Result<AdvantageVector> {
    let n = group.rollouts.len();
    let members: Vec<usize> = (0..n).filter(|&i| mask.in_baseline[i]).collect();
    if members.len() < 2 {
        return Ok(AdvantageVector::zeros(n));
    }
    let sub: Vec<f64> = members.iter().map(|&i| group.rollouts[i].reward).collect();
    let adv = compute_advantages(&sub)?;
    if adv.degenerate {
        return Ok(AdvantageVector::zeros(n));
    }
    let mut values = vec![0.0; n];
    for (&i, a) in members.iter().zip(&adv.values) {
        if mask.trainable[i] {
            values[i] = *a;
        }
    }
    Ok(AdvantageVector {
        values,
        degenerate: false,
    })
}

/// `ρ_t = exp(logp_new,t - logp_old,t)`.
pub fn importance_ratios(logps_new: &[f64], logps_old: &[f64]) -> Result<Vec<f64>> {
    if logps_new.len() != logps_old.len() {
        return Err(Error::Structure(format!(
            "log-prob lengths differ: {} vs {}",
            logps_new.len(),
            logps_old.len()
        )));
    }
    logps_new
        .iter()
        .zip(logps_old)
        .map(|(n, o)| {
            let r = (n - o).exp();
            if r.is_finite() && r > 0.0 {
                Ok(r)
            } else {
                Err(Error::Numeric(format!("importance ratio {r} from logps {n}, {o}")))
            }
        })
        .collect()
}

/// Per-token KL estimate `u - 1 - ln u` with `u = π_ref / π_θ`.
pub fn kl_estimate(logp_theta: &[f64], logp_ref: &[f64]) -> Result<Vec<f64>> {
    if logp_theta.len() != logp_ref.len() {
        return Err(Error::Structure(format!(
            "log-prob lengths differ: {} vs {}",
            logp_theta.len(),
            logp_ref.len()
        )));
    }
    logp_theta
        .iter()
        .zip(logp_ref)
        .map(|(t, r)| {
            if !t.is_finite() || !r.is_finite() {
                return Err(Error::Numeric(format!("non-finite log-prob {t} / {r}")));
            }
            let d = r - t;
            // exp_m1 keeps precision when the two policies nearly agree.
            Ok((d.exp_m1() - d).max(0.0))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Token mean within each rollout, then mean over the group.
    #[default]
    PerRollout,
    /// One mean over every token in the group.
    GlobalToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub aggregation: Aggregation,
    /// Drop degenerate groups entirely instead of keeping their KL term.
    pub skip_degenerate: bool,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.001,
            aggregation: Aggregation::PerRollout,
            skip_degenerate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOutput {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Fraction of trained tokens whose clipped branch was selected.
    pub clip_fraction: f64,
    pub kl_mean: f64,
    pub tokens: usize,
}

/// Clipped surrogate objective and its exact gradient at `theta`.
///
/// Old log-probabilities come from the rollouts' sampling-time values. Tokens
/// whose clipped branch is the smaller one pass no gradient through the ratio.
/// Rollouts not marked trainable contribute nothing.
pub fn surrogate_loss_and_grad<P: Policy>(
    policy: &P,
    group: &RolloutGroup,
    mask: &GroupMask,
    advantages: &AdvantageVector,
    theta: &ParamVector,
    theta_ref: &ParamVector,
    cfg: &SurrogateConfig,
) -> Result<SurrogateOutput> {
    let g = group.rollouts.len();
    if advantages.values.len() != g || mask.trainable.len() != g {
        return Err(Error::Structure(format!(
            "group has {g} rollouts but {} advantages / {} mask entries",
            advantages.values.len(),
            mask.trainable.len()
        )));
    }
    if theta.dim() != policy.dim() || theta_ref.dim() != policy.dim() {
        return Err(Error::Structure("parameter dimension mismatch".into()));
    }
    let mut gradient = vec![0.0; policy.dim()];
    let empty = SurrogateOutput {
        objective: 0.0,
        gradient: gradient.clone(),
        clip_fraction: 0.0,
        kl_mean: 0.0,
        tokens: 0,
    };
    if cfg.skip_degenerate && advantages.degenerate {
        return Ok(empty);
    }
    let lo = 1.0 - cfg.clip_epsilon;
    let hi = 1.0 + cfg.clip_epsilon;
    let total_tokens: usize = group.rollouts.iter().map(Rollout::token_count).sum();
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut kl_sum = 0.0;
    let mut trained_tokens = 0usize;
    for (i, rollout) in group.rollouts.iter().enumerate() {
        if !mask.trainable[i] || rollout.token_count() == 0 {
            continue;
        }
        let scale = match cfg.aggregation {
            Aggregation::PerRollout => 1.0 / (g as f64 * rollout.token_count() as f64),
            Aggregation::GlobalToken => 1.0 / total_tokens as f64,
        };
        let a = advantages.values[i];
        for seg in &rollout.segments {
            let tokens = &seg.response.tokens;
            let new = policy.log_prob(theta, &seg.obs, tokens)?;
            let reference = policy.log_prob(theta_ref, &seg.obs, tokens)?;
            let ratios = importance_ratios(&new, &seg.response.logps)
                .map_err(|e| Error::Numeric(format!("rollout {i}: {e}")))?;
            let kls = kl_estimate(&new, &reference).map_err(|e| Error::Numeric(format!("rollout {i}: {e}")))?;
            let mut weights = Vec::with_capacity(tokens.len());
            for t in 0..tokens.len() {
                let rho = ratios[t];
                let unclipped = rho * a;
                let clip_val = rho.clamp(lo, hi) * a;
                let kl = kls[t];
                let term = unclipped.min(clip_val) - cfg.kl_beta * kl;
                objective += scale * term;
                kl_sum += kl;
                trained_tokens += 1;
                // d/dθ of the selected branch, then of -β·KL (d KL / d logp_θ = 1 - u).
                let mut w = 0.0;
                if unclipped <= clip_val {
                    w += a * rho;
                } else {
                    clipped += 1;
                }
                let u = (reference[t] - new[t]).exp();
                w += cfg.kl_beta * (u - 1.0);
                weights.push(scale * w);
            }
            policy.accumulate_grad(theta, &seg.obs, tokens, &weights, &mut gradient)?;
        }
        if !objective.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective at rollout {i}")));
        }
    }
    if let Some(k) = gradient.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry {k}")));
    }
    if trained_tokens == 0 {
        return Ok(empty);
    }
    Ok(SurrogateOutput {
        objective,
        gradient,
        clip_fraction: clipped as f64 / trained_tokens as f64,
        kl_mean: kl_sum / trained_tokens as f64,
        tokens: trained_tokens,
    })
}

/// Moves the reference toward `theta` every `interval` iterations:
/// `θ_ref' = α·θ + (1 - α)·θ_ref`.
pub fn update_reference(
    theta_ref: &ParamVector,
    theta: &ParamVector,
    alpha: f64,
    iteration: u64,
    interval: u64,
) -> ParamVector {
    if interval == 0 || iteration == 0 || !iteration.is_multiple_of(interval) {
        return theta_ref.clone();
    }
    let mut out = theta_ref.clone();
    for (r, t) in out.values.iter_mut().zip(&theta.values) {
        *r = alpha * t + (1.0 - alpha) * *r;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{LinearSoftmaxPolicy, ParamRole};
    use crate::sidp::{reset, BaseTask, EnvParams, History, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(close(&a.values, &[1.0, -1.0, -1.0, 1.0]));
        assert!(!a.degenerate);
        let a = compute_advantages(&[0.7; 4]).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.values, vec![0.0; 4]);
        let a = compute_advantages(&[1.0, 0.0]).unwrap();
        assert!(close(&a.values, &[1.0, -1.0]));
        assert!(matches!(compute_advantages(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(compute_advantages(&[1.0]).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratios(&[-0.3, -1.2], &[-0.3, -1.2]).unwrap(), vec![1.0, 1.0]);
        let r = importance_ratios(&[-1.0 + 2f64.ln()], &[-1.0]).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-12);
        assert!(importance_ratios(&[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(&[-0.5, -2.0], &[-0.5, -2.0]).unwrap(), vec![0.0, 0.0]);
        // u = 2
        let k = kl_estimate(&[-2.0], &[-2.0 + 2f64.ln()]).unwrap();
        assert!((k[0] - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((k[0] - 0.3069).abs() < 1e-4);
    }

    #[test]
    fn reference_update_examples() {
        let r = ParamVector {
            values: vec![0.0, 4.0],
            role: ParamRole::Reference,
        };
        let t = ParamVector {
            values: vec![2.0, 2.0],
            role: ParamRole::Current,
        };
        assert_eq!(update_reference(&r, &t, 1.0, 100, 100).values, t.values);
        assert_eq!(update_reference(&r, &t, 0.0, 100, 100).values, r.values);
        assert_eq!(update_reference(&r, &t, 0.5, 200, 100).values, vec![1.0, 3.0]);
        assert_eq!(update_reference(&r, &t, 0.5, 150, 100), r);
    }

    fn rollout_of(obs: Observation, response: SampledResponse, reward: f64, valid: bool) -> Rollout {
        Rollout {
            segments: vec![Segment { obs, response }],
            quality: reward,
            reward,
            valid,
            embedding: None,
            history: History::new(),
        }
    }

    fn tiny_group(pol: &LinearSoftmaxPolicy, old: &ParamVector, rng: &mut ChaCha8Rng, env: &EnvParams) -> RolloutGroup {
        let rollouts = (0..4)
            .map(|i| {
                let task = BaseTask::new(i, 17 + i, env.clone()).unwrap();
                let obs = reset(&task, &History::new(), Mode::Base).unwrap();
                let resp = pol.sample_response(old, &obs, rng).unwrap();
                rollout_of(obs, resp, rng.random(), true)
            })
            .collect();
        RolloutGroup {
            instance_id: 0,
            rollouts,
            old_params_id: 0,
        }
    }

    #[test]
    fn objective_at_old_params_is_mean_advantage() {
        let env = EnvParams::BitstringRepair {
            length: 4,
            hint_corruption: 0.25,
        };
        let pol = LinearSoftmaxPolicy::new(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let old = ParamVector {
            values: (0..pol.dim()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            role: ParamRole::Old,
        };
        let mut group = tiny_group(&pol, &old, &mut rng, &env);
        for (r, v) in group.rollouts.iter_mut().zip([0.9, 0.1, 0.4, 0.3]) {
            r.reward = v;
        }
        let mask = mask_invalid(&group, false);
        let adv = masked_advantages(&group, &mask).unwrap();
        let cfg = SurrogateConfig {
            kl_beta: 0.0,
            ..Default::default()
        };
        let out = surrogate_loss_and_grad(&pol, &group, &mask, &adv, &old, &old, &cfg).unwrap();
        let mean_a = adv.values.iter().sum::<f64>() / 4.0;
        assert!((out.objective - mean_a).abs() < 1e-12);
        assert_eq!(out.clip_fraction, 0.0);
    }

    #[test]
    fn clipped_branch_contributes_value_but_no_gradient() {
        // One token, A = 1, ρ = 1.5, ε = 0.2: contribution 1.2, zero gradient.
        let env = EnvParams::BitstringRepair {
            length: 1,
            hint_corruption: 0.0,
        };
        let pol = LinearSoftmaxPolicy::new(&env);
        let theta = ParamVector::zeros(pol.dim(), ParamRole::Current);
        let task = BaseTask::new(0, 0, env.clone()).unwrap();
        let obs = reset(&task, &History::new(), Mode::Base).unwrap();
        let logp = pol.log_prob(&theta, &obs, &[1]).unwrap()[0];
        let resp = SampledResponse {
            tokens: vec![1],
            logps: vec![logp - 1.5f64.ln()],
            valid: true,
        };
        let group = RolloutGroup {
            instance_id: 0,
            rollouts: vec![
                rollout_of(obs.clone(), resp.clone(), 1.0, true),
                rollout_of(obs, resp, 0.0, false),
            ],
            old_params_id: 0,
        };
        let mask = GroupMask {
            in_baseline: vec![true, true],
            trainable: vec![true, false],
        };
        let adv = AdvantageVector {
            values: vec![1.0, 0.0],
            degenerate: false,
        };
        let cfg = SurrogateConfig {
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            ..Default::default()
        };
        let out = surrogate_loss_and_grad(&pol, &group, &mask, &adv, &theta, &theta, &cfg).unwrap();
        assert!((out.objective - 1.2 / 2.0).abs() < 1e-12);
        assert!(out.gradient.iter().all(|&g| g == 0.0));
        assert_eq!(out.clip_fraction, 1.0);
    }

    #[test]
    fn masking_examples() {
        let env = EnvParams::BitstringRepair {
            length: 2,
            hint_corruption: 0.0,
        };
        let pol = LinearSoftmaxPolicy::new(&env);
        let old = ParamVector::zeros(pol.dim(), ParamRole::Old);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut group = tiny_group(&pol, &old, &mut rng, &env);
        for (r, v) in group.rollouts.iter_mut().zip([1.0, 0.0, 0.5, 0.0]) {
            r.reward = v;
        }
        let all = mask_invalid(&group, false);
        assert!(all.trainable.iter().all(|&t| t) && all.in_baseline.iter().all(|&t| t));

        group.rollouts[3].valid = false;
        let m = mask_invalid(&group, false);
        let adv = masked_advantages(&group, &m).unwrap();
        // Subset oracle: standardize [1, 0, 0.5] by hand.
        let mean = 0.5;
        let std = ((0.25 + 0.25 + 0.0) / 3.0f64).sqrt();
        let expected = [(1.0 - mean) / std, (0.0 - mean) / std, 0.0, 0.0];
        assert!(close(&adv.values, &expected));

        let kept = masked_advantages(&group, &mask_invalid(&group, true)).unwrap();
        let full = compute_advantages(&[1.0, 0.0, 0.5, 0.0]).unwrap();
        assert!(close(&kept.values[..3], &full.values[..3]));
        assert_eq!(kept.values[3], 0.0);

        for r in group.rollouts.iter_mut() {
            r.valid = false;
        }
        let m = mask_invalid(&group, false);
        let adv = masked_advantages(&group, &m).unwrap();
        assert!(adv.degenerate);
        let cfg = SurrogateConfig {
            kl_beta: 0.01,
            ..Default::default()
        };
        let theta = ParamVector {
            values: vec![0.3; pol.dim()],
            role: ParamRole::Current,
        };
        let out = surrogate_loss_and_grad(&pol, &group, &m, &adv, &theta, &old, &cfg).unwrap();
        assert!(out.gradient.iter().all(|&g| g == 0.0));
        assert_eq!(out.objective, 0.0);
    }

    #[test]
    fn degenerate_group_keeps_only_kl() {
        let env = EnvParams::BitstringRepair {
            length: 3,
            hint_corruption: 0.1,
        };
        let pol = LinearSoftmaxPolicy::new(&env);
        let old = ParamVector::zeros(pol.dim(), ParamRole::Old);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut group = tiny_group(&pol, &old, &mut rng, &env);
        for r in group.rollouts.iter_mut() {
            r.reward = 0.5;
        }
        let m = mask_invalid(&group, false);
        let adv = masked_advantages(&group, &m).unwrap();
        assert!(adv.degenerate);
        let theta = ParamVector {
            values: vec![0.2; pol.dim()],
            role: ParamRole::Current,
        };
        let cfg = SurrogateConfig {
            kl_beta: 0.05,
            ..Default::default()
        };
        let out = surrogate_loss_and_grad(&pol, &group, &m, &adv, &theta, &old, &cfg).unwrap();
        assert!(out.objective < 0.0);
        assert!(out.gradient.iter().any(|&g| g != 0.0));
        let skip = SurrogateConfig {
            skip_degenerate: true,
            ..cfg
        };
        let out = surrogate_loss_and_grad(&pol, &group, &m, &adv, &theta, &old, &skip).unwrap();
        assert_eq!(out.objective, 0.0);
        assert!(out.gradient.iter().all(|&g| g == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative(t in -20.0f64..0.0, r in -20.0f64..0.0) {
            let k = kl_estimate(&[t], &[r]).unwrap()[0];
            proptest::prop_assert!(k >= 0.0);
        }

        #[test]
        fn ratios_are_positive(n in -30.0f64..0.0, o in -30.0f64..0.0) {
            proptest::prop_assert!(importance_ratios(&[n], &[o]).unwrap()[0] > 0.0);
        }

        #[test]
        fn advantages_are_standardized(rewards in proptest::collection::vec(0.0f64..=1.0, 2..16)) {
            let a = compute_advantages(&rewards).unwrap();
            if !a.degenerate {
                let n = a.values.len() as f64;
                let mean = a.values.iter().sum::<f64>() / n;
                let std = (a.values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                proptest::prop_assert!(mean.abs() < 1e-9);
                proptest::prop_assert!((std - 1.0).abs() < 1e-9);
            }
        }
    }
}
