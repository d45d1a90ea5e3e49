//! Linear-softmax token policy with exact log-probabilities and gradients.
//!
//! Every response position gets a feature vector; logits are a linear function
//! of it. Binary alphabets use a single logit row (token 0 is pinned at logit
//! 0, i.e. contextual logistic regression). Larger alphabets use one row per
//! token. The score function of a position is `(onehot(token) - softmax) ⊗ f`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sidp::{EnvParams, Mode, Observation, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Current,
    Old,
    Reference,
}

/// Flat policy parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub role: ParamRole,
}

impl ParamVector {
    pub fn zeros(dim: usize, role: ParamRole) -> Self {
        Self {
            values: vec![0.0; dim],
            role,
        }
    }

    pub fn with_role(&self, role: ParamRole) -> Self {
        Self {
            values: self.values.clone(),
            role,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Tokens drawn for one response with their sampling-time log-probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub tokens: Vec<Token>,
    pub logps: Vec<f64>,
    pub valid: bool,
}

/// A stochastic policy whose log-probabilities and score function are exact.
pub trait Policy {
    fn dim(&self) -> usize;

    fn sample_response<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        obs: &Observation,
        rng: &mut R,
    ) -> Result<SampledResponse>;

    fn log_prob(&self, params: &ParamVector, obs: &Observation, tokens: &[Token]) -> Result<Vec<f64>>;

    /// Adds `Σ_t weights[t] · ∇ log π(tokens[t])` into `out`.
    fn accumulate_grad(
        &self,
        params: &ParamVector,
        obs: &Observation,
        tokens: &[Token],
        weights: &[f64],
        out: &mut [f64],
    ) -> Result<()>;

    /// `∇_θ Σ_t log π_θ(tokens[t])`.
    fn grad_log_prob(&self, params: &ParamVector, obs: &Observation, tokens: &[Token]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        let ones = vec![1.0; tokens.len()];
        self.accumulate_grad(params, obs, tokens, &ones, &mut out)?;
        Ok(out)
    }
}

/// Maps observations to per-position feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    env: EnvParams,
}

// Bitstring layout: [bias, hint, base, improve, diverge, hint*iterating,
// prev, feedback*prev, perfect*prev]. The last three are zero in Base mode.
const BIT_FEATURES: usize = 9;

#[inline]
fn signed(bit: f64) -> f64 {
    2.0 * bit - 1.0
}

impl Featurizer {
    pub fn new(env: &EnvParams) -> Self {
        Self { env: env.clone() }
    }

    pub fn feature_dim(&self) -> usize {
        match self.env {
            EnvParams::BitstringRepair { .. } => BIT_FEATURES,
            // [task/turn buckets, turn, prev one-hot, feedback*prev one-hot, base, improve, diverge, bias]
            EnvParams::MultiTurnKeySequence {
                vocab, feature_buckets, ..
            } => feature_buckets + 1 + 2 * vocab + 4,
        }
    }

    pub fn alphabet(&self) -> usize {
        self.env.alphabet()
    }

    /// Number of logit rows: 1 for binary alphabets, else the alphabet size.
    pub fn logit_rows(&self) -> usize {
        match self.alphabet() {
            2 => 1,
            v => v,
        }
    }

    pub fn descriptor(&self) -> String {
        match self.env {
            EnvParams::BitstringRepair { length, .. } => {
                format!("bitstring-linear-v2:L={length}:F={BIT_FEATURES}")
            }
            EnvParams::MultiTurnKeySequence {
                turns,
                vocab,
                feature_buckets,
            } => format!(
                "keyseq-linear-v1:T={turns}:V={vocab}:H={feature_buckets}:F={}",
                self.feature_dim()
            ),
        }
    }

    fn check(&self, obs: &Observation) -> Result<()> {
        if obs.env != self.env {
            return Err(Error::Config(format!(
                "observation environment {:?} does not match policy environment {:?}",
                obs.env, self.env
            )));
        }
        if obs.task_features.len() != self.env.task_feature_len() {
            return Err(Error::Config(format!(
                "expected {} task features, got {}",
                self.env.task_feature_len(),
                obs.task_features.len()
            )));
        }
        Ok(())
    }

    /// One feature vector per response position.
    pub fn position_features(&self, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        self.check(obs)?;
        let mode = obs.mode;
        let iterating = mode != Mode::Base;
        match self.env {
            EnvParams::BitstringRepair { length, .. } => {
                let mut rows = Vec::with_capacity(length);
                for j in 0..length {
                    let mut f = [0.0; BIT_FEATURES];
                    f[0] = 1.0;
                    f[1] = signed(obs.task_features[j]);
                    f[2 + mode.index()] = 1.0;
                    if let (true, Some(prev)) = (iterating, obs.previous.as_ref()) {
                        f[5] = f[1];
                        let p = signed(prev.tokens.get(j).copied().unwrap_or(0).min(1) as f64);
                        f[6] = p;
                        if let Some(fb) = &prev.feedback {
                            f[7] = signed(fb.at(j)) * p;
                            // A perfectly graded iterate is worth keeping whatever the hint says.
                            if fb.at(j) >= 1.0 {
                                f[8] = p;
                            }
                        }
                    }
                    rows.push(f.to_vec());
                }
                Ok(rows)
            }
            EnvParams::MultiTurnKeySequence {
                vocab,
                feature_buckets,
                turns,
            } => {
                let mut f = vec![0.0; self.feature_dim()];
                f[..feature_buckets].copy_from_slice(&obs.task_features[..feature_buckets]);
                f[feature_buckets] = obs.task_features[feature_buckets] / turns as f64;
                let prev_at = feature_buckets + 1;
                if let (true, Some(prev)) = (iterating, obs.previous.as_ref()) {
                    if let Some(&tok) = prev.tokens.first() {
                        let tok = tok as usize;
                        if tok < vocab {
                            f[prev_at + tok] = 1.0;
                            if let Some(fb) = &prev.feedback {
                                f[prev_at + vocab + tok] = signed(fb.at(0));
                            }
                        }
                    }
                }
                let tail = prev_at + 2 * vocab;
                f[tail + mode.index()] = 1.0;
                f[tail + 3] = 1.0;
                Ok(vec![f])
            }
        }
    }
}

/// Numerically stable log-softmax.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Per-position linear-softmax policy.
///
/// In Diverge mode a fixed penalty is subtracted from the logit of the token
/// the previous iterate used at the same position. It stands in for the
/// instruction to produce something different, is not learned, and so leaves
/// the score function unchanged apart from entering the softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    featurizer: Featurizer,
    #[serde(default)]
    divergence_prior: f64,
}

impl LinearSoftmaxPolicy {
    pub fn new(env: &EnvParams) -> Self {
        Self {
            featurizer: Featurizer::new(env),
            divergence_prior: 0.0,
        }
    }

    /// Sets the Diverge-mode repeat penalty (nonnegative, finite).
    pub fn with_divergence_prior(mut self, penalty: f64) -> Result<Self> {
        if !(penalty.is_finite() && penalty >= 0.0) {
            return Err(Error::Config(format!(
                "divergence prior must be finite and >= 0, got {penalty}"
            )));
        }
        self.divergence_prior = penalty;
        Ok(self)
    }

    pub fn divergence_prior(&self) -> f64 {
        self.divergence_prior
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn descriptor(&self) -> String {
        self.featurizer.descriptor()
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.dim() {
            return Err(Error::Config(format!(
                "parameter dimension {} does not match policy dimension {}",
                params.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Token penalized at each position, if any.
    fn repeat_targets(&self, obs: &Observation) -> Vec<Option<usize>> {
        let n = obs.response_len();
        match (obs.mode, obs.previous.as_ref()) {
            (Mode::Diverge, Some(prev)) if self.divergence_prior > 0.0 => (0..n)
                .map(|j| prev.tokens.get(j).map(|&t| t as usize).filter(|&t| t < obs.alphabet()))
                .collect(),
            _ => vec![None; n],
        }
    }

    fn logits(&self, params: &ParamVector, f: &[f64], repeat: Option<usize>) -> Vec<f64> {
        let mut out = self.raw_logits(params, f);
        if let Some(t) = repeat {
            out[t] -= self.divergence_prior;
        }
        out
    }

    fn raw_logits(&self, params: &ParamVector, f: &[f64]) -> Vec<f64> {
        let width = f.len();
        let row = |r: usize| -> f64 {
            params.values[r * width..(r + 1) * width]
                .iter()
                .zip(f)
                .map(|(w, x)| w * x)
                .sum()
        };
        match self.featurizer.logit_rows() {
            1 => vec![0.0, row(0)],
            rows => (0..rows).map(row).collect(),
        }
    }

    /// Log-probabilities of every token at every position.
    pub fn position_log_probs(&self, params: &ParamVector, obs: &Observation) -> Result<Vec<Vec<f64>>> {
        self.check_params(params)?;
        let repeat = self.repeat_targets(obs);
        Ok(self
            .featurizer
            .position_features(obs)?
            .iter()
            .zip(repeat)
            .map(|(f, r)| log_softmax(&self.logits(params, f, r)))
            .collect())
    }

    fn check_tokens(&self, obs: &Observation, tokens: &[Token]) -> Result<()> {
        if tokens.len() != obs.response_len() {
            return Err(Error::Domain(format!(
                "expected {} tokens, got {}",
                obs.response_len(),
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= obs.alphabet()) {
            return Err(Error::Domain(format!(
                "token {t} outside alphabet of size {}",
                obs.alphabet()
            )));
        }
        Ok(())
    }
}

impl Policy for LinearSoftmaxPolicy {
    fn dim(&self) -> usize {
        self.featurizer.logit_rows() * self.featurizer.feature_dim()
    }

    fn sample_response<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        obs: &Observation,
        rng: &mut R,
    ) -> Result<SampledResponse> {
        let table = self.position_log_probs(params, obs)?;
        let mut tokens = Vec::with_capacity(table.len());
        let mut logps = Vec::with_capacity(table.len());
        for lp in &table {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (v, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = v;
                    break;
                }
            }
            tokens.push(pick as Token);
            logps.push(lp[pick]);
        }
        Ok(SampledResponse {
            tokens,
            logps,
            valid: true,
        })
    }

    fn log_prob(&self, params: &ParamVector, obs: &Observation, tokens: &[Token]) -> Result<Vec<f64>> {
        self.check_tokens(obs, tokens)?;
        let table = self.position_log_probs(params, obs)?;
        Ok(table.iter().zip(tokens).map(|(lp, &t)| lp[t as usize]).collect())
    }

    fn accumulate_grad(
        &self,
        params: &ParamVector,
        obs: &Observation,
        tokens: &[Token],
        weights: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        self.check_params(params)?;
        self.check_tokens(obs, tokens)?;
        if weights.len() != tokens.len() || out.len() != self.dim() {
            return Err(Error::Structure("gradient buffer or weight length mismatch".into()));
        }
        let feats = self.featurizer.position_features(obs)?;
        let width = self.featurizer.feature_dim();
        let binary = self.featurizer.logit_rows() == 1;
        let repeat = self.repeat_targets(obs);
        for (((f, &tok), &w), &r) in feats.iter().zip(tokens).zip(weights).zip(&repeat) {
            if w == 0.0 {
                continue;
            }
            let lp = log_softmax(&self.logits(params, f, r));
            if binary {
                let coef = w * ((tok == 1) as u8 as f64 - lp[1].exp());
                for (o, x) in out[..width].iter_mut().zip(f) {
                    *o += coef * x;
                }
            } else {
                for (v, l) in lp.iter().enumerate() {
                    let coef = w * ((tok as usize == v) as u8 as f64 - l.exp());
                    if coef == 0.0 {
                        continue;
                    }
                    for (o, x) in out[v * width..(v + 1) * width].iter_mut().zip(f) {
                        *o += coef * x;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Update rule used by [`apply_update`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient ascent: `θ' = θ + lr · g`.
    Sgd,
}

/// Moment estimates carried between optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        Self {
            kind,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One ascent step along `gradient`.
pub fn apply_update(
    params: &ParamVector,
    gradient: &[f64],
    state: &OptimizerState,
    lr: f64,
) -> Result<(ParamVector, OptimizerState)> {
    if gradient.len() != params.dim() || state.first_moment.len() != params.dim() {
        return Err(Error::Structure(format!(
            "gradient ({}) / moments ({}) / params ({}) length mismatch",
            gradient.len(),
            state.first_moment.len(),
            params.dim()
        )));
    }
    if let Some((i, g)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        let bad = gradient.iter().filter(|g| !g.is_finite()).count();
        return Err(Error::Numeric(format!(
            "non-finite gradient: {bad} of {} entries, first at index {i} = {g}",
            gradient.len()
        )));
    }
    let mut next = state.clone();
    let mut out = params.clone();
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in out.values.iter_mut().zip(gradient) {
                *p += lr * g;
            }
            next.step += 1;
        }
        OptimizerKind::Adam => {
            next.step += 1;
            let t = next.step as i32;
            let c1 = 1.0 - state.beta1.powi(t);
            let c2 = 1.0 - state.beta2.powi(t);
            for (i, &g) in gradient.iter().enumerate() {
                let m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
                let v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
                next.first_moment[i] = m;
                next.second_moment[i] = v;
                out.values[i] += lr * (m / c1) / ((v / c2).sqrt() + state.epsilon);
            }
        }
    }
    Ok((out, next))
}
