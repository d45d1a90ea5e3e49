//! Embedding-distance diversity scores and multiplicative advantage scaling.

use crate::error::{Error, Result};
use crate::grpo::AdvantageVector;
use crate::sidp::{EnvParams, History, Token};

/// Distance ranges below this are treated as a homogeneous group.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// Embedding of a single response.
///
/// Bitstrings embed as their bits; key tokens as one-hot vectors. A response
/// of several key tokens concatenates their one-hots.
pub fn embed(tokens: &[Token], env: &EnvParams) -> Result<Vec<f64>> {
    let alphabet = env.alphabet();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= alphabet) {
        return Err(Error::Domain(format!("token {t} outside alphabet of size {alphabet}")));
    }
    Ok(match env {
        EnvParams::BitstringRepair { .. } => tokens.iter().map(|&t| t as f64).collect(),
        EnvParams::MultiTurnKeySequence { vocab, .. } => {
            let mut v = vec![0.0; vocab * tokens.len()];
            for (i, &t) in tokens.iter().enumerate() {
                v[i * vocab + t as usize] = 1.0;
            }
            v
        }
    })
}

/// Fixed-length embedding of a history: the final iterate of every turn,
/// embedded and laid out by turn index, zero for turns not reached.
pub fn embed_history(history: &History, env: &EnvParams) -> Result<Vec<f64>> {
    let per_turn = env.response_len() * if env.alphabet() == 2 { 1 } else { env.alphabet() };
    let mut out = vec![0.0; per_turn * env.turn_count()];
    for (t, tokens) in history.final_tokens().iter().enumerate() {
        if tokens.len() != env.response_len() {
            // Invalid responses embed as zeros.
            continue;
        }
        let e = embed(tokens, env)?;
        out[t * per_turn..(t + 1) * per_turn].copy_from_slice(&e);
    }
    Ok(out)
}

fn centroid_distances(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Structure("embeddings differ in dimension".into()));
    }
    let n = embeddings.len() as f64;
    let mut centroid = vec![0.0; dim];
    for e in embeddings {
        for (c, x) in centroid.iter_mut().zip(e) {
            *c += x;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }
    Ok(embeddings
        .iter()
        .map(|e| {
            e.iter()
                .zip(&centroid)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// `d_i = ‖e_i − ē‖ / (max_j ‖e_j − ē‖ − min_j ‖e_j − ē‖)`; all ones when the
/// distance range vanishes.
pub fn diversity_scores(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    if embeddings.len() < 2 {
        return Err(Error::Structure(format!(
            "diversity needs at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let dist = centroid_distances(embeddings)?;
    let max = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range < DEGENERATE_RANGE {
        return Ok(vec![1.0; dist.len()]);
    }
    Ok(dist.iter().map(|d| d / range).collect())
}

/// `A'_i = d_i · A_i`.
pub fn scale_advantages(advantages: &AdvantageVector, scores: &[f64]) -> Result<AdvantageVector> {
    if advantages.values.len() != scores.len() {
        return Err(Error::Structure(format!(
            "{} advantages but {} diversity scores",
            advantages.values.len(),
            scores.len()
        )));
    }
    if advantages.degenerate {
        return Ok(advantages.clone());
    }
    Ok(AdvantageVector {
        values: advantages.values.iter().zip(scores).map(|(a, d)| a * d).collect(),
        degenerate: false,
    })
}
