//! Curriculum-trend and task-diversity summaries of a finished run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trainer::{MetricRecord, RolloutRecord};

/// Quadratic passes over start embeddings use at most this many points.
pub const MAX_PAIRWISE_POINTS: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesTrend {
    pub name: String,
    /// Records where the series is defined.
    pub points: usize,
    pub first_quartile_mean: f64,
    pub last_quartile_mean: f64,
    /// Spearman correlation against iteration.
    pub trend: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub records: usize,
    pub series: Vec<SeriesTrend>,
}

impl CurriculumReport {
    pub fn series(&self, name: &str) -> Option<&SeriesTrend> {
        self.series.iter().find(|s| s.name == name)
    }
}

/// Ranks with ties sharing their average rank (1-based).
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Quartile means and rank trend of `(iteration, value)` points.
pub fn series_trend(name: &str, points: &[(f64, f64)]) -> SeriesTrend {
    let n = points.len();
    let q = (n / 4).max(1).min(n);
    let mean = |s: &[(f64, f64)]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64
        }
    };
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    SeriesTrend {
        name: name.to_string(),
        points: n,
        first_quartile_mean: mean(&points[..q.min(n)]),
        last_quartile_mean: mean(&points[n - q.min(n)..]),
        trend: spearman(&xs, &ys),
    }
}

pub fn curriculum_report(metrics: &[MetricRecord]) -> CurriculumReport {
    type Pick = fn(&MetricRecord) -> Option<f64>;
    let series: [(&str, Pick); 4] = [
        ("sampled_depth", |m| m.sampled_depth),
        ("sampled_start_turn", |m| m.sampled_start_turn),
        ("sampled_recency", |m| m.sampled_recency),
        ("distinct_instances", |m| Some(m.distinct_instances as f64)),
    ];
    CurriculumReport {
        records: metrics.len(),
        series: series
            .iter()
            .map(|(name, pick)| {
                let pts: Vec<(f64, f64)> = metrics
                    .iter()
                    .filter_map(|m| pick(m).map(|v| (m.iteration as f64, v)))
                    .collect();
                series_trend(name, &pts)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Distinct starting points (by content hash) trained on.
    pub distinct_starts: usize,
    pub base_set_size: usize,
    pub relative_factor: f64,
    /// Distinct starting points that were generated rather than base tasks.
    pub generated_starts: usize,
    pub mean_pairwise_cosine: f64,
    pub mean_pairwise_l2: f64,
    /// Embeddings entering the pairwise pass after subsampling.
    pub pairwise_points: usize,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => (1.0 - dot / (na * nb)).clamp(0.0, 2.0),
    }
}

/// Mean pairwise cosine distance and mean pairwise Euclidean distance.
pub fn mean_pairwise_distances(points: &[Vec<f64>]) -> (f64, f64) {
    let n = points.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let (mut cos, mut l2) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            cos += cosine_distance(&points[i], &points[j]);
            l2 += points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    (cos / pairs, l2 / pairs)
}

/// Evenly strided subset of at most `max` items, keeping order.
fn subsample<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max {
        return items.to_vec();
    }
    (0..max).map(|i| items[i * items.len() / max].clone()).collect()
}

pub fn diversity_report(rollouts: &[RolloutRecord], base_set_size: usize) -> DiversityReport {
    if rollouts.is_empty() {
        return DiversityReport {
            base_set_size,
            ..Default::default()
        };
    }
    let mut starts: BTreeMap<u64, Option<&Vec<f64>>> = BTreeMap::new();
    for r in rollouts {
        let entry = starts.entry(r.start_hash).or_insert(None);
        if entry.is_none() {
            *entry = r.start_embedding.as_ref();
        }
    }
    let generated: Vec<Vec<f64>> = starts.values().filter_map(|e| e.cloned()).collect();
    let sample = subsample(&generated, MAX_PAIRWISE_POINTS);
    let (cos, l2) = mean_pairwise_distances(&sample);
    DiversityReport {
        distinct_starts: starts.len(),
        base_set_size,
        relative_factor: if base_set_size == 0 {
            0.0
        } else {
            starts.len() as f64 / base_set_size as f64
        },
        generated_starts: generated.len(),
        mean_pairwise_cosine: cos,
        mean_pairwise_l2: l2,
        pairwise_points: sample.len(),
    }
}
