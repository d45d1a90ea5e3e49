//! Run directory layout: metric CSVs, rollout JSONL, config copy, checkpoint.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::trainer::{GrpoRecord, MetricRecord, RolloutRecord, StepOutput};
use crate::error::Result;

pub const METRIC_HEADER: &str = "iteration,objective,mean_reward,buffer_size,mean_score,min_score,max_score,sampled_depth,sampled_start_turn,sampled_recency,mode_base,mode_improve,mode_diverge,distinct_instances,clip_fraction,kl_mean";

pub const METRICS_FILE: &str = "metrics.csv";
pub const GRPO_FILE: &str = "grpo.csv";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn run_path(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Into::into)).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    read_csv(path)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_rollouts(path: &Path) -> Result<Vec<RolloutRecord>> {
    read_jsonl(path)
}

/// Serializes records to CSV text with a header row.
pub fn csv_string<T: Serialize>(records: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_writer(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(file))
}

/// Streams step outputs into a run directory.
pub struct RunWriter {
    metrics: csv::Writer<File>,
    grpo: csv::Writer<File>,
    rollouts: Option<BufWriter<File>>,
}

impl RunWriter {
    /// Opens the run files. With `resume_at`, rows from iteration
    /// `resume_at` onward are dropped first so a resumed run appends cleanly.
    pub fn open(dir: &Path, log_rollouts: bool, resume_at: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let append = resume_at.is_some();
        if let Some(it) = resume_at {
            truncate_csv::<MetricRecord>(&run_path(dir, METRICS_FILE), it, |r| r.iteration)?;
            truncate_csv::<GrpoRecord>(&run_path(dir, GRPO_FILE), it, |r| r.iteration)?;
            truncate_jsonl(&run_path(dir, ROLLOUTS_FILE), it)?;
        }
        let rollouts = if log_rollouts {
            let path = run_path(dir, ROLLOUTS_FILE);
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(path)?;
            Some(BufWriter::new(file))
        } else {
            None
        };
        Ok(Self {
            metrics: csv_writer(&run_path(dir, METRICS_FILE), append)?,
            grpo: csv_writer(&run_path(dir, GRPO_FILE), append)?,
            rollouts,
        })
    }

    pub fn write(&mut self, out: &StepOutput) -> Result<()> {
        self.metrics.serialize(&out.metrics)?;
        self.grpo.serialize(&out.grpo)?;
        if let Some(w) = self.rollouts.as_mut() {
            for r in &out.rollouts {
                serde_json::to_writer(&mut *w, r)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.grpo.flush()?;
        if let Some(w) = self.rollouts.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

fn truncate_csv<T: Serialize + DeserializeOwned>(path: &Path, keep_below: u64, iteration: fn(&T) -> u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<T> = read_csv(path)?;
    let kept: Vec<T> = rows.into_iter().filter(|r| iteration(r) < keep_below).collect();
    let text = if kept.is_empty() {
        String::new()
    } else {
        csv_string(&kept)?
    };
    std::fs::write(path, text)?;
    Ok(())
}

fn truncate_jsonl(path: &Path, keep_below: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut text = String::new();
    for line in std::fs::read_to_string(path)?.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["iteration"].as_u64().is_some_and(|i| i < keep_below) {
            text.push_str(line);
            text.push('\n');
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_header_matches_record_fields() {
        let rec = MetricRecord {
            iteration: 0,
            objective: 0.5,
            mean_reward: 0.25,
            buffer_size: 0,
            mean_score: None,
            min_score: None,
            max_score: None,
            sampled_depth: None,
            sampled_start_turn: None,
            sampled_recency: None,
            mode_base: 4,
            mode_improve: 0,
            mode_diverge: 0,
            distinct_instances: 4,
            clip_fraction: 0.0,
            kl_mean: 0.0,
        };
        let text = csv_string(&[rec]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRIC_HEADER);
        assert_eq!(lines.next().unwrap(), "0,0.5,0.25,0,,,,,,,4,0,0,4,0.0,0.0");
    }
}
