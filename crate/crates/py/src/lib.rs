//! Python bindings for the ExIt trainer, evaluation and core formulas.
//!
//! Structured results (step outputs, evaluation reports, run reports) cross
//! the boundary as JSON and come out as plain dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

use exit_core::harness::{self, Checkpoint, PolicySampler, RunConfig};
use exit_core::sidp::{BaseTask, Mode, RewardShaping};

fn err(e: exit_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A training run held in memory.
#[pyclass(name = "Trainer", module = "exit_rl")]
struct PyTrainer {
    inner: harness::Trainer,
}

#[pymethods]
impl PyTrainer {
    /// Builds a fresh run from TOML config text.
    #[new]
    #[pyo3(signature = (config, seed=None))]
    fn new(config: &str, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = RunConfig::from_toml_str(config).map_err(err)?;
        if let Some(s) = seed {
            cfg.harness.seed = s;
        }
        Ok(Self {
            inner: harness::Trainer::new(cfg).map_err(err)?,
        })
    }

    /// Resumes from checkpoint JSON.
    #[staticmethod]
    fn from_checkpoint(checkpoint: &str) -> PyResult<Self> {
        let ck = Checkpoint::from_json(checkpoint).map_err(err)?;
        Ok(Self {
            inner: harness::Trainer::from_checkpoint(ck).map_err(err)?,
        })
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().values.clone()
    }

    #[getter]
    fn buffer_size(&self) -> usize {
        self.inner.buffer().map_or(0, |b| b.len())
    }

    /// Runs one iteration; returns `{"metrics", "grpo", "rollouts"}`.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let out = self.inner.step().map_err(err)?;
        to_py(py, &out)
    }

    /// Runs `n` iterations and returns their metric rows.
    fn train<'py>(&mut self, py: Python<'py>, n: u64) -> PyResult<Bound<'py, PyAny>> {
        let mut rows = Vec::with_capacity(n as usize);
        for _ in 0..n {
            rows.push(self.inner.step().map_err(err)?.metrics);
        }
        to_py(py, &rows)
    }

    fn checkpoint(&self) -> PyResult<String> {
        self.inner.checkpoint().to_json().map_err(err)
    }

    /// K-step evaluation on the config's held-out tasks, or on `tasks` (JSON).
    #[pyo3(signature = (k, samples=None, tasks=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        k: usize,
        samples: Option<usize>,
        tasks: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.inner.config();
        let tasks: Vec<BaseTask> = match tasks {
            Some(t) => parse(t)?,
            None => cfg.env.eval_tasks(cfg.harness.eval_tasks).map_err(err)?,
        };
        let sampler = PolicySampler {
            policy: self.inner.policy(),
            params: self.inner.params(),
        };
        let settings = harness::eval_settings(cfg, k, samples.unwrap_or(cfg.harness.eval_samples));
        let report = harness::evaluate_k_step(&sampler, &tasks, &settings).map_err(err)?;
        to_py(py, &report)
    }
}

/// Group-relative advantages; all zeros for a degenerate group.
#[pyfunction]
fn compute_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(exit_core::grpo::compute_advantages(&rewards).map_err(err)?.values)
}

/// Variance of a group's rewards.
#[pyfunction]
fn learnability_score(rewards: Vec<f64>) -> PyResult<f64> {
    exit_core::curriculum::learnability_score(&rewards).map_err(err)
}

/// Range-normalized distances to the group centroid.
#[pyfunction]
fn diversity_scores(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    exit_core::diversity::diversity_scores(&embeddings).map_err(err)
}

/// Reward for one step; `mode` is "base", "improve" or "diverge".
#[pyfunction]
#[pyo3(signature = (prev, new, mode, shaping="delta"))]
fn shaped_reward(prev: f64, new: f64, mode: &str, shaping: &str) -> PyResult<f64> {
    let mode: Mode = parse(&format!("\"{mode}\""))?;
    let shaping: RewardShaping = parse(&format!("\"{shaping}\""))?;
    exit_core::sidp::shaped_iteration_reward(prev, new, mode, shaping).map_err(err)
}

/// Curriculum and diversity summaries of a run directory written by the CLI.
#[pyfunction]
fn report<'py>(py: Python<'py>, run: std::path::PathBuf) -> PyResult<Bound<'py, PyAny>> {
    use harness::io::{read_metrics, read_rollouts, run_path, CONFIG_FILE, METRICS_FILE, ROLLOUTS_FILE};
    let metrics = read_metrics(&run_path(&run, METRICS_FILE)).map_err(err)?;
    let cfg = RunConfig::load(&run_path(&run, CONFIG_FILE)).map_err(err)?;
    let path = run_path(&run, ROLLOUTS_FILE);
    let rollouts = if path.exists() {
        read_rollouts(&path).map_err(err)?
    } else {
        Vec::new()
    };
    #[derive(Serialize)]
    struct Report {
        curriculum: harness::CurriculumReport,
        diversity: harness::DiversityReport,
    }
    to_py(
        py,
        &Report {
            curriculum: harness::curriculum_report(&metrics),
            diversity: harness::diversity_report(&rollouts, cfg.env.train_tasks),
        },
    )
}

#[pymodule]
fn exit_rl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(learnability_score, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_scores, m)?)?;
    m.add_function(wrap_pyfunction!(shaped_reward, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
