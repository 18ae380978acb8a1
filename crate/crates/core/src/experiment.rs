//! The experiment driver: many seeded runs of one or more strategies, with
//! one JSON report per run.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::data::{image_dataset, sine_dataset, ImageConfig, SineConfig, TaskData};
use crate::error::{Error, Result};
use crate::strategies::{predict_all, run, Metric, RunReport, Strategy, StrategyConfig};
use crate::tensor::Tensor;

/// Points of the prediction curve stored with every sine run.
pub const CURVE_POINTS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    Sine(SineConfig),
    Image(ImageConfig),
}

impl Task {
    pub fn data(&self, seed: u64) -> Result<TaskData> {
        match self {
            Task::Sine(c) => sine_dataset(c, seed),
            Task::Image(c) => image_dataset(c, seed),
        }
    }

    pub fn metric(&self) -> Metric {
        match self {
            Task::Sine(_) => Metric::Mse,
            Task::Image(_) => Metric::Accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub arch: Arch,
    pub strategies: Vec<Strategy>,
    /// Template for every run; `strategy` and `seed` are overwritten.
    pub training: StrategyConfig,
    pub runs: usize,
    /// Run `i` uses seed `seed + i`.
    pub seed: u64,
    /// Dataset seed shared by all runs; each run draws its own data when unset.
    pub data_seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Sine(SineConfig::default()),
            arch: Arch::sine(),
            strategies: Strategy::ALL.to_vec(),
            training: StrategyConfig::default(),
            runs: 50,
            seed: 0,
            data_seed: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let format = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| format(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| format(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs", "must be positive"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "must name at least one strategy"));
        }
        if self.training.eval_metric != self.task.metric() {
            return Err(Error::config("training.eval_metric", "does not match the task"));
        }
        for s in &self.strategies {
            self.run_config(*s, self.seed).validate()?;
        }
        Ok(())
    }

    /// The training config of one run.
    pub fn run_config(&self, strategy: Strategy, seed: u64) -> StrategyConfig {
        StrategyConfig {
            strategy,
            seed,
            ..self.training.clone()
        }
    }

    /// Every `(strategy, seed)` pair, strategies outermost.
    pub fn jobs(&self) -> Vec<(Strategy, u64)> {
        self.strategies
            .iter()
            .flat_map(|&s| (0..self.runs as u64).map(move |i| (s, self.seed.wrapping_add(i))))
            .collect()
    }
}

/// Location of one run's report below `out`.
pub fn report_path(out: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    out.join("runs").join(strategy.name()).join(format!("{seed}.json"))
}

/// `n` equally spaced points on `[0, 1]`.
pub fn unit_grid(n: usize) -> Tensor {
    let xs = (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect();
    Tensor::new(vec![n, 1], xs).expect("grid shape")
}

/// One full run, with its prediction curve for sine tasks.
pub fn run_one(cfg: &ExperimentConfig, strategy: Strategy, seed: u64) -> Result<RunReport> {
    let data = cfg.task.data(cfg.data_seed.unwrap_or(seed))?;
    let (net, mut report) = run(&cfg.run_config(strategy, seed), &cfg.arch, &data)?;
    if let Task::Sine(_) = cfg.task {
        let grid = unit_grid(CURVE_POINTS);
        let y = predict_all(&net, &grid)?;
        report.curve = Some(grid.data().iter().zip(y.data()).map(|(&x, &y)| [x, y]).collect());
    }
    Ok(report)
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Outcome of one job.
#[derive(Debug)]
pub struct JobResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub outcome: Result<RunReport>,
}

/// Runs every job in parallel, writing each finished report under `out`
/// when given. Results come back in job order.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<JobResult>> {
    cfg.validate()?;
    Ok(cfg
        .jobs()
        .into_par_iter()
        .map(|(strategy, seed)| {
            let outcome = run_one(cfg, strategy, seed).and_then(|r| {
                if let Some(dir) = out {
                    write_report(&report_path(dir, strategy, seed), &r)?;
                }
                Ok(r)
            });
            JobResult { strategy, seed, outcome }
        })
        .collect())
}

/// Every report under `dir/runs`, sorted by strategy then seed.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let runs = dir.join("runs");
    let mut reports = Vec::new();
    let entries = std::fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))?;
    for sub in entries {
        let sub = sub.map_err(|e| Error::io(&runs, e))?.path();
        if !sub.is_dir() {
            continue;
        }
        for file in std::fs::read_dir(&sub).map_err(|e| Error::io(&sub, e))? {
            let path = file.map_err(|e| Error::io(&sub, e))?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let r: RunReport = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            reports.push(r);
        }
    }
    reports.sort_by_key(|r| (r.strategy, r.seed));
    Ok(reports)
}
