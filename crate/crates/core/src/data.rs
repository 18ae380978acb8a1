//! Datasets: the noisy sine regression problem and a synthetic image
//! classification stand-in, plus batching and splitting.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Regression targets, `[N, out]`.
    Values(Tensor),
    /// Class indices.
    Labels(Vec<usize>),
}

/// Inputs `[N, ...]` with matching targets. `ids` are stable sample
/// identifiers that survive splitting and batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Targets,
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Targets) -> Result<Self> {
        let n = x.shape()[0];
        let ny = match &y {
            Targets::Values(t) => t.shape()[0],
            Targets::Labels(l) => l.len(),
        };
        if n != ny {
            return Err(Error::dim(format!("{n} inputs with {ny} targets")));
        }
        Ok(Dataset {
            x,
            y,
            ids: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Renumbers the ids to `start..start + len`.
    pub fn with_ids_from(mut self, start: usize) -> Dataset {
        self.ids = (start..start + self.len()).collect();
        self
    }

    /// Samples at `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let y = match &self.y {
            Targets::Values(t) => Targets::Values(t.select_rows(rows)),
            Targets::Labels(l) => Targets::Labels(rows.iter().map(|&r| l[r]).collect()),
        };
        Dataset {
            x: self.x.select_rows(rows),
            y,
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    /// Shuffled split into `(rest, held_out)` with `round(n·fraction)`
    /// samples held out.
    pub fn split<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config("validation_fraction", "must lie in [0, 1)"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let held = (self.len() as f64 * fraction).round() as usize;
        let (h, rest) = order.split_at(held);
        Ok((self.subset(rest), self.subset(h)))
    }

    /// Shuffled minibatches; the last one may be smaller.
    pub fn batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Training and test data of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub noise_std: f64,
    pub frequency: f64,
}

impl Default for SineConfig {
    fn default() -> Self {
        SineConfig {
            train_size: 10_000,
            test_size: 2_000,
            noise_std: 0.2,
            frequency: 10.0 * PI,
        }
    }
}

fn sine_split(n: usize, cfg: &SineConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
    let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| (cfg.frequency * x).sin() + noise.sample(rng)).collect();
    Dataset::new(Tensor::new(vec![n, 1], xs)?, Targets::Values(Tensor::new(vec![n, 1], ys)?))
}

/// `y = sin(10πx) + z` with `x ~ U(0,1)` and `z ~ N(0, 0.2²)`. Train and
/// test draw from separate streams of `seed`; test ids follow the train ids.
pub fn sine_dataset(cfg: &SineConfig, seed: u64) -> Result<TaskData> {
    if cfg.train_size == 0 || cfg.test_size == 0 {
        return Err(Error::config("train_size", "sine sets need at least one sample"));
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(2);
    Ok(TaskData {
        train: sine_split(cfg.train_size, cfg, &mut train_rng)?,
        test: sine_split(cfg.test_size, cfg, &mut test_rng)?.with_ids_from(cfg.train_size),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub classes: usize,
    pub size: usize,
    pub noise_std: f64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            train_per_class: 60,
            test_per_class: 30,
            classes: 10,
            size: 28,
            noise_std: 0.6,
        }
    }
}

/// One `3×size×size` grating of class `c`: orientation and frequency are set
/// by the class, phase and colour mix are random, plus pixel noise.
fn grating<R: Rng + ?Sized>(c: usize, cfg: &ImageConfig, rng: &mut R, noise: &Normal<f64>, out: &mut Vec<f64>) {
    let theta = PI * (c % 5) as f64 / 5.0;
    let freq = if c < 5 { 2.0 } else { 4.0 } * 2.0 * PI / cfg.size as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let colour: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
    let (ct, st) = (theta.cos(), theta.sin());
    for w in colour {
        for i in 0..cfg.size {
            for j in 0..cfg.size {
                let u = ct * i as f64 + st * j as f64;
                out.push(w * (freq * u + phase).sin() + noise.sample(rng));
            }
        }
    }
}

fn image_split(per_class: usize, cfg: &ImageConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config("noise_std", e.to_string()))?;
    let n = per_class * cfg.classes;
    let mut data = Vec::with_capacity(n * 3 * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for c in 0..cfg.classes {
            grating(c, cfg, rng, &noise, &mut data);
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, 3, cfg.size, cfg.size], data)?, Targets::Labels(labels))
}

/// Class-balanced oriented gratings; test ids follow the train ids.
pub fn image_dataset(cfg: &ImageConfig, seed: u64) -> Result<TaskData> {
    if cfg.classes == 0 || cfg.classes > 10 {
        return Err(Error::config("classes", "must lie in 1..=10"));
    }
    if cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::config("train_per_class", "need at least one sample per class"));
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(2);
    Ok(TaskData {
        train: image_split(cfg.train_per_class, cfg, &mut train_rng)?,
        test: image_split(cfg.test_per_class, cfg, &mut test_rng)?.with_ids_from(cfg.train_per_class * cfg.classes),
    })
}
