//! Budget-matched training strategies: the merged student, best of three and
//! a single long-trained model.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Arch;
use crate::compression::compress;
use crate::data::{Dataset, TaskData, Targets};
use crate::error::{Error, Result};
use crate::gates::{total_loss, HardConcrete, LambdaSchedule};
use crate::merging::{merge_networks, GateInit};
use crate::network::{GateMode, Mode, Network, Trainable};
use crate::optim::Sgd;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Student,
    Bo3,
    OneModel,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Student, Strategy::Bo3, Strategy::OneModel];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Student => "student",
            Strategy::Bo3 => "bo3",
            Strategy::OneModel => "one_model",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    Accuracy,
}

impl Metric {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Mse => a < b,
            Metric::Accuracy => a > b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    Importance,
    Finetune,
    Bo3,
    OneModel,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Importance => "importance",
            Phase::Finetune => "finetune",
            Phase::Bo3 => "bo3",
            Phase::OneModel => "one_model",
        }
    }
}

/// Learning-rate drops per phase as `(epoch, lr)`: from `epoch` on (counted
/// within the phase) the rate is `lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrDrops {
    pub teacher: Vec<(usize, f64)>,
    pub importance: Vec<(usize, f64)>,
    pub finetune: Vec<(usize, f64)>,
    pub bo3: Vec<(usize, f64)>,
    pub one_model: Vec<(usize, f64)>,
}

impl Default for LrDrops {
    fn default() -> Self {
        LrDrops {
            teacher: vec![(250, 0.001)],
            importance: Vec::new(),
            finetune: vec![(100, 0.001)],
            bo3: vec![(250, 0.001)],
            one_model: vec![(800, 0.001)],
        }
    }
}

impl LrDrops {
    pub fn get(&self, phase: Phase) -> &[(usize, f64)] {
        match phase {
            Phase::Teacher => &self.teacher,
            Phase::Importance => &self.importance,
            Phase::Finetune => &self.finetune,
            Phase::Bo3 => &self.bo3,
            Phase::OneModel => &self.one_model,
        }
    }
}

/// Gate settings of the importance phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub log_alpha_mean: f64,
    pub log_alpha_std: f64,
    /// Learning rate of the log-alphas; the phase schedule when absent.
    /// The L_half gradient of one gate shrinks with the layer width, so the
    /// default is well above the weight learning rate.
    pub lr: Option<f64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        let hc = HardConcrete::default();
        let init = GateInit::default();
        GateConfig {
            beta: hc.beta,
            gamma: hc.gamma,
            zeta: hc.zeta,
            log_alpha_mean: init.log_alpha_mean,
            log_alpha_std: init.log_alpha_std,
            lr: Some(0.3),
        }
    }
}

impl GateConfig {
    pub fn init(&self) -> GateInit {
        GateInit {
            constants: HardConcrete {
                beta: self.beta,
                gamma: self.gamma,
                zeta: self.zeta,
            },
            log_alpha_mean: self.log_alpha_mean,
            log_alpha_std: self.log_alpha_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub total_epochs: usize,
    pub lr_start: f64,
    pub momentum: f64,
    pub lr_drops: LrDrops,
    pub lambda: LambdaSchedule,
    pub gates: GateConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_metric: Metric,
    /// Share of the training data held out for model selection.
    pub validation_fraction: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            strategy: Strategy::Student,
            total_epochs: 900,
            lr_start: 0.01,
            momentum: 0.9,
            lr_drops: LrDrops::default(),
            lambda: LambdaSchedule::default(),
            gates: GateConfig::default(),
            batch_size: 128,
            seed: 0,
            eval_metric: Metric::Mse,
            validation_fraction: 0.1,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be a positive number, got {v}")))
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        let divisor = match self.strategy {
            Strategy::Student => 6,
            Strategy::Bo3 => 3,
            Strategy::OneModel => 1,
        };
        if self.total_epochs == 0 || !self.total_epochs.is_multiple_of(divisor) {
            return Err(Error::config(
                "total_epochs",
                format!(
                    "{} is not a positive multiple of {divisor} as {} needs",
                    self.total_epochs,
                    self.strategy.name()
                ),
            ));
        }
        positive("lr_start", self.lr_start)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        for phase in [Phase::Teacher, Phase::Importance, Phase::Finetune, Phase::Bo3, Phase::OneModel] {
            let field = format!("lr_drops.{}", phase.name());
            let drops = self.lr_drops.get(phase);
            if drops.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::config(field, "epochs must be strictly increasing"));
            }
            for (_, lr) in drops {
                positive(&field, *lr)?;
            }
        }
        self.lambda.validate()?;
        self.gates.init().constants.validate().map_err(|e| Error::config("gates", e.to_string()))?;
        if !self.gates.log_alpha_mean.is_finite() {
            return Err(Error::config("gates.log_alpha_mean", "must be finite"));
        }
        if !(self.gates.log_alpha_std >= 0.0 && self.gates.log_alpha_std.is_finite()) {
            return Err(Error::config("gates.log_alpha_std", "must be non-negative"));
        }
        if let Some(lr) = self.gates.lr {
            positive("gates.lr", lr)?;
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let needs_val = self.strategy == Strategy::Bo3;
        let lo_ok = if needs_val {
            self.validation_fraction > 0.0
        } else {
            self.validation_fraction >= 0.0
        };
        if !(lo_ok && self.validation_fraction < 1.0) {
            return Err(Error::config(
                "validation_fraction",
                "must lie in [0, 1), and be positive for bo3",
            ));
        }
        Ok(())
    }

    /// Reads a TOML or JSON config (by extension) and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: StrategyConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
        } else {
            toml::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Epochs of every phase of the configured strategy, in order.
    pub fn phase_plan(&self) -> Vec<(Phase, usize)> {
        let t = self.total_epochs;
        match self.strategy {
            Strategy::Student => vec![
                (Phase::Teacher, t / 3),
                (Phase::Teacher, t / 3),
                (Phase::Importance, t / 6),
                (Phase::Finetune, t / 6),
            ],
            Strategy::Bo3 => vec![(Phase::Bo3, t / 3); 3],
            Strategy::OneModel => vec![(Phase::OneModel, t)],
        }
    }
}

/// Learning rate at `epoch` (counted from 0 within the phase).
pub fn lr_at(cfg: &StrategyConfig, phase: Phase, epoch: usize) -> f64 {
    cfg.lr_drops
        .get(phase)
        .iter()
        .take_while(|(e, _)| epoch >= *e)
        .last()
        .map_or(cfg.lr_start, |(_, lr)| *lr)
}

/// Seed of one pipeline stage, derived from the master seed by splitmix64.
pub fn derive_seed(master: u64, stage: u64) -> u64 {
    let mut z = master.wrapping_add(stage.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stage numbers fed to [`derive_seed`].
pub mod stage {
    pub const SPLIT: u64 = 0;
    pub const TEACHER_A: u64 = 1;
    pub const TEACHER_B: u64 = 2;
    pub const MERGE: u64 = 3;
    pub const IMPORTANCE: u64 = 4;
    pub const FINETUNE: u64 = 5;
    /// Candidates `k = 0, 1, 2` use `BO3 + k`.
    pub const BO3: u64 = 6;
    pub const ONE_MODEL: u64 = 9;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub start_epoch: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub total_epochs: usize,
    /// Optimizer epochs actually run, summed over phases.
    pub epochs_used: usize,
    pub phases: Vec<PhaseRecord>,
    /// Mean error loss of every epoch, phases concatenated.
    pub train_loss: Vec<f64>,
    pub metric: Metric,
    pub test_metric: f64,
    /// Validation metric of each trained candidate (bo3) or the final model.
    pub validation_metrics: Vec<f64>,
    pub selected: Option<usize>,
    /// Mean open probability per gate after the importance phase.
    pub mean_p_open: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    /// Predictions on an input grid, filled in by the experiment driver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<[f64; 2]>>,
}

fn batch_loss(tape: &mut Tape, out: Var, y: &Targets, rows: &[usize]) -> Result<Var> {
    match y {
        Targets::Values(t) => {
            let target = tape.constant(&t.select_rows(rows));
            tape.mse(out, target)
        }
        Targets::Labels(l) => {
            let labels: Vec<usize> = rows.iter().map(|&r| l[r]).collect();
            tape.cross_entropy(out, &labels)
        }
    }
}

/// Which parameters a phase trains.
#[derive(Clone, Copy, Debug)]
pub enum PhaseKind<'a> {
    /// All weights, gates off.
    Weights,
    /// Weights and gates under `error + λ·Σ L_half`, stochastic gates.
    Gated(&'a LambdaSchedule),
    /// Gates only under `λ·Σ L_half`, weights frozen.
    GatesOnly(&'a LambdaSchedule),
}

/// Trains `net` on `data` for `epochs` epochs and returns the mean error
/// loss of each epoch.
pub fn train_phase(
    net: &mut Network,
    data: &Dataset,
    cfg: &StrategyConfig,
    phase: Phase,
    epochs: usize,
    kind: PhaseKind<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let gate_count = net.gates().len();
    let trainable = match kind {
        PhaseKind::Weights => Trainable::Weights,
        PhaseKind::Gated(_) => Trainable::All,
        PhaseKind::GatesOnly(_) => Trainable::Gates,
    };
    if !matches!(kind, PhaseKind::Weights) && gate_count == 0 {
        return Err(Error::contract("gate training needs a gated network"));
    }
    let mut weight_opt = Sgd::new(cfg.momentum);
    let mut gate_opt = Sgd::new(cfg.momentum);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = lr_at(cfg, phase, epoch);
        let gate_lr = cfg.gates.lr.unwrap_or(lr);
        let lambda = match kind {
            PhaseKind::Weights => 0.0,
            PhaseKind::Gated(s) | PhaseKind::GatesOnly(s) => s.at(epoch),
        };
        let mut sum = 0.0;
        let batches = data.batches(cfg.batch_size, rng);
        for rows in &batches {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, trainable);
            let x = tape.constant(&data.x.select_rows(rows));
            let mut gate_mode = match kind {
                PhaseKind::Weights => GateMode::Off,
                _ => GateMode::Stochastic(rng),
            };
            let fwd = net.forward(&mut tape, &bound, x, Mode::Train, &mut gate_mode)?;
            let err = batch_loss(&mut tape, fwd.output, &data.y, rows)?;
            let loss = match kind {
                PhaseKind::Weights => err,
                PhaseKind::Gated(_) | PhaseKind::GatesOnly(_) => {
                    let gates: Vec<(Var, HardConcrete)> = bound
                        .gate_vars()
                        .map(|(id, v)| (v, net.gates()[&id].constants))
                        .collect();
                    let zero = tape.constant(&Tensor::scalar(0.0));
                    let base = if matches!(kind, PhaseKind::GatesOnly(_)) { zero } else { err };
                    total_loss(&mut tape, base, &gates, lambda)?
                }
            };
            sum += tape.scalar(err);
            tape.backward(loss)?;
            net.accumulate_grads(&tape, &bound)?;
            if !matches!(kind, PhaseKind::GatesOnly(_)) {
                net.apply_norm_stats(&fwd.norm_stats);
            }
            let mut params = net.parameters_mut();
            let split = params.len() - gate_count;
            let (weights, gates) = params.split_at_mut(split);
            if !matches!(kind, PhaseKind::GatesOnly(_)) {
                weight_opt.step(weights, lr)?;
            }
            if !matches!(kind, PhaseKind::Weights) {
                gate_opt.step(gates, gate_lr)?;
            }
        }
        let mean = sum / batches.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Domain(format!("{} epoch {epoch}: loss diverged", phase.name())));
        }
        losses.push(mean);
    }
    Ok(losses)
}

/// Eval-mode predictions in chunks of 256 samples.
pub fn predict_all(net: &Network, x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(256) {
        let rows: Vec<usize> = (start..n.min(start + 256)).collect();
        let y = net.predict(&x.select_rows(&rows), &mut GateMode::Off)?;
        shape = y.shape().to_vec();
        data.extend_from_slice(y.data());
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Mean squared error or accuracy of `net` on `data`.
pub fn evaluate(net: &Network, data: &Dataset, metric: Metric) -> Result<f64> {
    let pred = predict_all(net, &data.x)?;
    match (metric, &data.y) {
        (Metric::Mse, Targets::Values(t)) => {
            if pred.shape() != t.shape() {
                return Err(Error::dim(format!("predictions {:?} vs targets {:?}", pred.shape(), t.shape())));
            }
            Ok(pred.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64)
        }
        (Metric::Accuracy, Targets::Labels(l)) => {
            let k = pred.shape()[1];
            let hits = pred
                .data()
                .chunks(k)
                .zip(l)
                .filter(|(row, &label)| {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                    best.0 == label
                })
                .count();
            Ok(hits as f64 / l.len() as f64)
        }
        _ => Err(Error::config("eval_metric", "does not match the task's targets")),
    }
}

/// Generator of one pipeline stage.
pub fn stage_rng(master: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stage))
}

fn rng_for(cfg: &StrategyConfig, stage: u64) -> ChaCha8Rng {
    stage_rng(cfg.seed, stage)
}

/// Training and validation portions of the task's training data.
pub fn train_validation(cfg: &StrategyConfig, data: &TaskData) -> Result<(Dataset, Dataset)> {
    data.train.split(cfg.validation_fraction, &mut rng_for(cfg, stage::SPLIT))
}

struct Recorder {
    started: Instant,
    report: RunReport,
}

impl Recorder {
    fn new(cfg: &StrategyConfig) -> Self {
        Recorder {
            started: Instant::now(),
            report: RunReport {
                strategy: cfg.strategy,
                seed: cfg.seed,
                total_epochs: cfg.total_epochs,
                epochs_used: 0,
                phases: Vec::new(),
                train_loss: Vec::new(),
                metric: cfg.eval_metric,
                test_metric: f64::NAN,
                validation_metrics: Vec::new(),
                selected: None,
                mean_p_open: BTreeMap::new(),
                wall_time_s: 0.0,
                curve: None,
            },
        }
    }

    fn phase(&mut self, phase: Phase, losses: Vec<f64>) {
        self.report.phases.push(PhaseRecord {
            phase,
            start_epoch: self.report.epochs_used,
            epochs: losses.len(),
        });
        self.report.epochs_used += losses.len();
        self.report.train_loss.extend(losses);
    }

    fn finish(mut self, net: &Network, cfg: &StrategyConfig, test: &Dataset) -> Result<RunReport> {
        let m = evaluate(net, test, cfg.eval_metric)?;
        if !m.is_finite() {
            return Err(Error::Domain("test metric is not finite".into()));
        }
        self.report.test_metric = m;
        self.report.wall_time_s = self.started.elapsed().as_secs_f64();
        Ok(self.report)
    }
}

fn expect_strategy(cfg: &StrategyConfig, s: Strategy) -> Result<()> {
    cfg.validate()?;
    if cfg.strategy != s {
        return Err(Error::config(
            "strategy",
            format!("config is for {}, not {}", cfg.strategy.name(), s.name()),
        ));
    }
    Ok(())
}

/// Trains one model from scratch for `epochs` epochs.
fn fresh_model(
    arch: &Arch,
    cfg: &StrategyConfig,
    train: &Dataset,
    phase: Phase,
    epochs: usize,
    stage: u64,
) -> Result<(Network, Vec<f64>)> {
    let mut rng = rng_for(cfg, stage);
    let mut net = arch.build(&mut rng)?;
    let losses = train_phase(&mut net, train, cfg, phase, epochs, PhaseKind::Weights, &mut rng)?;
    Ok((net, losses))
}

/// Two teachers, merge, importance training, compression, fine-tuning.
pub fn run_student(cfg: &StrategyConfig, arch: &Arch, data: &TaskData) -> Result<(Network, RunReport)> {
    expect_strategy(cfg, Strategy::Student)?;
    let mut rec = Recorder::new(cfg);
    let (train, val) = train_validation(cfg, data)?;
    let t = cfg.total_epochs;
    let (a, la) = fresh_model(arch, cfg, &train, Phase::Teacher, t / 3, stage::TEACHER_A)?;
    rec.phase(Phase::Teacher, la);
    let (b, lb) = fresh_model(arch, cfg, &train, Phase::Teacher, t / 3, stage::TEACHER_B)?;
    rec.phase(Phase::Teacher, lb);

    let mut big = merge_networks(&a, &b, &cfg.gates.init(), &mut rng_for(cfg, stage::MERGE))?;
    let mut rng = rng_for(cfg, stage::IMPORTANCE);
    let li = train_phase(&mut big, &train, cfg, Phase::Importance, t / 6, PhaseKind::Gated(&cfg.lambda), &mut rng)?;
    rec.phase(Phase::Importance, li);
    rec.report.mean_p_open = big.gates().iter().map(|(id, g)| (id.to_string(), g.mean_p_open())).collect();

    let mut student = compress(&big)?;
    let mut rng = rng_for(cfg, stage::FINETUNE);
    let lf = train_phase(&mut student, &train, cfg, Phase::Finetune, t / 6, PhaseKind::Weights, &mut rng)?;
    rec.phase(Phase::Finetune, lf);
    if !val.is_empty() {
        rec.report.validation_metrics.push(evaluate(&student, &val, cfg.eval_metric)?);
    }
    let report = rec.finish(&student, cfg, &data.test)?;
    Ok((student, report))
}

/// Three independent models of `total/3` epochs; the best on validation wins.
pub fn run_bo3(cfg: &StrategyConfig, arch: &Arch, data: &TaskData) -> Result<(Network, RunReport)> {
    expect_strategy(cfg, Strategy::Bo3)?;
    let mut rec = Recorder::new(cfg);
    let (train, val) = train_validation(cfg, data)?;
    let mut best: Option<(usize, f64, Network)> = None;
    for k in 0..3 {
        let (net, losses) = fresh_model(arch, cfg, &train, Phase::Bo3, cfg.total_epochs / 3, stage::BO3 + k as u64)?;
        rec.phase(Phase::Bo3, losses);
        let m = evaluate(&net, &val, cfg.eval_metric)?;
        rec.report.validation_metrics.push(m);
        if best.as_ref().is_none_or(|(_, bm, _)| cfg.eval_metric.better(m, *bm)) {
            best = Some((k, m, net));
        }
    }
    let (k, _, net) = best.expect("three candidates");
    rec.report.selected = Some(k);
    let report = rec.finish(&net, cfg, &data.test)?;
    Ok((net, report))
}

/// One model trained for the whole budget.
pub fn run_one_model(cfg: &StrategyConfig, arch: &Arch, data: &TaskData) -> Result<(Network, RunReport)> {
    expect_strategy(cfg, Strategy::OneModel)?;
    let mut rec = Recorder::new(cfg);
    let (train, val) = train_validation(cfg, data)?;
    let (net, losses) = fresh_model(arch, cfg, &train, Phase::OneModel, cfg.total_epochs, stage::ONE_MODEL)?;
    rec.phase(Phase::OneModel, losses);
    if !val.is_empty() {
        rec.report.validation_metrics.push(evaluate(&net, &val, cfg.eval_metric)?);
    }
    let report = rec.finish(&net, cfg, &data.test)?;
    Ok((net, report))
}

/// Dispatches on `cfg.strategy`.
pub fn run(cfg: &StrategyConfig, arch: &Arch, data: &TaskData) -> Result<(Network, RunReport)> {
    match cfg.strategy {
        Strategy::Student => run_student(cfg, arch, data),
        Strategy::Bo3 => run_bo3(cfg, arch, data),
        Strategy::OneModel => run_one_model(cfg, arch, data),
    }
}
