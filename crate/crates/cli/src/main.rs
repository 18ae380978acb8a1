use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use netmerge::arch::Arch;
use netmerge::compression::{compress, compression_report, report_csv};
use netmerge::data::{ImageConfig, SineConfig};
use netmerge::experiment::{load_reports, run_experiment, ExperimentConfig, Task};
use netmerge::merging::merge_networks;
use netmerge::stats::{aggregate, aggregate_csv, aggregate_text, emit_plot_data, PlotKind};
use netmerge::strategies::{
    evaluate, stage, stage_rng, train_phase, train_validation, Phase, PhaseKind, Strategy,
};
use netmerge::Network;

#[derive(Parser)]
#[command(name = "netmerge", version, about = "Train, merge, gate, compress and benchmark networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Sine,
    Image,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task used when no config is given.
    #[arg(long, value_enum, default_value = "sine")]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => default_config(self.task),
        };
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

fn default_config(task: TaskArg) -> ExperimentConfig {
    match task {
        TaskArg::Sine => ExperimentConfig {
            task: Task::Sine(SineConfig::default()),
            ..Default::default()
        },
        TaskArg::Image => {
            let mut cfg = ExperimentConfig {
                task: Task::Image(ImageConfig::default()),
                arch: Arch::Lenet { classes: 10 },
                ..Default::default()
            };
            cfg.training.eval_metric = netmerge::strategies::Metric::Accuracy;
            cfg
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one teacher from scratch.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Which of the two teacher streams to draw from.
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
        index: u8,
        /// Epochs; a third of the budget by default.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concatenate two teachers into a gated big student.
    Merge {
        first: PathBuf,
        second: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train weights and gates of a big student under the half-open penalty.
    TrainGates {
        big: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Epochs; a sixth of the budget by default.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the more important half of every gated layer.
    Compress {
        big: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-unit CSV of open probabilities and kept flags.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fine-tune a compressed student.
    Finetune {
        student: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Epochs; a sixth of the budget by default.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run whole strategies over many seeds and write one report per run.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// `student`, `bo3`, `one_model` or `all`; defaults to the config's list.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        /// Overrides the training budget.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the reports of an experiment directory.
    Report { dir: PathBuf },
}

fn save(net: &Network, path: &Path) -> Result<()> {
    net.save(path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn phase_epochs(cfg: &ExperimentConfig, given: Option<usize>, divisor: usize) -> usize {
    given.unwrap_or(cfg.training.total_epochs / divisor)
}

fn train_stage(
    net: &mut Network,
    cfg: &ExperimentConfig,
    phase: Phase,
    epochs: usize,
    gated: bool,
    rng_stage: u64,
) -> Result<()> {
    let train_cfg = cfg.run_config(Strategy::Student, cfg.seed);
    let data = cfg.task.data(cfg.data_seed.unwrap_or(cfg.seed))?;
    let (train, val) = train_validation(&train_cfg, &data)?;
    let kind = if gated { PhaseKind::Gated(&train_cfg.lambda) } else { PhaseKind::Weights };
    let losses = train_phase(net, &train, &train_cfg, phase, epochs, kind, &mut stage_rng(cfg.seed, rng_stage))?;
    if let Some(last) = losses.last() {
        eprintln!("{} epochs, final train loss {last:.5}", losses.len());
    }
    let target = if val.is_empty() { &data.test } else { &val };
    if !gated {
        eprintln!("validation {:?}: {:.5}", train_cfg.eval_metric, evaluate(net, target, train_cfg.eval_metric)?);
    }
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let reports = load_reports(dir)?;
    if reports.is_empty() {
        bail!("{}: no run reports found", dir.display());
    }
    let table = aggregate(&reports)?;
    let write = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    write("aggregate.csv", aggregate_csv(&table))?;
    write("boxplot.csv", emit_plot_data(&reports, PlotKind::Boxplot)?)?;
    write("curves.csv", emit_plot_data(&reports, PlotKind::Curves)?)?;
    let metric = reports[0].metric;
    print!("{}", aggregate_text(&table, &format!("test {metric:?} over {} runs", reports.len())));
    Ok(())
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainTeacher {
            common,
            index,
            epochs,
            out,
        } => {
            let cfg = common.experiment()?;
            let s = if index == 0 { stage::TEACHER_A } else { stage::TEACHER_B };
            let mut net = cfg.arch.build(&mut stage_rng(cfg.seed, s))?;
            train_stage(&mut net, &cfg, Phase::Teacher, phase_epochs(&cfg, epochs, 3), false, s)?;
            save(&net, &out)?;
        }
        Command::Merge {
            first,
            second,
            common,
            out,
        } => {
            let cfg = common.experiment()?;
            let (a, b) = (Network::load(&first)?, Network::load(&second)?);
            let big = merge_networks(&a, &b, &cfg.training.gates.init(), &mut stage_rng(cfg.seed, stage::MERGE))?;
            save(&big, &out)?;
        }
        Command::TrainGates {
            big,
            common,
            epochs,
            out,
        } => {
            let cfg = common.experiment()?;
            let mut net = Network::load(&big)?;
            train_stage(&mut net, &cfg, Phase::Importance, phase_epochs(&cfg, epochs, 6), true, stage::IMPORTANCE)?;
            for (id, g) in net.gates() {
                eprintln!("{id}: mean p_open {:.4}", g.mean_p_open());
            }
            save(&net, &out)?;
        }
        Command::Compress { big, out, report } => {
            let net = Network::load(&big)?;
            let small = compress(&net)?;
            if let Some(path) = report {
                std::fs::write(&path, report_csv(&compression_report(&net)?))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            save(&small, &out)?;
        }
        Command::Finetune {
            student,
            common,
            epochs,
            out,
        } => {
            let cfg = common.experiment()?;
            let mut net = Network::load(&student)?;
            if net.has_gates() {
                bail!("{}: fine-tuning expects a compressed network without gates", student.display());
            }
            train_stage(&mut net, &cfg, Phase::Finetune, phase_epochs(&cfg, epochs, 6), false, stage::FINETUNE)?;
            save(&net, &out)?;
        }
        Command::Experiment {
            common,
            strategy,
            runs,
            epochs,
            out,
        } => {
            let mut cfg = common.experiment()?;
            match strategy.as_deref() {
                None => {}
                Some("all") => cfg.strategies = Strategy::ALL.to_vec(),
                Some(s) => cfg.strategies = vec![s.parse()?],
            }
            if let Some(r) = runs {
                cfg.runs = r;
            }
            if let Some(e) = epochs {
                cfg.training.total_epochs = e;
            }
            let results = run_experiment(&cfg, Some(&out))?;
            let mut ok = true;
            for r in &results {
                match &r.outcome {
                    Ok(rep) => eprintln!(
                        "{} seed {}: test {:.5} ({:.1}s)",
                        r.strategy.name(),
                        r.seed,
                        rep.test_metric,
                        rep.wall_time_s
                    ),
                    Err(e) => {
                        ok = false;
                        eprintln!("{} seed {}: FAILED: {e}", r.strategy.name(), r.seed);
                    }
                }
            }
            if ok {
                report(&out)?;
            }
            return Ok(ok);
        }
        Command::Report { dir } => report(&dir)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            // core errors already print their source inline
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
