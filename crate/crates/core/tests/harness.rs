use std::path::Path;

use netmerge::arch::Arch;
use netmerge::data::{image_dataset, sine_dataset, ImageConfig, SineConfig};
use netmerge::experiment::{load_reports, report_path, run_experiment, ExperimentConfig, Task, CURVE_POINTS};
use netmerge::stats::{aggregate, aggregate_csv, emit_plot_data, summarize, PlotKind};
use netmerge::strategies::{Metric, RunReport, Strategy, StrategyConfig};
use netmerge::Error;

fn fake_report(strategy: Strategy, seed: u64, metric: f64) -> RunReport {
    RunReport {
        strategy,
        seed,
        total_epochs: 6,
        epochs_used: 6,
        phases: Vec::new(),
        train_loss: Vec::new(),
        metric: Metric::Mse,
        test_metric: metric,
        validation_metrics: Vec::new(),
        selected: None,
        mean_p_open: Default::default(),
        wall_time_s: 0.0,
        curve: Some(vec![[0.0, seed as f64], [1.0, metric]]),
    }
}

#[test]
fn statistics_match_scripted_oracle() {
    // expected values from Python's `statistics` module over exact rationals
    let v: Vec<f64> = (0..50).map(|i| 0.05 + 0.3 * ((i as f64 * 0.6180339887498949) % 1.0)).collect();
    let s = summarize(&v).unwrap();
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(s.min, 0.05);
    close(s.max, 0.34361412912433786);
    close(s.median, 0.19361412912433787);
    close(s.mean, 0.19454981731172752);
    close(s.std, 0.0878075703019263);

    let reports: Vec<RunReport> = v.iter().enumerate().map(|(i, &m)| fake_report(Strategy::Bo3, i as u64, m)).collect();
    let csv = emit_plot_data(&reports, PlotKind::Boxplot).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(1).map(|x| x.parse().unwrap()).collect();
    close(row[1], 0.12180706456216894);
    close(row[3], 0.2654211936865068);
}

#[test]
fn aggregate_groups_by_strategy() {
    let reports = vec![
        fake_report(Strategy::OneModel, 0, 0.3),
        fake_report(Strategy::Student, 0, 0.1),
        fake_report(Strategy::OneModel, 1, 0.1),
        fake_report(Strategy::OneModel, 2, 0.2),
    ];
    let table = aggregate(&reports).unwrap();
    assert_eq!(table[0].0, Strategy::Student);
    let one = table[0].1;
    assert_eq!((one.n, one.min, one.max, one.median, one.std), (1, 0.1, 0.1, 0.1, 0.0));
    let om = table[1].1;
    assert!(om.min <= om.median && om.median <= om.max);
    assert!((om.std - 0.1).abs() < 1e-15);
    let csv = aggregate_csv(&table);
    assert_eq!(csv.lines().next(), Some("strategy,n,min,max,median,mean,std"));
    assert!(csv.lines().nth(2).unwrap().starts_with("one_model,3,0.1,0.3,"));

    let curves = emit_plot_data(&reports, PlotKind::Curves).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * reports.len());
    assert_eq!(curves.lines().nth(1), Some("one_model,0,0,0"));
}

#[test]
fn datasets_are_bitwise_reproducible() {
    let s = SineConfig {
        train_size: 300,
        test_size: 50,
        ..Default::default()
    };
    let (a, b) = (sine_dataset(&s, 9).unwrap(), sine_dataset(&s, 9).unwrap());
    let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.train.x.data()), bits(b.train.x.data()));
    assert_eq!(a.test, b.test);
    assert_ne!(sine_dataset(&s, 10).unwrap().train, a.train);
    assert_eq!(a.test.ids[0], 300);

    let i = ImageConfig {
        train_per_class: 2,
        test_per_class: 1,
        ..Default::default()
    };
    assert_eq!(image_dataset(&i, 1).unwrap().train, image_dataset(&i, 1).unwrap().train);
}

fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        task: Task::Sine(SineConfig {
            train_size: 200,
            test_size: 50,
            ..Default::default()
        }),
        arch: Arch::sine(),
        strategies: Strategy::ALL.to_vec(),
        training: StrategyConfig {
            total_epochs: 6,
            batch_size: 50,
            ..Default::default()
        },
        runs: 2,
        seed: 7,
        data_seed: None,
    }
}

#[test]
fn experiment_writes_one_report_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_experiment();
    let results = run_experiment(&cfg, Some(dir.path())).unwrap();
    assert_eq!(results.len(), 6);
    for r in &results {
        assert!(r.outcome.is_ok());
        assert!(report_path(dir.path(), r.strategy, r.seed).exists());
    }
    assert!(dir.path().join("runs/one_model/8.json").exists());
    let loaded = load_reports(dir.path()).unwrap();
    assert_eq!(loaded.len(), 6);
    for r in &loaded {
        let curve = r.curve.as_ref().unwrap();
        assert_eq!(curve.len(), CURVE_POINTS);
        assert_eq!((curve[0][0], curve[CURVE_POINTS - 1][0]), (0.0, 1.0));
        let fresh = results
            .iter()
            .find(|j| j.strategy == r.strategy && j.seed == r.seed)
            .unwrap();
        assert_eq!(fresh.outcome.as_ref().unwrap(), r);
    }
}

#[test]
fn broken_reports_name_their_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("runs/student");
    std::fs::create_dir_all(&sub).unwrap();
    std::fs::write(sub.join("3.json"), "{").unwrap();
    let err = load_reports(dir.path()).unwrap_err();
    assert!(err.to_string().contains("3.json"), "{err}");
    assert!(matches!(load_reports(&dir.path().join("nowhere")), Err(Error::Io { .. })));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let sine = ExperimentConfig::load(root.join("sine.toml")).unwrap();
    assert_eq!(sine.task, Task::Sine(SineConfig::default()));
    assert_eq!(sine.training, StrategyConfig::default());
    assert_eq!(sine.arch, Arch::sine());
    assert_eq!(sine.runs, 50);
    let image = ExperimentConfig::load(root.join("image.toml")).unwrap();
    assert_eq!(image.task, Task::Image(ImageConfig::default()));
    assert_eq!(image.training.eval_metric, Metric::Accuracy);
}

#[test]
fn experiment_config_errors_name_the_field() {
    let mut cfg = tiny_experiment();
    cfg.runs = 0;
    assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "runs"));
    let mut cfg = tiny_experiment();
    cfg.training.eval_metric = Metric::Accuracy;
    assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "training.eval_metric"));
    let mut cfg = tiny_experiment();
    cfg.training.total_epochs = 8;
    assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "total_epochs"));
}
