use std::fs;
use std::path::Path;

use imbda::experiment::{
    aggregate, emit_report, load_reports, run_experiment, sweep_if, AblationMask, DataSource, ExperimentConfig,
    Manifest, RunReport, RunStatus, SUMMARY_HEADER,
};
use imbda::model::Architecture;
use imbda::synth::ShiftSpec;
use imbda::trainer::{run_source_only, TrainConfig};
use imbda::Error;

fn tiny(name: &str, root: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        data: DataSource::Synthetic(ShiftSpec {
            imbalance_factor: 4.0,
            target_order: vec![2, 1, 0],
            rotation_angle: 0.3,
            ..ShiftSpec::no_shift(3, 4, 60, 5)
        }),
        model: Architecture {
            hidden_dims: vec![12],
            bottleneck_dim: 6,
            discriminator_hidden_dims: vec![6],
        },
        train: TrainConfig {
            epochs: 4,
            pretrain_epochs: 1,
            batch_size: 24,
            ..TrainConfig::default()
        },
        ablation: AblationMask::FULL,
        output_dir: root.to_path_buf(),
        seeds: vec![100, 101, 102],
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn three_seeds_give_three_reports_and_a_recomputable_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("rep", dir.path());
    let outcome = run_experiment(&cfg, false).unwrap();
    assert_eq!(outcome.reports.len(), 3);
    for seed in &cfg.seeds {
        let run = dir.path().join("runs").join(cfg.run_name(*seed));
        for file in ["report.json", "epoch_records.jsonl", "checkpoint.json"] {
            assert!(run.join(file).is_file(), "{file} missing for seed {seed}");
        }
        let lines = fs::read_to_string(run.join("epoch_records.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), cfg.train.epochs);
    }

    // recompute from persisted per-seed files only
    let reloaded = load_reports(dir.path()).unwrap();
    let recomputed = aggregate(&reloaded).unwrap();
    let persisted: imbda::experiment::Aggregate = read_json(&dir.path().join("aggregate.json"));
    assert_eq!(recomputed, persisted);
    let values: Vec<f64> = reloaded.iter().map(|r| r.per_class_mean_accuracy).collect();
    let mean = values.iter().sum::<f64>() / 3.0;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
    assert!((persisted.target_accuracy.mean - mean).abs() < 1e-15);
    assert!((persisted.target_accuracy.std - var.sqrt()).abs() < 1e-15);

    let manifest: Manifest = read_json(&dir.path().join("manifest.json"));
    assert!(manifest.complete);
    assert!(manifest.runs.iter().all(|(_, s)| *s == RunStatus::Complete));
}

#[test]
fn existing_output_is_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![7],
        ..tiny("guard", dir.path())
    };
    run_experiment(&cfg, false).unwrap();
    let report = dir.path().join("runs/guard-seed7/report.json");
    let before = fs::read(&report).unwrap();
    assert!(matches!(run_experiment(&cfg, false), Err(Error::Overwrite(_))));
    assert_eq!(fs::read(&report).unwrap(), before);
    run_experiment(&cfg, true).unwrap();
}

#[test]
fn disabling_every_component_gives_the_source_only_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![100],
        ablation: AblationMask::SOURCE_ONLY,
        ..tiny("plain", dir.path())
    };
    run_experiment(&cfg, false).unwrap();
    let (source, target) = cfg.data.load().unwrap();
    let mc = imbda::model::ModelConfig::new(source.feature_dim(), source.num_classes(), &cfg.model);
    let baseline = run_source_only(&source, target.len(), &mc, &cfg.train).unwrap();
    let saved = imbda::model::ModelState::load(dir.path().join("runs/plain-seed100/checkpoint.json")).unwrap();
    assert_eq!(saved, baseline);
    let report: RunReport = read_json(&dir.path().join("runs/plain-seed100/report.json"));
    assert_eq!(report.ablation, AblationMask::SOURCE_ONLY);
    assert_eq!(
        (report.train.gamma, report.train.lambda, report.train.mu),
        (0.0, 0.0, 0.0)
    );
}

#[test]
fn summary_csv_round_trips_through_its_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![100, 101],
        ..tiny("csv", dir.path())
    };
    let outcome = run_experiment(&cfg, false).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, SUMMARY_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for (row, report) in rows.iter().zip(&outcome.reports) {
        assert_eq!(&row[0], report.name);
        assert_eq!(row[1].parse::<u64>().unwrap(), report.seed);
        let acc: f64 = row[2].parse().unwrap();
        assert!((acc - report.per_class_mean_accuracy).abs() <= 5e-6 * report.per_class_mean_accuracy.abs());
        assert_eq!(row[7].parse::<usize>().unwrap(), cfg.train.epochs);
    }

    // the full JSON keeps every digit
    let full: Vec<RunReport> = read_json(&dir.path().join("report.json"));
    assert_eq!(
        full[0].per_class_mean_accuracy,
        outcome.reports[0].per_class_mean_accuracy
    );
}

#[test]
fn plot_data_series_are_aligned() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![100],
        ..tiny("plots", dir.path())
    };
    run_experiment(&cfg, false).unwrap();
    let plot = dir.path().join("plotdata");
    let subset: serde_json::Value = read_json(&plot.join("calibrated_subset_accuracy.json"));
    let series = &subset["series"][0];
    let n = series["epoch"].as_array().unwrap().len();
    assert_eq!(series["raw_accuracy"].as_array().unwrap().len(), n);
    assert_eq!(series["calibrated_accuracy"].as_array().unwrap().len(), n);

    let proportion: serde_json::Value = read_json(&plot.join("calibrated_proportion.json"));
    assert_eq!(
        proportion["series"][0]["calibrated_proportion"]
            .as_array()
            .unwrap()
            .len(),
        cfg.train.epochs
    );
    let estimation: serde_json::Value = read_json(&plot.join("distribution_estimation.json"));
    assert_eq!(estimation["series"][0]["true_target"].as_array().unwrap().len(), 3);

    // report regenerates identical artifacts from the saved runs
    let before = fs::read(dir.path().join("aggregate.json")).unwrap();
    emit_report(&load_reports(dir.path()).unwrap(), dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join("aggregate.json")).unwrap(), before);
}

#[test]
fn single_factor_sweep_works() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![100],
        ..tiny("sw", dir.path())
    };
    let table = sweep_if(&cfg, &[1.0], false).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.methods, ["full", "source_only", "no_lsc"]);
    assert!(dir.path().join("if_sweep.csv").is_file());
    assert!(dir.path().join("plotdata/if_sweep.json").is_file());
    // each variant keeps its own summary
    for method in &table.methods {
        let summary = dir.path().join(format!("sweep/sw-if1-{method}/summary.csv"));
        assert!(summary.is_file(), "{}", summary.display());
    }
    assert!(matches!(sweep_if(&cfg, &[1.0], false), Err(Error::Overwrite(_))));
    assert!(sweep_if(&cfg, &[0.5], true).is_err());
}

#[test]
fn config_json_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("json", dir.path());
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);

    let changed = cfg
        .with_overrides(&["train.lr0=0.02", "data.synthetic.imbalance_factor=8", "name=other"])
        .unwrap();
    assert_eq!(changed.train.lr0, 0.02);
    assert_eq!(changed.name, "other");
    let DataSource::Synthetic(spec) = &changed.data else {
        panic!("synthetic")
    };
    assert_eq!(spec.imbalance_factor, 8.0);

    for bad in ["train.nope=1", "train.lr0", "train.epochs=1", "seeds=[]"] {
        assert!(
            matches!(cfg.with_overrides(&[bad]), Err(Error::Config(_) | Error::Parameter(_))),
            "{bad}"
        );
    }
    assert!(matches!(
        ExperimentConfig::from_json("{\"name\": \"x\"}"),
        Err(Error::Config(_))
    ));
}
