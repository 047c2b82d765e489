//! Experiment orchestration: configs, repeated runs, ablations, imbalance
//! sweeps and the files they leave behind.
//!
//! Layout under an output root:
//!
//! ```text
//! runs/<run>/epoch_records.jsonl
//! runs/<run>/report.json
//! runs/<run>/checkpoint.json
//! summary.csv
//! aggregate.json
//! manifest.json
//! plotdata/*.json
//! ```
//!
//! A sweep or ablation puts each variant's experiment in its own directory
//! under `sweep/` or `ablation/` and writes the comparison table
//! (`if_sweep.csv`, `ablation.csv` and their JSON forms) at the root.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{l1_distance, Evaluator};
use crate::lsc::LabelShiftState;
use crate::model::{Architecture, ModelConfig};
use crate::synth::{generate, load_dataset, DomainDataset, ShiftSpec};
use crate::trainer::{run, EpochRecord, TrainConfig};

/// Which adaptation components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationMask {
    pub domain_adversarial: bool,
    pub centroid_alignment: bool,
    pub discriminative_alignment: bool,
    pub label_shift_calibration: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationMask {
    pub const FULL: Self = Self {
        domain_adversarial: true,
        centroid_alignment: true,
        discriminative_alignment: true,
        label_shift_calibration: true,
    };
    pub const SOURCE_ONLY: Self = Self {
        domain_adversarial: false,
        centroid_alignment: false,
        discriminative_alignment: false,
        label_shift_calibration: false,
    };

    /// Zeroes the weights of disabled terms.
    pub fn apply(&self, train: &TrainConfig) -> TrainConfig {
        let mut cfg = train.clone();
        if !self.domain_adversarial {
            cfg.gamma = 0.0;
        }
        if !self.centroid_alignment {
            cfg.lambda = 0.0;
        }
        if !self.discriminative_alignment {
            cfg.mu = 0.0;
        }
        cfg.label_shift_calibration = self.label_shift_calibration;
        cfg
    }

    /// Calibration only acts through the pseudo-label losses.
    pub fn calibration_observable(&self) -> bool {
        !self.label_shift_calibration || self.centroid_alignment || self.discriminative_alignment
    }
}

/// The cumulative ablation ladder, from source-only to the full method.
pub fn ablation_ladder() -> Vec<(&'static str, AblationMask)> {
    let mut mask = AblationMask::SOURCE_ONLY;
    let mut ladder = vec![("source_only", mask)];
    mask.domain_adversarial = true;
    ladder.push(("plus_dc", mask));
    mask.centroid_alignment = true;
    ladder.push(("plus_dsm", mask));
    mask.discriminative_alignment = true;
    ladder.push(("plus_dfa", mask));
    mask.label_shift_calibration = true;
    ladder.push(("plus_lsc", mask));
    ladder
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(ShiftSpec),
    Files {
        source: PathBuf,
        target: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(DomainDataset, DomainDataset)> {
        match self {
            DataSource::Synthetic(spec) => generate(spec),
            DataSource::Files {
                source,
                target,
                num_classes,
            } => {
                let s = load_dataset(source, *num_classes)?;
                let t = load_dataset(target, Some(num_classes.unwrap_or(s.num_classes())))?;
                Ok((s, t))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationMask,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Training seeds; each gives one run. The data stays fixed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

fn default_seeds() -> Vec<u64> {
    vec![100]
}

impl ExperimentConfig {
    pub fn standard(name: &str) -> Self {
        Self {
            name: name.to_string(),
            data: DataSource::Synthetic(ShiftSpec::standard()),
            model: Architecture::default(),
            train: TrainConfig::default(),
            ablation: AblationMask::FULL,
            output_dir: default_output_dir(),
            seeds: vec![100, 101, 102],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.train.validate()?;
        if !self.ablation.calibration_observable() {
            warn!("label shift calibration is enabled but no pseudo-label loss is; it will have no effect");
        }
        Ok(())
    }

    /// Applies `key=value` overrides addressed by dotted paths, e.g.
    /// `train.lr0=0.01` or `data.synthetic.imbalance_factor=20`. Values are
    /// parsed as JSON and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run_name(&self, seed: u64) -> String {
        format!("{}-seed{}", self.name, seed)
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("override key {key:?}: unknown field {part:?}")));
        }
        if last {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Err(Error::Config("empty override key".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEstimate {
    pub source_distribution: Vec<f64>,
    pub estimated_target: Vec<f64>,
    pub true_target: Vec<f64>,
    pub l1_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub ablation: AblationMask,
    pub train: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub per_class_accuracies: Vec<Option<f64>>,
    pub per_class_mean_accuracy: f64,
    pub source_accuracy: f64,
    pub false_pseudo_rate: Vec<f64>,
    pub estimation: DistributionEstimate,
    pub shift: LabelShiftState,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    /// Stage-2 epochs as `(epoch, raw subset accuracy, calibrated subset accuracy)`.
    pub fn subset_accuracies(&self) -> Vec<(usize, Option<f64>, Option<f64>)> {
        self.records
            .iter()
            .filter(|r| r.stage == 2)
            .map(|r| (r.epoch, r.subset_accuracy_raw, r.subset_accuracy_calibrated))
            .collect()
    }
}

/// Trains one seed of `cfg` on already loaded data. Writes nothing.
pub fn run_single(
    cfg: &ExperimentConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    evaluator: &Evaluator,
    seed: u64,
) -> Result<(RunReport, crate::model::ModelState)> {
    let started = Instant::now();
    let train = TrainConfig {
        seed,
        ..cfg.ablation.apply(&cfg.train)
    };
    let model_config = ModelConfig::new(source.feature_dim(), source.num_classes(), &cfg.model);
    let out = run(source, target, &model_config, &train, Some(evaluator))?;

    let true_target = evaluator.label_distribution();
    let estimation = DistributionEstimate {
        source_distribution: out.initial_shift.source_distribution.clone(),
        estimated_target: out.initial_shift.target_estimate.clone(),
        l1_error: l1_distance(&out.initial_shift.target_estimate, &true_target),
        true_target,
    };
    let last = out.records.last().expect("at least two epochs");
    let report = RunReport {
        name: cfg.run_name(seed),
        seed,
        ablation: cfg.ablation,
        per_class_accuracies: evaluator.per_class_accuracies(&out.final_predictions)?,
        per_class_mean_accuracy: evaluator.per_class_mean_accuracy(&out.final_predictions)?,
        source_accuracy: last.source_accuracy,
        false_pseudo_rate: out.records.iter().filter_map(|r| r.false_pseudo_rate).collect(),
        estimation,
        shift: out.shift,
        records: out.records,
        train,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((report, out.model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single run.
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: Vec<String>,
    pub target_accuracy: MetricSummary,
    pub source_accuracy: MetricSummary,
    pub estimation_l1: MetricSummary,
    pub final_false_pseudo_rate: MetricSummary,
}

/// Mean and spread over runs; a pure function of the reports.
pub fn aggregate(reports: &[RunReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Validation("nothing to aggregate".into()));
    }
    let collect = |f: &dyn Fn(&RunReport) -> f64| MetricSummary::new(reports.iter().map(f).collect());
    Ok(Aggregate {
        runs: reports.iter().map(|r| r.name.clone()).collect(),
        target_accuracy: collect(&|r| r.per_class_mean_accuracy),
        source_accuracy: collect(&|r| r.source_accuracy),
        estimation_l1: collect(&|r| r.estimation.l1_error),
        final_false_pseudo_rate: collect(&|r| r.false_pseudo_rate.last().copied().unwrap_or(f64::NAN)),
    })
}

/// Formats with 6 significant digits, like C's `%.6g`.
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = trim(format!("{x:.decimals$}"));
        // rounding may carry into a new digit, e.g. 9.999999 -> 10.0000
        if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() <= 6 {
            return s;
        }
    }
    let s = format!("{x:.5e}");
    let (mantissa, exponent) = s.split_once('e').expect("scientific format");
    format!("{}e{}", trim(mantissa.to_string()), exponent)
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "run",
    "seed",
    "target_accuracy",
    "source_accuracy",
    "estimation_l1",
    "final_false_pseudo_rate",
    "final_calibrated_proportion",
    "epochs",
];

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    writer.write_record(header).map_err(csv_err)?;
    for row in rows {
        writer.write_record(row).map_err(csv_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Validation(format!("csv: {e}")))?;
    write_file(path, &bytes)
}

/// Per-run artifacts: epoch records, report and model checkpoint.
pub fn write_run(root: &Path, report: &RunReport, model: &crate::model::ModelState) -> Result<()> {
    let dir = root.join("runs").join(&report.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut lines = Vec::new();
    for record in &report.records {
        serde_json::to_writer(&mut lines, record)?;
        lines.write_all(b"\n").expect("writing to memory");
    }
    write_file(&dir.join("epoch_records.jsonl"), &lines)?;
    write_json(&dir.join("report.json"), report)?;
    model.save(dir.join("checkpoint.json"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlotData {
    name: String,
    description: String,
    series: Vec<Value>,
}

/// Writes the summary CSV, full JSON, aggregate and plot data for a set of
/// finished runs.
pub fn emit_report(reports: &[RunReport], root: &Path) -> Result<Aggregate> {
    let agg = aggregate(reports)?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let last = r.records.last();
            vec![
                r.name.clone(),
                r.seed.to_string(),
                format_sig6(r.per_class_mean_accuracy),
                format_sig6(r.source_accuracy),
                format_sig6(r.estimation.l1_error),
                r.false_pseudo_rate.last().map(|&v| format_sig6(v)).unwrap_or_default(),
                last.map(|l| format_sig6(l.calibrated_proportion)).unwrap_or_default(),
                r.records.len().to_string(),
            ]
        })
        .collect();
    write_csv(&root.join("summary.csv"), &SUMMARY_HEADER, &rows)?;
    write_json(&root.join("report.json"), &reports)?;
    write_json(&root.join("aggregate.json"), &agg)?;

    let plot = root.join("plotdata");
    let per_run = |f: &dyn Fn(&RunReport) -> Value| reports.iter().map(f).collect::<Vec<_>>();
    write_json(
        &plot.join("calibrated_proportion.json"),
        &PlotData {
            name: "calibrated_proportion".into(),
            description: "fraction of target samples whose pseudo-label is changed by calibration, per epoch".into(),
            series: per_run(&|r| {
                serde_json::json!({
                    "run": r.name,
                    "epoch": r.records.iter().map(|e| e.epoch).collect::<Vec<_>>(),
                    "calibrated_proportion": r.records.iter().map(|e| e.calibrated_proportion).collect::<Vec<_>>(),
                    "false_pseudo_rate": r.records.iter().map(|e| e.false_pseudo_rate).collect::<Vec<_>>(),
                })
            }),
        },
    )?;
    write_json(
        &plot.join("calibrated_subset_accuracy.json"),
        &PlotData {
            name: "calibrated_subset_accuracy".into(),
            description: "accuracy of raw and calibrated pseudo-labels on the calibrated subset, per stage-2 epoch"
                .into(),
            series: per_run(&|r| {
                let subset = r.subset_accuracies();
                serde_json::json!({
                    "run": r.name,
                    "epoch": subset.iter().map(|s| s.0).collect::<Vec<_>>(),
                    "raw_accuracy": subset.iter().map(|s| s.1).collect::<Vec<_>>(),
                    "calibrated_accuracy": subset.iter().map(|s| s.2).collect::<Vec<_>>(),
                })
            }),
        },
    )?;
    write_json(
        &plot.join("distribution_estimation.json"),
        &PlotData {
            name: "distribution_estimation".into(),
            description: "source, estimated target and true target label distributions".into(),
            series: per_run(&|r| serde_json::to_value(&r.estimation).expect("plain data")),
        },
    )?;
    Ok(agg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub complete: bool,
    pub runs: Vec<(String, RunStatus)>,
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Overwrite(p.clone())),
        None => Ok(()),
    }
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RunReport>,
    pub aggregate: Aggregate,
}

/// Trains every seed of `cfg` and writes all artifacts under
/// `cfg.output_dir`. Completed runs stay on disk if another one fails, and
/// the manifest records which runs are missing.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let root = &cfg.output_dir;
    let run_dirs: Vec<PathBuf> = cfg
        .seeds
        .iter()
        .map(|&s| root.join("runs").join(cfg.run_name(s)))
        .collect();
    refuse_existing(&run_dirs, force)?;

    let (source, target) = cfg.data.load()?;
    let evaluator = Evaluator::new(&target);
    let results: Vec<Result<RunReport>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (report, model) = run_single(cfg, &source, &target, &evaluator, seed)?;
            write_run(root, &report, &model)?;
            info!(
                "{}: target per-class mean accuracy {:.4}",
                report.name, report.per_class_mean_accuracy
            );
            Ok(report)
        })
        .collect();

    let mut reports = Vec::new();
    let mut statuses = Vec::new();
    let mut first_error = None;
    for (seed, result) in cfg.seeds.iter().zip(results) {
        match result {
            Ok(r) => {
                statuses.push((r.name.clone(), RunStatus::Complete));
                reports.push(r);
            }
            Err(e) => {
                statuses.push((cfg.run_name(*seed), RunStatus::Failed(e.to_string())));
                first_error.get_or_insert(e);
            }
        }
    }
    let manifest = Manifest {
        experiment: cfg.name.clone(),
        complete: first_error.is_none(),
        runs: statuses,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    if let Some(e) = first_error {
        if !reports.is_empty() {
            emit_report(&reports, root)?;
        }
        return Err(e);
    }
    let aggregate = emit_report(&reports, root)?;
    Ok(ExperimentOutcome { reports, aggregate })
}

/// Reads every `runs/*/report.json` under `root`, sorted by run name.
pub fn load_reports(root: &Path) -> Result<Vec<RunReport>> {
    let runs = root.join("runs");
    let entries = fs::read_dir(&runs).map_err(|e| Error::io(&runs, e))?;
    let mut reports = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&runs, e))?;
        let path = entry.path().join("report.json");
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            reports.push(serde_json::from_str::<RunReport>(&text)?);
        }
    }
    if reports.is_empty() {
        return Err(Error::EmptyDataset(format!("no run reports under {}", runs.display())));
    }
    reports.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(reports)
}

/// One row of a method comparison: a label and the mean accuracy per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub accuracies: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub key: String,
    pub methods: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn mean(&self, row: usize, method: &str) -> Option<f64> {
        let col = self.methods.iter().position(|m| m == method)?;
        self.rows.get(row).map(|r| r.accuracies[col].mean)
    }

    fn write(&self, root: &Path, stem: &str, plot: &str) -> Result<()> {
        let mut header = vec![self.key.as_str()];
        let std_names: Vec<String> = self.methods.iter().map(|m| format!("{m}_std")).collect();
        for (m, s) in self.methods.iter().zip(&std_names) {
            header.push(m);
            header.push(s);
        }
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.label.clone()];
                for a in &r.accuracies {
                    row.push(format_sig6(a.mean));
                    row.push(format_sig6(a.std));
                }
                row
            })
            .collect();
        write_csv(&root.join(format!("{stem}.csv")), &header, &rows)?;
        write_json(&root.join(format!("{stem}.json")), self)?;
        write_json(
            &root.join("plotdata").join(format!("{plot}.json")),
            &PlotData {
                name: plot.into(),
                description: format!("mean target per-class accuracy by {}", self.key),
                series: self
                    .methods
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        serde_json::json!({
                            "method": m,
                            self.key.clone(): self.rows.iter().map(|r| r.label.clone()).collect::<Vec<_>>(),
                            "accuracy": self.rows.iter().map(|r| r.accuracies[i].mean).collect::<Vec<_>>(),
                            "std": self.rows.iter().map(|r| r.accuracies[i].std).collect::<Vec<_>>(),
                        })
                    })
                    .collect(),
            },
        )
    }
}

/// Runs each variant as its own experiment in its own output directory.
fn run_variants(variants: Vec<ExperimentConfig>, force: bool) -> Result<Vec<Aggregate>> {
    let dirs: Vec<PathBuf> = variants
        .iter()
        .flat_map(|v| {
            v.seeds
                .iter()
                .map(|&s| v.output_dir.join("runs").join(v.run_name(s)))
                .collect::<Vec<_>>()
        })
        .collect();
    refuse_existing(&dirs, force)?;
    let mut aggregates = Vec::new();
    for v in &variants {
        info!("running {}", v.name);
        aggregates.push(run_experiment(v, true)?.aggregate);
    }
    Ok(aggregates)
}

pub const SWEEP_METHODS: [(&str, AblationMask); 3] = [
    ("full", AblationMask::FULL),
    ("source_only", AblationMask::SOURCE_ONLY),
    (
        "no_lsc",
        AblationMask {
            label_shift_calibration: false,
            ..AblationMask::FULL
        },
    ),
];

/// Runs the full method and two ablations at each imbalance factor. Needs
/// a synthetic data source.
pub fn sweep_if(base: &ExperimentConfig, if_values: &[f64], force: bool) -> Result<ComparisonTable> {
    base.validate()?;
    let DataSource::Synthetic(spec) = &base.data else {
        return Err(Error::Config("an imbalance sweep needs a synthetic data source".into()));
    };
    if if_values.is_empty() || if_values.iter().any(|&v| !(v >= 1.0)) {
        return Err(Error::Config("imbalance factors must be >= 1".into()));
    }
    let mut variants = Vec::new();
    for &factor in if_values {
        for (method, mask) in SWEEP_METHODS {
            let name = format!("{}-if{}-{}", base.name, factor, method);
            variants.push(ExperimentConfig {
                output_dir: base.output_dir.join("sweep").join(&name),
                name,
                data: DataSource::Synthetic(ShiftSpec {
                    imbalance_factor: factor,
                    ..spec.clone()
                }),
                ablation: mask,
                ..base.clone()
            });
        }
    }
    let aggregates = run_variants(variants, force)?;
    let table = ComparisonTable {
        key: "imbalance_factor".into(),
        methods: SWEEP_METHODS.iter().map(|(m, _)| m.to_string()).collect(),
        rows: if_values
            .iter()
            .zip(aggregates.chunks(SWEEP_METHODS.len()))
            .map(|(f, aggs)| ComparisonRow {
                label: f.to_string(),
                accuracies: aggs.iter().map(|a| a.target_accuracy.clone()).collect(),
            })
            .collect(),
    };
    table.write(&base.output_dir, "if_sweep", "if_sweep")?;
    Ok(table)
}

/// Runs the cumulative ablation ladder on the base config's data.
pub fn ablate(base: &ExperimentConfig, force: bool) -> Result<ComparisonTable> {
    base.validate()?;
    let ladder = ablation_ladder();
    let variants = ladder
        .iter()
        .map(|(label, mask)| {
            let name = format!("{}-{}", base.name, label);
            ExperimentConfig {
                output_dir: base.output_dir.join("ablation").join(&name),
                name,
                ablation: *mask,
                ..base.clone()
            }
        })
        .collect();
    let aggregates = run_variants(variants, force)?;
    let table = ComparisonTable {
        key: "variant".into(),
        methods: vec!["target_accuracy".into()],
        rows: ladder
            .iter()
            .zip(&aggregates)
            .map(|((label, _), a)| ComparisonRow {
                label: label.to_string(),
                accuracies: vec![a.target_accuracy.clone()],
            })
            .collect(),
    };
    table.write(&base.output_dir, "ablation", "ablation")?;
    Ok(table)
}
