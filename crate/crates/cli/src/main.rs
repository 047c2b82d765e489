use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use imbda::experiment::{self, DataSource, ExperimentConfig};
use imbda::model::{argmax, ModelState};
use imbda::synth::{self, Domain};
use imbda::Error;

/// Environment variable that overrides the configured output directory.
const OUTPUT_ROOT_ENV: &str = "IMBDA_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "imbda",
    version,
    about = "Imbalanced domain adaptation experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a source/target dataset pair as CSV files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory receiving source.csv, target.csv and shift_spec.json.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train every configured seed and write run artifacts.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a labelled CSV dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare methods across imbalance factors.
    SweepIf {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated imbalance factors.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 5.0, 10.0, 20.0])]
        if_values: Vec<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Run the cumulative component ablation.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Rebuild summary, aggregate and plot data from saved run reports.
    Report {
        /// Output root containing a runs/ directory.
        #[arg(long)]
        output_dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config JSON; the built-in standard benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `train.lr0=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run only this training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; takes precedence over the config and the environment.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
                Error::Config(_) => e,
                other => Error::Config(format!("{}: {other}", path.display())),
            })?,
            None => ExperimentConfig::standard("standard"),
        };
        cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(dir) = self.output_dir.clone() {
            cfg.output_dir = dir;
        } else if let Some(dir) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }
}

fn gen_data(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<()> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(Error::Config("gen-data needs a synthetic data source".into()).into());
    };
    let files = ["source.csv", "target.csv", "shift_spec.json"].map(|f| out_dir.join(f));
    if !force {
        if let Some(existing) = files.iter().find(|p| p.exists()) {
            return Err(Error::Overwrite(existing.clone()).into());
        }
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let (source, target) = synth::generate(spec)?;
    synth::save_dataset(&source, &files[0])?;
    synth::save_dataset(&target, &files[1])?;
    std::fs::write(&files[2], serde_json::to_string_pretty(spec)?)
        .with_context(|| format!("writing {}", files[2].display()))?;
    println!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        out_dir.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let model = ModelState::load(checkpoint)?;
    let num_classes = model.config().num_classes;
    let ds = synth::load_dataset(data, Some(num_classes))?;
    let probs = model.predict_proba(ds.features())?;
    let predictions: Vec<usize> = (0..probs.rows()).map(|r| argmax(probs.row(r))).collect();
    let evaluator = imbda::eval::Evaluator::new(&ds.with_domain(Domain::Target));
    let output = serde_json::json!({
        "samples": predictions.len(),
        "per_class_accuracies": evaluator.per_class_accuracies(&predictions)?,
        "per_class_mean_accuracy": evaluator.per_class_mean_accuracy(&predictions)?,
    });
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn print_table(table: &experiment::ComparisonTable) {
    println!("{:>18} {}", table.key, table.methods.join("  "));
    for row in &table.rows {
        let cells: Vec<String> = row
            .accuracies
            .iter()
            .map(|a| format!("{:.4}±{:.4}", a.mean, a.std))
            .collect();
        println!("{:>18} {}", row.label, cells.join("  "));
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out_dir, force } => gen_data(&config.resolve()?, &out_dir, force),
        Command::Train { config, force } => {
            let cfg = config.resolve()?;
            let outcome = experiment::run_experiment(&cfg, force)?;
            for r in &outcome.reports {
                println!(
                    "{}: target per-class mean accuracy {:.4}",
                    r.name, r.per_class_mean_accuracy
                );
            }
            let acc = &outcome.aggregate.target_accuracy;
            println!(
                "mean {:.4} std {:.4}; artifacts in {}",
                acc.mean,
                acc.std,
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Command::SweepIf {
            config,
            if_values,
            force,
        } => {
            let cfg = config.resolve()?;
            print_table(&experiment::sweep_if(&cfg, &if_values, force)?);
            Ok(())
        }
        Command::Ablate { config, force } => {
            let cfg = config.resolve()?;
            print_table(&experiment::ablate(&cfg, force)?);
            Ok(())
        }
        Command::Report { output_dir } => {
            let reports = experiment::load_reports(&output_dir)?;
            let agg = experiment::emit_report(&reports, &output_dir)?;
            info!("re-emitted {} runs", reports.len());
            println!(
                "{} runs; target accuracy mean {:.4} std {:.4}",
                agg.runs.len(),
                agg.target_accuracy.mean,
                agg.target_accuracy.std
            );
            Ok(())
        }
    }
}

/// 1 for configuration problems, 3 for a refused overwrite, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parameter(_)) => 1,
        Some(Error::Overwrite(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
