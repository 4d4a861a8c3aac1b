//! `hiergraph`: train, evaluate and inspect hierarchical graph forecasters.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hiergraph::hierarchy::{build_c, build_q, parse_selections, selections_to_text, Hierarchy};
use hiergraph::ndiff::Tensor;
use hiergraph::pipeline::{
    chrono_split, cluster_profiles, persistence_baseline, synth_generate, train, write_profiles_csv, Checkpoint,
    DatasetBundle, PipelineError, RunConfig, Split, Trainer,
};
use hiergraph::reconciler::{coherency_residual, reconcile, Projector};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "hiergraph", version, about = "Graph-based hierarchical time series forecasting")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config entry, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the default configuration and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a dataset directory, then evaluate on its test split.
    Train {
        /// Dataset directory; overrides `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint deterministically.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Export argmax cluster assignments and per-cluster summary series.
    Clusters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate a synthetic clustered dataset from the `[synth]` section.
    Synth,
    /// Project stacked forecasts onto the coherent subspace.
    Reconcile {
        /// CSV with one row per series (top level first) and one column per step.
        #[arg(long)]
        forecast: PathBuf,
        /// Selections in the `node:cluster` text format, bottom level first.
        #[arg(long)]
        hierarchy: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{message}")]
    Diverged { message: String },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Diverged { .. } => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        use hiergraph::forecaster::ForecastError;
        use hiergraph::selector::SelectorError;
        match e {
            PipelineError::Config(_)
            | PipelineError::Forecast(ForecastError::Config(_))
            | PipelineError::Selector(SelectorError::BadTemperature(_) | SelectorError::BadLevelSize { .. }) => {
                CliError::Config(e.to_string())
            }
            PipelineError::Diverged { .. } => CliError::Diverged { message: e.to_string() },
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data_err(context: &str) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{context}: {e}"))
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &str) -> Result<DatasetBundle, CliError> {
    if path.is_empty() {
        return Err(CliError::Data("no dataset given (use --data or data.path)".into()));
    }
    Ok(DatasetBundle::load(Path::new(path))?)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(data_err(&path.display().to_string()))
}

fn pretty(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("json values serialize") + "\n"
}

fn cmd_train(cli: &Cli, data_dir: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = load_config(cli)?;
    if let Some(d) = data_dir {
        cfg.data.path = d.to_string_lossy().into_owned();
    }
    let data = load_dataset(&cfg.data.path)?;
    // Checkpoints remember the dataset; keep that usable from any directory.
    if let Ok(abs) = fs::canonicalize(&cfg.data.path) {
        cfg.data.path = abs.to_string_lossy().into_owned();
    }
    let out = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&out).map_err(data_err(&cfg.output.dir))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    eprintln!(
        "dataset: {} steps, {} nodes, {:.1}% observed",
        data.len(),
        data.nodes(),
        100.0 * data.observed_fraction()
    );

    let outcome = match train(&data, cfg.clone()) {
        Ok(o) => o,
        Err(PipelineError::Diverged {
            epoch,
            step,
            reason,
            checkpoint,
        }) => {
            checkpoint.save(&out.join("checkpoint.json"))?;
            return Err(CliError::Diverged {
                message: format!(
                    "training diverged at epoch {epoch}, step {step}: {reason}; last good state saved to {}",
                    out.join("checkpoint.json").display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    let log: String = outcome
        .log
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect();
    write(&out.join("log.jsonl"), &log)?;
    outcome.checkpoint.save(&out.join("checkpoint.json"))?;
    write(
        &out.join("clusters.txt"),
        &selections_to_text(&outcome.checkpoint.selector.argmax_selections()),
    )?;

    let mut trainer = Trainer::from_checkpoint(&data, outcome.checkpoint.clone())?;
    let test = trainer.evaluate(Split::Test)?;
    let (w, h) = (cfg.model.window, cfg.model.horizon);
    let splits = chrono_split(data.len(), data.meta.split.unwrap_or(cfg.data.split), w, h)?;
    let baseline = persistence_baseline(&data, &splits[2], w, h, &cfg.eval.horizons)?;
    let metrics = json!({
        "split": "test",
        "epochs": outcome.log.len(),
        "best_epoch": outcome.checkpoint.best_epoch,
        "best_val_mae": outcome.checkpoint.best_val_mae,
        "stopped_early": outcome.stopped_early,
        "model": test,
        "persistence": baseline,
    });
    write(&out.join("metrics.json"), &pretty(&metrics))?;
    println!(
        "test MAE {:.6} (persistence {:.6}), MRE {:.3}%, epochs {}, output {}",
        test.mae,
        baseline.mae,
        test.mre,
        outcome.log.len(),
        out.display()
    );
    Ok(())
}

fn checkpoint_and_data(checkpoint: &Path, data: Option<&Path>) -> Result<(Checkpoint, DatasetBundle), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let dir = match data {
        Some(d) => d.to_string_lossy().into_owned(),
        None => ck.dataset.clone(),
    };
    let bundle = load_dataset(&dir)?;
    ck.check_compatible(&bundle)?;
    Ok((ck, bundle))
}

fn output_dir(cli: &Cli, checkpoint: &Path) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, data: Option<&Path>, split: &str) -> Result<(), CliError> {
    let split: Split = split.parse()?;
    let (ck, bundle) = checkpoint_and_data(checkpoint, data)?;
    let mut trainer = Trainer::from_checkpoint(&bundle, ck)?;
    let report = trainer.evaluate(split)?;
    let text = pretty(&json!({ "split": split.to_string(), "model": report }));
    let out = output_dir(cli, checkpoint);
    fs::create_dir_all(&out).map_err(data_err(&out.display().to_string()))?;
    write(&out.join(format!("eval_{split}.json")), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_clusters(cli: &Cli, checkpoint: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let (ck, bundle) = checkpoint_and_data(checkpoint, data)?;
    let selections = ck.selector.argmax_selections();
    let hierarchy = Hierarchy::new(bundle.graph.adjacency(), selections.clone())
        .map_err(|e| CliError::Data(e.to_string()))?;
    // Missing entries are shown at the node's training mean.
    let values = ck.standardizer.scaled_values(&bundle).scale(ck.standardizer.scale);
    let profiles = cluster_profiles(&values, &hierarchy)?;
    let out = output_dir(cli, checkpoint);
    fs::create_dir_all(&out).map_err(data_err(&out.display().to_string()))?;
    write(&out.join("clusters.txt"), &selections_to_text(&selections))?;
    write_profiles_csv(&out.join("cluster_profiles.csv"), &profiles)?;
    for (k, s) in selections.iter().enumerate() {
        println!("level {}: cluster sizes {:?}", k + 1, s.cluster_sizes());
    }
    Ok(())
}

fn cmd_synth(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let bundle = synth_generate(&cfg.synth)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data/synth"));
    bundle.save(&out)?;
    println!(
        "wrote {} series of length {} to {}",
        bundle.nodes(),
        bundle.len(),
        out.display()
    );
    Ok(())
}

fn read_forecast(path: &Path) -> Result<Tensor, CliError> {
    let text = fs::read_to_string(path).map_err(data_err(&path.display().to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if rows.is_empty() && i == 0 => continue,
            Err(_) => return Err(CliError::Data(format!("{}: line {}: not numeric", path.display(), i + 1))),
        }
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Data(format!("{}: expected a non-empty rectangular table", path.display())));
    }
    Ok(Tensor::from_rows(rows.len(), cols, rows.concat()))
}

fn cmd_reconcile(cli: &Cli, forecast: &Path, hierarchy: &Path) -> Result<(), CliError> {
    let y_hat = read_forecast(forecast)?;
    let text = fs::read_to_string(hierarchy).map_err(data_err(&hierarchy.display().to_string()))?;
    let selections = parse_selections(&text).map_err(|e| CliError::Data(format!("{}: {e}", hierarchy.display())))?;
    if selections.is_empty() {
        return Err(CliError::Data(format!("{}: no levels", hierarchy.display())));
    }
    let q = build_q(&build_c(&selections).map_err(|e| CliError::Data(e.to_string()))?);
    if q.cols() != y_hat.rows() {
        return Err(CliError::Data(format!(
            "hierarchy has {} series, forecast file has {} rows",
            q.cols(),
            y_hat.rows()
        )));
    }
    let projector = Projector::new(&q).map_err(|e| CliError::Data(e.to_string()))?;
    let y_bar = reconcile(&y_hat, &projector).map_err(|e| CliError::Data(e.to_string()))?;
    let before = coherency_residual(&q, &y_hat).map_err(|e| CliError::Data(e.to_string()))?;
    let after = coherency_residual(&q, &y_bar).map_err(|e| CliError::Data(e.to_string()))?;

    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(data_err(&out.display().to_string()))?;
    let mut csv = String::new();
    for r in 0..y_bar.rows() {
        let row: Vec<String> = y_bar.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write(&out.join("reconciled.csv"), &csv)?;
    let report = pretty(&json!({ "residual_before": before, "residual_after": after }));
    write(&out.join("residuals.json"), &report)?;
    print!("{report}");
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.dump_defaults {
        print!("{}", RunConfig::default().to_toml());
        return Ok(());
    }
    match &cli.command {
        Some(Command::Train { data }) => cmd_train(cli, data.as_deref()),
        Some(Command::Eval {
            checkpoint,
            data,
            split,
        }) => cmd_eval(cli, checkpoint, data.as_deref(), split),
        Some(Command::Clusters { checkpoint, data }) => cmd_clusters(cli, checkpoint, data.as_deref()),
        Some(Command::Synth) => cmd_synth(cli),
        Some(Command::Reconcile { forecast, hierarchy }) => cmd_reconcile(cli, forecast, hierarchy),
        None => Err(CliError::Config("no command given; see --help".into())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
