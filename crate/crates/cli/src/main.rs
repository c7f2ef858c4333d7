use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use ama_core::config::{parse_config_str, ExperimentConfig, Profile, DATA_ROOT_ENV};
use ama_core::eval::{auroc_result, density_csv, density_series};
use ama_core::pipeline::{self, Preset, RunDirectory, Toggle};
use ama_core::scoring::{ScoreMode, ScoreReport};
use ama_core::AmaError;

/// Adversarial mirrored autoencoder: train, score and evaluate anomaly detectors.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
/// divergence.
#[derive(Parser)]
#[command(name = "ama", version, after_help = concat!(
    "Datasets are read from <data_root>/<name>/; set ",
    "AMA_DATA_ROOT",
    " to override the configured data_root."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat JSON configuration; keys left out take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Default overlay: `paper` (full scale) or `desk` (CPU scale).
    #[arg(long, default_value = "paper")]
    profile: Profile,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides; values are parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and score its test split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory to create.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Re-score a finished run's test split from a stored checkpoint.
    Score {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint id such as `epoch_025`; defaults to the selected one.
        #[arg(long)]
        checkpoint: Option<String>,
        /// `r` or `a`; defaults to the run's score mode.
        #[arg(long)]
        mode: Option<ScoreMode>,
    },
    /// AUROC of a score CSV, optionally with R-score density data.
    Eval {
        /// CSV with header `sample_id,label,r_score,a_score,anomaly_score`.
        #[arg(long)]
        scores: PathBuf,
        /// Writes normal/anomalous R-score histograms to this CSV.
        #[arg(long)]
        plot_density: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Train the full model and each single-component removal.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Components to remove, comma separated: mirrored_loss,
        /// simplex_interp, atypical_selection, a_score.
        #[arg(long, value_delimiter = ',', default_value = "mirrored_loss,simplex_interp,atypical_selection,a_score")]
        toggles: Vec<Toggle>,
        /// Also compare against uniform cube negatives.
        #[arg(long)]
        sipple: bool,
    },
    /// Run a named preset and compare against its published target.
    Reproduce {
        /// fmnist_vs_mnist, cifar_vs_svhn, svhn_vs_cifar, mnist_one_class_0..9
        /// or atypical_vs_sipple.
        #[arg(long)]
        preset: Preset,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| AmaError::config_general(format!("override `{s}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Profile defaults, then `base` (a preset), then the file, then overrides.
fn load_config(args: &ConfigArgs, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut doc = Map::new();
    if let Some(b) = base {
        let defaults = serde_json::to_value(ExperimentConfig::for_profile(args.profile))?;
        let Value::Object(preset) = serde_json::to_value(b)? else { unreachable!() };
        for (k, v) in preset {
            if defaults.get(&k) != Some(&v) {
                doc.insert(k, v);
            }
        }
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| AmaError::io(path, e))?;
        if !text.trim().is_empty() {
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| AmaError::data(path, format!("not valid JSON: {e}")))?;
            let Value::Object(file) = value else {
                return Err(AmaError::data(path, "the configuration must be a JSON object").into());
            };
            doc.extend(file);
        }
    }
    for o in &args.overrides {
        let (k, v) = parse_override(o)?;
        doc.insert(k, v);
    }
    if let Some(seed) = args.seed {
        doc.insert("seed".into(), seed.into());
    }
    Ok(parse_config_str(&Value::Object(doc).to_string(), args.profile)?)
}

fn train(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args, None)?;
    let dir = RunDirectory::create(out)?;
    let result = pipeline::run_experiment(&cfg, Some(&dir), "train")?;
    println!(
        "test AUROC {:.4} (r_score {:.4}, a_score {:.4}); artifacts in {}",
        result.test_auroc(),
        result.r_score.test.value,
        result.a_score.test.value,
        out.display()
    );
    Ok(())
}

fn score(run: &Path, checkpoint: Option<&str>, mode: Option<ScoreMode>) -> Result<()> {
    let dir = RunDirectory::open(run)?;
    let (_, result) = pipeline::score_run(&dir, checkpoint, mode)?;
    println!(
        "{}: test AUROC {:.4} over {} normal / {} anomalous samples",
        result.experiment, result.value, result.n_normal, result.n_anomaly
    );
    Ok(())
}

fn eval(scores: &Path, density: Option<&Path>, bins: usize) -> Result<()> {
    let records = ScoreReport::read_csv(scores)?;
    let values: Vec<f64> = records.iter().map(|r| r.anomaly_score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    let result = auroc_result(&values, &labels, None, &scores.display().to_string())?;
    println!("AUROC {:.4} ({} normal, {} anomalous)", result.value, result.n_normal, result.n_anomaly);
    if let Some(path) = density {
        let pick = |anomaly: bool| -> Vec<f64> {
            records.iter().filter(|r| r.label == anomaly).map(|r| r.r_score).collect()
        };
        let (normal, anomalous) = (pick(false), pick(true));
        let series = density_series(&[("normal", &normal), ("anomaly", &anomalous)], bins)?;
        std::fs::write(path, density_csv(&series)).map_err(|e| AmaError::io(path, e))?;
    }
    Ok(())
}

fn ablate(args: &ConfigArgs, out: &Path, toggles: &[Toggle], sipple: bool) -> Result<()> {
    let cfg = load_config(args, None)?;
    std::fs::create_dir_all(out).map_err(|e| AmaError::io(out, e))?;
    std::fs::write(out.join("config.json"), cfg.to_json()).map_err(|e| AmaError::io(out, e))?;
    let splits = pipeline::build_splits(&cfg)?;
    let report = pipeline::run_ablation_on(&cfg, &splits, toggles, Some(out))?;
    print!("{}", report.table().to_markdown());
    if sipple {
        let table = pipeline::run_sampler_comparison(&cfg, &splits, Some(&report.full), Some(out))?;
        print!("\n{}", table.to_markdown());
    }
    Ok(())
}

fn reproduce(preset: Preset, args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args, Some(preset.config(args.profile)))?;
    let (_, table) = pipeline::reproduce(preset, &cfg, out)?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => train(&cfg, &out),
        Command::Score { run, checkpoint, mode } => score(&run, checkpoint.as_deref(), mode),
        Command::Eval {
            scores,
            plot_density,
            bins,
        } => eval(&scores, plot_density.as_deref(), bins),
        Command::Ablate {
            cfg,
            out,
            toggles,
            sipple,
        } => ablate(&cfg, &out, &toggles, sipple),
        Command::Reproduce { preset, cfg, out } => reproduce(preset, &cfg, &out).context(format!(
            "preset {} (datasets are read from ${DATA_ROOT_ENV} or the configured data_root)",
            preset.name()
        )),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<AmaError>().map(AmaError::exit_code).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
