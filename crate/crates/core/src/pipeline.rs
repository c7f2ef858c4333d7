//! End-to-end runs: split construction, training, test scoring, the
//! hyperparameter grid, ablations and the reproduction presets.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Profile};
use crate::data::{build_cross_dataset_split, build_one_class_split, DatasetSpec, Scenario, Splits};
use crate::eval::{auroc_result, density_csv, density_series, AurocResult, ResultTable};
use crate::latent::{AtypicalConfig, Direction, NegativeMode};
use crate::model::Networks;
use crate::scoring::{r_scores, ScoreMode, ScoreReport};
use crate::train::{select_best_checkpoint, train_run, RunManifest, RunOutput};
use crate::{AmaError, Result};

/// Element type of every pipeline run.
pub type Real = f32;

const DENSITY_BINS: usize = 50;

/// One run's artifacts under a single root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDirectory {
    pub root: PathBuf,
}

impl RunDirectory {
    /// Creates the root and its subdirectories.
    pub fn create(root: &Path) -> Result<Self> {
        let dir = Self { root: root.to_path_buf() };
        for sub in [dir.checkpoints(), dir.logs(), dir.scores(), dir.reports()] {
            std::fs::create_dir_all(&sub).map_err(|e| AmaError::io(&sub, e))?;
        }
        Ok(dir)
    }

    /// An existing run directory; it must hold a configuration.
    pub fn open(root: &Path) -> Result<Self> {
        let dir = Self { root: root.to_path_buf() };
        if !dir.config_path().is_file() {
            return Err(AmaError::data(dir.config_path(), "not a run directory (config.json missing)"));
        }
        Ok(dir)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        write(&self.config_path(), &cfg.to_json())
    }

    pub fn read_manifest(&self) -> Result<RunManifest> {
        let path = self.manifest_path();
        RunManifest::from_json(&std::fs::read_to_string(&path).map_err(|e| AmaError::io(&path, e))?)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| AmaError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| AmaError::io(path, e))
}

fn dataset(name: &str, root: &Path, key: &str) -> Result<DatasetSpec> {
    let spec = DatasetSpec::standard(name, root).map_err(|e| match e {
        AmaError::Config { message, .. } => AmaError::config(key, message),
        other => other,
    })?;
    if !spec.root_path.is_dir() {
        return Err(AmaError::data(
            &spec.root_path,
            format!(
                "dataset `{name}` not found; run scripts/fetch_data.sh or point {} at the directory holding `{name}/`",
                crate::config::DATA_ROOT_ENV
            ),
        ));
    }
    Ok(spec)
}

/// Train/validation/test splits described by `cfg`; OOD images are
/// delivered in the normal dataset's geometry.
pub fn build_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    cfg.validate()?;
    let root = cfg.resolved_data_root();
    let mut normal = dataset(&cfg.normal_dataset, &root, "normal_dataset")?;
    if let Some(size) = cfg.image_size {
        normal = normal.with_target_size(size);
    }
    let protocol = cfg.protocol();
    match cfg.scenario {
        Scenario::OneClass => build_one_class_split(&normal, &protocol, cfg.seed, cfg.max_train_samples),
        Scenario::CrossDataset => {
            let name = cfg
                .ood_dataset
                .as_deref()
                .ok_or_else(|| AmaError::config("ood_dataset", "the cross-dataset scenario needs an OOD dataset"))?;
            let ood = dataset(name, &root, "ood_dataset")?.adapted_to(&normal);
            build_cross_dataset_split(&normal, &ood, &protocol, cfg.seed, cfg.max_train_samples)
        }
    }
}

/// Test result of the best checkpoint under one score mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub checkpoint: String,
    pub val_auroc: f64,
    pub test: AurocResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub delta: f64,
    pub direction: Direction,
    pub val_auroc: f64,
    pub test_auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub id: String,
    pub config: ExperimentConfig,
    pub r_score: ModeResult,
    pub a_score: ModeResult,
    /// Every evaluated point when the atypical band was searched.
    pub grid: Vec<GridPoint>,
}

impl ExperimentResult {
    pub fn mode(&self, mode: ScoreMode) -> &ModeResult {
        match mode {
            ScoreMode::RScore => &self.r_score,
            ScoreMode::AScore => &self.a_score,
        }
    }

    /// Test AUROC under the configured score mode.
    pub fn test_auroc(&self) -> f64 {
        self.mode(self.config.score_mode).test.value
    }
}

/// Builds the splits for `cfg` and runs it.
pub fn run_experiment(cfg: &ExperimentConfig, dir: Option<&RunDirectory>, id: &str) -> Result<ExperimentResult> {
    let splits = build_splits(cfg)?;
    run_on_splits(cfg, &splits, dir, id)
}

/// Trains, selects and tests one configuration. With atypical negatives
/// and a nonempty grid, every valid `(delta, direction)` pair is trained
/// and the one with the best validation AUROC is kept.
pub fn run_on_splits(cfg: &ExperimentConfig, splits: &Splits, dir: Option<&RunDirectory>, id: &str) -> Result<ExperimentResult> {
    let searching = cfg.negative_mode == NegativeMode::Atypical && (!cfg.delta_grid.is_empty() || !cfg.direction_grid.is_empty());
    if !searching {
        return single_run(cfg, splits, dir, id);
    }
    let deltas = if cfg.delta_grid.is_empty() { vec![cfg.delta] } else { cfg.delta_grid.clone() };
    let directions = if cfg.direction_grid.is_empty() { vec![cfg.direction] } else { cfg.direction_grid.clone() };
    let mut grid = Vec::new();
    let mut best: Option<ExperimentResult> = None;
    for &direction in &directions {
        for &delta in &deltas {
            let mut point = cfg.clone();
            point.delta = delta;
            point.direction = direction;
            point.delta_grid.clear();
            point.direction_grid.clear();
            let band = AtypicalConfig {
                d: cfg.latent_dim,
                delta,
                direction,
            };
            if let Err(e) = band.validate() {
                log::warn!("skipping grid point: {e}");
                continue;
            }
            let tag = format!("delta_{delta}_{}", direction_name(direction));
            let sub = dir.map(|d| RunDirectory::create(&d.root.join("grid").join(&tag))).transpose()?;
            let result = single_run(&point, splits, sub.as_ref(), &format!("{id}/{tag}"))?;
            let m = result.mode(cfg.score_mode);
            grid.push(GridPoint {
                delta,
                direction,
                val_auroc: m.val_auroc,
                test_auroc: m.test.value,
            });
            if best.as_ref().is_none_or(|b| m.val_auroc > b.mode(cfg.score_mode).val_auroc) {
                best = Some(result);
            }
        }
    }
    let mut best = best.ok_or_else(|| AmaError::config("delta_grid", "no valid grid point"))?;
    best.grid = grid;
    if let Some(d) = dir {
        d.write_config(cfg)?;
        let mut table = ResultTable::new("atypical band search", &["val AUROC", "test AUROC"]);
        for p in &best.grid {
            let name = format!("delta={} {}", p.delta, direction_name(p.direction));
            table.push(&name, vec![Some(p.val_auroc), Some(p.test_auroc)])?;
        }
        table.write(&d.reports(), "grid")?;
        write(&d.reports().join("summary.json"), &serde_json::to_string_pretty(&best).expect("serializes"))?;
    }
    Ok(best)
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Inward => "inward",
        Direction::Outward => "outward",
    }
}

fn mode_name(m: ScoreMode) -> &'static str {
    match m {
        ScoreMode::RScore => "r_score",
        ScoreMode::AScore => "a_score",
    }
}

fn single_run(cfg: &ExperimentConfig, splits: &Splits, dir: Option<&RunDirectory>, id: &str) -> Result<ExperimentResult> {
    let out = dir.map(|d| RunOutput {
        checkpoints: d.checkpoints(),
        log: d.logs().join("train.jsonl"),
        split_manifest: Some(d.manifest_path().to_string_lossy().into_owned()),
    });
    if let Some(d) = dir {
        d.write_config(cfg)?;
    }
    log::info!("run {id}: {} train, {} val, {} test images", splits.train.len(), splits.val.len(), splits.test.len());
    let outcome = train_run::<Real>(cfg, splits, out.as_ref())?;
    if let Some(d) = dir {
        write(&d.manifest_path(), &outcome.manifest.to_json())?;
    }
    let mut results = Vec::new();
    for mode in [ScoreMode::RScore, ScoreMode::AScore] {
        let record = select_best_checkpoint(&outcome.manifest, mode)?;
        let nets = outcome.best(mode).networks()?;
        let r = r_scores(&nets, &splits.test.images, cfg.score_batch_size)?;
        let report = ScoreReport::from_r_scores(&r, &splits.test.anomaly, Some(&record.gaussian), mode)?;
        let scores: Vec<f64> = report.records.iter().map(|s| s.anomaly_score).collect();
        let test = auroc_result(&scores, &splits.test.anomaly, Some(mode), id)?;
        log::info!("run {id}: test AUROC {:.4} ({}, {})", test.value, mode_name(mode), record.id);
        if let Some(d) = dir {
            report.write_csv(&d.scores().join(format!("test_{}.csv", mode_name(mode))))?;
            if mode == cfg.score_mode {
                write_density(&nets, splits, &r, cfg, &d.reports())?;
            }
        }
        results.push(ModeResult {
            checkpoint: record.id.clone(),
            val_auroc: record.val_auroc(mode),
            test,
        });
    }
    let a_score = results.pop().expect("two modes");
    let r_score = results.pop().expect("two modes");
    let result = ExperimentResult {
        id: id.to_string(),
        config: cfg.clone(),
        r_score,
        a_score,
        grid: Vec::new(),
    };
    if let Some(d) = dir {
        write(&d.reports().join("summary.json"), &serde_json::to_string_pretty(&result).expect("serializes"))?;
    }
    Ok(result)
}

fn write_density(nets: &Networks<Real>, splits: &Splits, test_r: &[f64], cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let train = r_scores(nets, &splits.train, cfg.score_batch_size)?;
    let pick = |anomaly: bool| -> Vec<f64> {
        test_r
            .iter()
            .zip(&splits.test.anomaly)
            .filter(|(_, &a)| a == anomaly)
            .map(|(&r, _)| r)
            .collect()
    };
    let normal = pick(false);
    let anomalous = pick(true);
    let series = density_series(&[("train", &train), ("test_normal", &normal), ("test_anomaly", &anomalous)], DENSITY_BINS)?;
    write(&dir.join("density.csv"), &density_csv(&series))
}

/// Re-scores the test split of a finished run from its manifest and a
/// stored checkpoint, without retraining.
pub fn score_run(dir: &RunDirectory, checkpoint: Option<&str>, mode: Option<ScoreMode>) -> Result<(ScoreReport, AurocResult)> {
    let manifest = dir.read_manifest()?;
    let cfg = &manifest.config;
    let mode = mode.unwrap_or(cfg.score_mode);
    let record = match checkpoint {
        Some(id) => manifest
            .checkpoint(id)
            .ok_or_else(|| AmaError::config("checkpoint", format!("run has no checkpoint `{id}`")))?,
        None => select_best_checkpoint(&manifest, mode)?,
    };
    let splits = build_splits(cfg)?;
    if splits.manifest != manifest.split {
        return Err(AmaError::data(
            dir.manifest_path(),
            "the datasets no longer reproduce the recorded split",
        ));
    }
    let ckpt = Checkpoint::<Real>::load(&dir.checkpoints().join(format!("{}.ckpt", record.id)))?;
    let nets = ckpt.networks()?;
    let r = r_scores(&nets, &splits.test.images, cfg.score_batch_size)?;
    let report = ScoreReport::from_r_scores(&r, &splits.test.anomaly, Some(&record.gaussian), mode)?;
    let scores: Vec<f64> = report.records.iter().map(|s| s.anomaly_score).collect();
    let result = auroc_result(&scores, &splits.test.anomaly, Some(mode), &record.id)?;
    report.write_csv(&dir.scores().join(format!("rescore_{}_{}.csv", record.id, mode_name(mode))))?;
    Ok((report, result))
}

/// A component that an ablation variant removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    MirroredLoss,
    SimplexInterp,
    AtypicalSelection,
    AScore,
}

impl Toggle {
    pub const ALL: [Toggle; 4] = [Toggle::MirroredLoss, Toggle::SimplexInterp, Toggle::AtypicalSelection, Toggle::AScore];

    pub fn variant_name(self) -> &'static str {
        match self {
            Toggle::MirroredLoss => "w/o Mirrored Wass. Loss",
            Toggle::SimplexInterp => "w/o Simplex Interpolation",
            Toggle::AtypicalSelection => "w/o Atypical Selection",
            Toggle::AScore => "w/o A-score",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Toggle::MirroredLoss => "no_mirrored",
            Toggle::SimplexInterp => "no_interp",
            Toggle::AtypicalSelection => "no_atypical",
            Toggle::AScore => "no_a_score",
        }
    }
}

impl FromStr for Toggle {
    type Err = AmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mirrored_loss" => Ok(Toggle::MirroredLoss),
            "simplex_interp" => Ok(Toggle::SimplexInterp),
            "atypical_selection" => Ok(Toggle::AtypicalSelection),
            "a_score" => Ok(Toggle::AScore),
            other => Err(AmaError::config(
                "toggles",
                format!("unknown toggle `{other}` (expected mirrored_loss, simplex_interp, atypical_selection or a_score)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub result: AurocResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub full: ExperimentResult,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> ResultTable {
        let column = format!("{}/{}", self.full.config.normal_dataset, self.full.config.ood_dataset.as_deref().unwrap_or("-"));
        let mut t = ResultTable::new("ablation", &[&column]);
        for row in &self.rows {
            t.push(&row.variant, vec![Some(row.result.value)]).expect("one column");
        }
        t
    }
}

fn with_variant(e: AmaError, variant: &str) -> AmaError {
    match e {
        AmaError::Config { key, message } => AmaError::Config {
            key,
            message: format!("[{variant}] {message}"),
        },
        AmaError::Data { path, message } => AmaError::Data {
            path,
            message: format!("[{variant}] {message}"),
        },
        AmaError::Contract(m) => AmaError::Contract(format!("[{variant}] {m}")),
        AmaError::Numeric(m) => AmaError::Numeric(format!("[{variant}] {m}")),
        other => {
            log::error!("variant {variant} failed");
            other
        }
    }
}

/// The full model plus one variant per removed component. Removing the
/// A-score reuses the full run with R-score selection and scoring.
pub fn run_ablation(base: &ExperimentConfig, toggles: &[Toggle], dir: Option<&Path>) -> Result<AblationReport> {
    let splits = build_splits(base)?;
    run_ablation_on(base, &splits, toggles, dir)
}

pub fn run_ablation_on(base: &ExperimentConfig, splits: &Splits, toggles: &[Toggle], dir: Option<&Path>) -> Result<AblationReport> {
    let sub = |tag: &str| dir.map(|d| RunDirectory::create(&d.join(tag))).transpose();
    let full = run_on_splits(base, splits, sub("full")?.as_ref(), "full").map_err(|e| with_variant(e, "full"))?;
    let mut rows = vec![AblationRow {
        variant: "AMA".into(),
        result: full.mode(base.score_mode).test.clone(),
    }];
    let mut seen = Vec::new();
    for &t in toggles {
        if seen.contains(&t) {
            continue;
        }
        seen.push(t);
        let result = if t == Toggle::AScore {
            full.r_score.test.clone()
        } else {
            let mut cfg = base.clone();
            match t {
                Toggle::MirroredLoss => cfg.mirrored = false,
                Toggle::SimplexInterp => cfg.interp_enabled = false,
                Toggle::AtypicalSelection => cfg.negative_mode = NegativeMode::None,
                Toggle::AScore => unreachable!(),
            }
            let run = run_on_splits(&cfg, splits, sub(t.tag())?.as_ref(), t.tag()).map_err(|e| with_variant(e, t.tag()))?;
            run.mode(cfg.score_mode).test.clone()
        };
        rows.push(AblationRow {
            variant: t.variant_name().into(),
            result,
        });
    }
    let report = AblationReport { full, rows };
    if let Some(d) = dir {
        report.table().write(d, "ablation")?;
    }
    Ok(report)
}

/// Atypical selection against uniform cube negatives on the same splits.
/// `atypical` reuses an existing atypical run when given.
pub fn run_sampler_comparison(
    base: &ExperimentConfig,
    splits: &Splits,
    atypical: Option<&ExperimentResult>,
    dir: Option<&Path>,
) -> Result<ResultTable> {
    let sub = |tag: &str| dir.map(|d| RunDirectory::create(&d.join(tag))).transpose();
    let mut cfg = base.clone();
    cfg.negative_mode = NegativeMode::Atypical;
    let owned;
    let atypical = match atypical {
        Some(a) => a,
        None => {
            owned = run_on_splits(&cfg, splits, sub("atypical")?.as_ref(), "atypical")?;
            &owned
        }
    };
    cfg.negative_mode = NegativeMode::Sipple;
    let sipple = run_on_splits(&cfg, splits, sub("sipple")?.as_ref(), "sipple").map_err(|e| with_variant(e, "sipple"))?;
    let mut table = ResultTable::new("negative sampler", &["AUROC"]);
    table.push("Atypical Selection", vec![Some(atypical.test_auroc())])?;
    table.push("Sipple cube", vec![Some(sipple.test_auroc())])?;
    if let Some(d) = dir {
        table.write(d, "sampler")?;
    }
    Ok(table)
}

const MNIST_ONE_CLASS_TARGETS: [f64; 10] = [0.986, 0.998, 0.882, 0.891, 0.894, 0.938, 0.981, 0.983, 0.876, 0.948];

/// Named experiments with their published target AUROCs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    FmnistVsMnist,
    CifarVsSvhn,
    SvhnVsCifar,
    MnistOneClass(u8),
    AtypicalVsSipple,
}

impl FromStr for Preset {
    type Err = AmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmnist_vs_mnist" => Ok(Preset::FmnistVsMnist),
            "cifar_vs_svhn" => Ok(Preset::CifarVsSvhn),
            "svhn_vs_cifar" => Ok(Preset::SvhnVsCifar),
            "atypical_vs_sipple" => Ok(Preset::AtypicalVsSipple),
            other => match other.strip_prefix("mnist_one_class_").and_then(|d| d.parse::<u8>().ok()) {
                Some(d) if d <= 9 => Ok(Preset::MnistOneClass(d)),
                _ => Err(AmaError::config(
                    "preset",
                    format!(
                        "unknown preset `{other}` (expected fmnist_vs_mnist, cifar_vs_svhn, svhn_vs_cifar, mnist_one_class_0..9 or atypical_vs_sipple)"
                    ),
                )),
            },
        }
    }
}

impl Preset {
    pub fn name(self) -> String {
        match self {
            Preset::FmnistVsMnist => "fmnist_vs_mnist".into(),
            Preset::CifarVsSvhn => "cifar_vs_svhn".into(),
            Preset::SvhnVsCifar => "svhn_vs_cifar".into(),
            Preset::MnistOneClass(d) => format!("mnist_one_class_{d}"),
            Preset::AtypicalVsSipple => "atypical_vs_sipple".into(),
        }
    }

    pub fn config(self, profile: Profile) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_profile(profile);
        let (normal, ood) = match self {
            Preset::FmnistVsMnist => ("fashion_mnist", Some("mnist")),
            Preset::CifarVsSvhn | Preset::AtypicalVsSipple => ("cifar10", Some("svhn")),
            Preset::SvhnVsCifar => ("svhn", Some("cifar10")),
            Preset::MnistOneClass(_) => ("mnist", None),
        };
        cfg.normal_dataset = normal.into();
        cfg.ood_dataset = ood.map(String::from);
        cfg.direction = if normal == "cifar10" { Direction::Inward } else { Direction::Outward };
        if let Preset::MnistOneClass(d) = self {
            cfg.scenario = Scenario::OneClass;
            cfg.normal_label = Some(d);
        }
        cfg
    }

    /// `(row, target AUROC)` pairs of the published comparison.
    pub fn targets(self) -> Vec<(&'static str, f64)> {
        match self {
            Preset::FmnistVsMnist => vec![("AMA", 0.987)],
            Preset::CifarVsSvhn => vec![("AMA", 0.958)],
            Preset::SvhnVsCifar => vec![("AMA", 0.993)],
            Preset::MnistOneClass(d) => vec![("AMA", MNIST_ONE_CLASS_TARGETS[d as usize])],
            Preset::AtypicalVsSipple => vec![("Atypical Selection", 0.958), ("Sipple cube", 0.819)],
        }
    }
}

/// Runs a preset under `root` and writes the measured-vs-target table to
/// `reports/reproduce.{csv,md}`.
pub fn reproduce(preset: Preset, cfg: &ExperimentConfig, root: &Path) -> Result<(RunDirectory, ResultTable)> {
    let dir = RunDirectory::create(root)?;
    dir.write_config(cfg)?;
    let splits = build_splits(cfg)?;
    let measured: Vec<f64> = match preset {
        Preset::AtypicalVsSipple => {
            let t = run_sampler_comparison(cfg, &splits, None, Some(&root.join("runs")))?;
            t.rows.iter().map(|(_, v)| v[0].unwrap_or(f64::NAN)).collect()
        }
        _ => vec![run_on_splits(cfg, &splits, Some(&RunDirectory::create(&root.join("run"))?), &preset.name())?.test_auroc()],
    };
    let mut table = ResultTable::new(&preset.name(), &["measured", "target"]);
    for ((row, target), m) in preset.targets().into_iter().zip(measured) {
        table.push(row, vec![Some(m), Some(target)])?;
    }
    table.write(&dir.reports(), "reproduce")?;
    Ok((dir, table))
}
