//! Experiment configuration: one flat JSON record with profile overlays.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{Scenario, SplitProtocol};
use crate::latent::{AtypicalConfig, Direction, NegativeMode, SimplexConfig};
use crate::losses::LossWeights;
use crate::model::ModelSpec;
use crate::scoring::ScoreMode;
use crate::{AmaError, Result};

/// Environment variable that overrides the dataset root.
pub const DATA_ROOT_ENV: &str = "AMA_DATA_ROOT";

/// Named bundle of defaults laid under a config file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-scale hyperparameters.
    Paper,
    /// Reduced budget that trains in minutes on one CPU core.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = AmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(AmaError::config("profile", format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    // data
    pub normal_dataset: String,
    pub ood_dataset: Option<String>,
    pub data_root: Option<String>,
    pub scenario: Scenario,
    pub normal_label: Option<u8>,
    pub anomaly_fraction: f64,
    pub n_validation_anomalies: usize,
    pub max_train_samples: Option<usize>,
    pub image_size: Option<usize>,

    // networks
    pub latent_dim: usize,
    pub width: usize,
    pub residual: bool,
    pub latent_norm: bool,
    pub mirrored: bool,
    pub leaky_slope: f64,

    // objective
    pub lambda_inter: f64,
    pub lambda_neg: f64,
    pub lambda_reg: f64,
    pub interp_enabled: bool,
    pub interp_k: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub negative_mode: NegativeMode,
    pub delta: f64,
    pub direction: Direction,
    pub delta_grid: Vec<f64>,
    pub direction_grid: Vec<Direction>,
    pub sipple_half_width: f64,

    // scoring
    pub score_mode: ScoreMode,
    pub variance_floor: f64,
    pub score_batch_size: usize,

    // optimization
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub adam_gd_beta1: f64,
    pub adam_gd_beta2: f64,
    pub adam_e_beta1: f64,
    pub adam_e_beta2: f64,
    pub n_critic: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            normal_dataset: "cifar10".into(),
            ood_dataset: Some("svhn".into()),
            data_root: None,
            scenario: Scenario::CrossDataset,
            normal_label: None,
            anomaly_fraction: 0.2,
            n_validation_anomalies: 50,
            max_train_samples: None,
            image_size: None,
            latent_dim: 128,
            width: 128,
            residual: true,
            latent_norm: false,
            mirrored: true,
            leaky_slope: 0.2,
            lambda_inter: 0.5,
            lambda_neg: 5.0,
            lambda_reg: 1.0,
            interp_enabled: true,
            interp_k: 3,
            alpha_low: 0.0,
            alpha_high: 0.5,
            negative_mode: NegativeMode::Atypical,
            delta: 1.0,
            direction: Direction::Outward,
            delta_grid: vec![0.25, 0.5, 1.0, 2.0],
            direction_grid: vec![Direction::Inward, Direction::Outward],
            sipple_half_width: 1.0,
            score_mode: ScoreMode::AScore,
            variance_floor: 1e-12,
            score_batch_size: 256,
            epochs: 100,
            batch_size: 256,
            warmup_epochs: 10,
            lr: 3e-4,
            lr_decay_epochs: vec![30, 60, 90],
            lr_decay_factor: 0.1,
            adam_gd_beta1: 0.0,
            adam_gd_beta2: 0.9,
            adam_e_beta1: 0.5,
            adam_e_beta2: 0.9,
            n_critic: 1,
            checkpoint_every: 5,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = Self::default();
        if profile == Profile::Desk {
            cfg.epochs = 25;
            cfg.batch_size = 128;
            cfg.warmup_epochs = 3;
            cfg.lr_decay_epochs = vec![7, 15, 22];
            cfg.latent_dim = 32;
            cfg.width = 8;
            cfg.residual = false;
            cfg.latent_norm = true;
            cfg.lr = 2e-3;
            cfg.lambda_neg = 0.1;
            cfg.lambda_reg = 0.1;
            cfg.max_train_samples = Some(6000);
            cfg.delta_grid = Vec::new();
            cfg.direction_grid = Vec::new();
        }
        cfg
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_inter: self.lambda_inter,
            lambda_neg: self.lambda_neg,
            lambda_reg: self.lambda_reg,
        }
    }

    pub fn simplex(&self) -> SimplexConfig {
        SimplexConfig {
            k: self.interp_k,
            alpha_range: (self.alpha_low, self.alpha_high),
        }
    }

    pub fn atypical(&self) -> AtypicalConfig {
        AtypicalConfig {
            d: self.latent_dim,
            delta: self.delta,
            direction: self.direction,
        }
    }

    pub fn protocol(&self) -> SplitProtocol {
        SplitProtocol {
            scenario: self.scenario,
            normal_label: self.normal_label,
            anomaly_fraction: self.anomaly_fraction,
            n_validation_anomalies: self.n_validation_anomalies,
        }
    }

    /// Architecture for images of shape `(C, H, W)`.
    pub fn model_spec(&self, image_shape: (usize, usize, usize)) -> ModelSpec {
        ModelSpec {
            image_shape,
            latent_dim: self.latent_dim,
            width: self.width,
            residual: self.residual,
            latent_norm: self.latent_norm,
            mirrored: self.mirrored,
            leaky_slope: self.leaky_slope,
        }
    }

    /// Checks every invariant, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_inter", self.lambda_inter),
            ("lambda_neg", self.lambda_neg),
            ("lambda_reg", self.lambda_reg),
            ("delta", self.delta),
            ("alpha_low", self.alpha_low),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AmaError::config(key, format!("must be a finite non-negative number, got {v}")));
            }
        }
        let positive = [
            ("lr", self.lr),
            ("anomaly_fraction", self.anomaly_fraction),
            ("lr_decay_factor", self.lr_decay_factor),
            ("sipple_half_width", self.sipple_half_width),
            ("variance_floor", self.variance_floor),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AmaError::config(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [
            ("adam_gd_beta1", self.adam_gd_beta1),
            ("adam_gd_beta2", self.adam_gd_beta2),
            ("adam_e_beta1", self.adam_e_beta1),
            ("adam_e_beta2", self.adam_e_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(AmaError::config(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if self.alpha_high <= self.alpha_low || !self.alpha_high.is_finite() {
            return Err(AmaError::config("alpha_high", "must exceed alpha_low"));
        }
        if self.interp_k < 2 {
            return Err(AmaError::config("interp_k", "at least 2 codes are needed to interpolate"));
        }
        for (key, v) in [
            ("latent_dim", self.latent_dim),
            ("width", self.width),
            ("epochs", self.epochs),
            ("n_critic", self.n_critic),
            ("checkpoint_every", self.checkpoint_every),
            ("score_batch_size", self.score_batch_size),
            ("n_validation_anomalies", self.n_validation_anomalies),
        ] {
            if v == 0 {
                return Err(AmaError::config(key, "must be at least 1"));
            }
        }
        if self.batch_size < 2 {
            return Err(AmaError::config("batch_size", "batch statistics need at least 2 samples"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(AmaError::config(
                "warmup_epochs",
                format!("must be below epochs ({} >= {})", self.warmup_epochs, self.epochs),
            ));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(AmaError::config("lr_decay_epochs", "must be strictly increasing"));
        }
        if !(0.0..=1.0).contains(&self.leaky_slope) {
            return Err(AmaError::config("leaky_slope", "must lie in [0, 1]"));
        }
        let radius = (self.latent_dim as f64).sqrt();
        let inward_search = self.direction_grid.contains(&Direction::Inward);
        if self.direction == Direction::Inward && self.delta >= radius {
            return Err(AmaError::config(
                "delta",
                format!("inward band needs delta < sqrt(latent_dim) = {radius:.4}"),
            ));
        }
        if let Some(bad) = self.delta_grid.iter().find(|d| !(**d >= 0.0) || (inward_search && **d >= radius)) {
            return Err(AmaError::config("delta_grid", format!("invalid band width {bad}")));
        }
        if self.delta_grid.is_empty() != self.direction_grid.is_empty() {
            return Err(AmaError::config(
                "delta_grid",
                "delta_grid and direction_grid must both be empty or both be set",
            ));
        }
        match self.scenario {
            Scenario::OneClass => {
                let Some(label) = self.normal_label else {
                    return Err(AmaError::config("normal_label", "required for the one_class scenario"));
                };
                if label > 9 {
                    return Err(AmaError::config("normal_label", format!("class {label} is not in 0..=9")));
                }
            }
            Scenario::CrossDataset => {
                if self.ood_dataset.is_none() {
                    return Err(AmaError::config("ood_dataset", "required for the cross_dataset scenario"));
                }
                if self.normal_label.is_some() {
                    return Err(AmaError::config("normal_label", "only meaningful for the one_class scenario"));
                }
            }
        }
        if self.max_train_samples == Some(0) {
            return Err(AmaError::config("max_train_samples", "must be at least 1 when set"));
        }
        if let Some(s) = self.image_size {
            if s < 8 {
                return Err(AmaError::config("image_size", "images must be at least 8 pixels wide"));
            }
        }
        Ok(())
    }

    /// Dataset root: the environment override, else the config value, else `data`.
    pub fn resolved_data_root(&self) -> PathBuf {
        if let Ok(env) = std::env::var(DATA_ROOT_ENV) {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        PathBuf::from(self.data_root.as_deref().unwrap_or("data"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Every key a config file may set.
pub fn config_keys() -> Vec<String> {
    match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("config serializes to an object"),
    }
}

/// Parses config text over the given profile's defaults.
///
/// Empty text yields the profile defaults. Unknown keys are rejected with the
/// closest known key as a suggestion.
pub fn parse_config_str(text: &str, profile: Profile) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::for_profile(profile);
    let overrides: Map<String, Value> = if text.trim().is_empty() {
        Map::new()
    } else {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(map)) => map,
            Ok(_) => return Err(AmaError::config_general("config must be a JSON object")),
            Err(e) => return Err(AmaError::config_general(format!("malformed JSON: {e}"))),
        }
    };
    let Value::Object(mut merged) = serde_json::to_value(&base).expect("config serializes") else {
        unreachable!()
    };
    for (key, value) in overrides {
        if !merged.contains_key(&key) {
            let suggestion = merged
                .keys()
                .map(|k| (strsim::levenshtein(k, &key), k))
                .min()
                .filter(|(d, _)| *d <= 3)
                .map(|(_, k)| format!("; did you mean `{k}`?"))
                .unwrap_or_default();
            return Err(AmaError::config(key.clone(), format!("unknown key `{key}`{suggestion}")));
        }
        // validate each key on its own so a type error names the right field
        let mut probe = serde_json::to_value(&base).expect("config serializes");
        probe[&key] = value.clone();
        if let Err(e) = serde_json::from_value::<ExperimentConfig>(probe) {
            return Err(AmaError::config(key, format!("invalid value: {e}")));
        }
        merged.insert(key, value);
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| AmaError::config_general(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, profile: Profile) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AmaError::io(path, e))?;
    parse_config_str(&text, profile)
}
