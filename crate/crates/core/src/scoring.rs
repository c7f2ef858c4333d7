//! Reconstruction scores in critic feature space and the Gaussian
//! likelihood score built on top of them.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ama_nn::{Scalar, Tensor};

use crate::data::ImageSet;
use crate::model::Networks;
use crate::{AmaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// The raw feature distance.
    RScore,
    /// Negative log density of the feature distance under the training fit.
    AScore,
}

impl std::str::FromStr for ScoreMode {
    type Err = AmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" | "r_score" => Ok(ScoreMode::RScore),
            "a" | "a_score" => Ok(ScoreMode::AScore),
            other => Err(AmaError::config("score_mode", format!("unknown score mode `{other}` (expected r or a)"))),
        }
    }
}

/// `sum |f(x,x) - f(x, G(E(x)))|` per row of `x`.
///
/// Rows are independent in evaluation mode, so batching does not change
/// the result.
pub fn r_score<T: Scalar>(nets: &Networks<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
    nets.require_eval()?;
    let z = nets.encoder.net.infer(x);
    let x_rec = nets.generator.net.infer(&z);
    let critic = &nets.critic;
    let real = critic.body.infer(&critic.pair_input(x, x)?);
    let fake = critic.body.infer(&critic.pair_input(x, &x_rec)?);
    Ok((0..x.batch())
        .map(|i| {
            real.row(i)
                .iter()
                .zip(fake.row(i))
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .sum()
        })
        .collect())
}

/// R-scores of a whole image set, `batch_size` images at a time.
pub fn r_scores<T: Scalar>(nets: &Networks<T>, images: &ImageSet, batch_size: usize) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(AmaError::config("score_batch_size", "must be at least 1"));
    }
    let mut out = Vec::with_capacity(images.len());
    let all: Vec<usize> = (0..images.len()).collect();
    for chunk in all.chunks(batch_size) {
        out.extend(r_score(nets, &images.gather::<T>(chunk))?);
    }
    Ok(out)
}

/// Normal fit of training R-scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianScoreModel {
    pub mu: f64,
    /// Maximum-likelihood variance, never below `variance_floor`.
    pub sigma2: f64,
    pub variance_floor: f64,
    pub n_fit: usize,
}

pub fn fit_gaussian(scores: &[f64], floor: f64) -> Result<GaussianScoreModel> {
    if scores.len() < 2 {
        return Err(AmaError::config_general(format!(
            "a Gaussian fit needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(AmaError::contract(format!("non-finite score {bad} in the fit set")));
    }
    if !(floor > 0.0) {
        return Err(AmaError::config("variance_floor", "must be positive"));
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n;
    Ok(GaussianScoreModel {
        mu,
        sigma2: var.max(floor),
        variance_floor: floor,
        n_fit: scores.len(),
    })
}

impl GaussianScoreModel {
    /// `-ln A(r) = ln(sigma) + ln(2 pi)/2 + (r - mu)^2 / (2 sigma^2)`
    pub fn neg_log_density(&self, r: f64) -> f64 {
        0.5 * self.sigma2.ln() + 0.5 * (2.0 * PI).ln() + (r - self.mu).powi(2) / (2.0 * self.sigma2)
    }
}

/// Density of `r` under the fitted normal.
pub fn a_score(r: f64, model: &GaussianScoreModel) -> f64 {
    (-(r - model.mu).powi(2) / (2.0 * model.sigma2)).exp() / (2.0 * PI * model.sigma2).sqrt()
}

/// Orientation-fixed score (higher = more anomalous) from an R-score.
pub fn anomaly_score_from_r(r: f64, gaussian: Option<&GaussianScoreModel>, mode: ScoreMode) -> Result<f64> {
    match mode {
        ScoreMode::RScore => Ok(r),
        ScoreMode::AScore => gaussian
            .map(|g| g.neg_log_density(r))
            .ok_or_else(|| AmaError::config("score_mode", "a_score mode needs a fitted Gaussian")),
    }
}

/// Anomaly scores for a batch of images.
pub fn anomaly_score<T: Scalar>(
    x: &Tensor<T>,
    nets: &Networks<T>,
    gaussian: Option<&GaussianScoreModel>,
    mode: ScoreMode,
) -> Result<Vec<f64>> {
    if mode == ScoreMode::AScore && gaussian.is_none() {
        return Err(AmaError::config("score_mode", "a_score mode needs a fitted Gaussian"));
    }
    r_score(nets, x)?
        .into_iter()
        .map(|r| anomaly_score_from_r(r, gaussian, mode))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub label: bool,
    pub r_score: f64,
    /// Density under the fit, when one is available.
    pub a_score: Option<f64>,
    pub anomaly_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub score_mode: ScoreMode,
    pub gaussian: Option<GaussianScoreModel>,
    pub records: Vec<ScoreRecord>,
}

impl ScoreReport {
    pub fn from_r_scores(
        r: &[f64],
        labels: &[bool],
        gaussian: Option<&GaussianScoreModel>,
        mode: ScoreMode,
    ) -> Result<Self> {
        if r.len() != labels.len() {
            return Err(AmaError::contract(format!("{} scores for {} labels", r.len(), labels.len())));
        }
        let records = r
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&r, &label))| {
                Ok(ScoreRecord {
                    sample_id: i,
                    label,
                    r_score: r,
                    a_score: gaussian.map(|g| a_score(r, g)),
                    anomaly_score: anomaly_score_from_r(r, gaussian, mode)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            score_mode: mode,
            gaussian: gaussian.copied(),
            records,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,label,r_score,a_score,anomaly_score\n");
        for r in &self.records {
            let a = r.a_score.map(|v| format!("{v:e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:e},{},{:e}\n",
                r.sample_id, r.label as u8, r.r_score, a, r.anomaly_score
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| AmaError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| AmaError::io(path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("sample_id,label,r_score,a_score,anomaly_score") {
            return Err(AmaError::data(path, "missing score CSV header"));
        }
        lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let bad = || AmaError::data(path, format!("malformed row {}", i + 2));
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad());
                }
                let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
                Ok(ScoreRecord {
                    sample_id: f[0].trim().parse().map_err(|_| bad())?,
                    label: match f[1].trim() {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad()),
                    },
                    r_score: num(f[2])?,
                    a_score: if f[3].trim().is_empty() { None } else { Some(num(f[3])?) },
                    anomaly_score: num(f[4])?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(mu: f64, sigma2: f64) -> GaussianScoreModel {
        GaussianScoreModel {
            mu,
            sigma2,
            variance_floor: 1e-12,
            n_fit: 10,
        }
    }

    #[test]
    fn fit_examples() {
        let g = fit_gaussian(&[1.0, 2.0, 3.0], 1e-12).unwrap();
        assert!((g.mu - 2.0).abs() < 1e-15 && (g.sigma2 - 2.0 / 3.0).abs() < 1e-15);
        let flat = fit_gaussian(&[4.0, 4.0, 4.0], 1e-12).unwrap();
        assert_eq!((flat.mu, flat.sigma2), (4.0, 1e-12));
        assert!(matches!(fit_gaussian(&[1.0], 1e-12), Err(AmaError::Config { .. })));
        assert!(matches!(fit_gaussian(&[1.0, f64::NAN], 1e-12), Err(AmaError::Contract(_))));
    }

    #[test]
    fn density_examples() {
        assert!((a_score(0.0, &model(0.0, 1.0)) - 0.398_942_280_401_432_7).abs() < 1e-15);
        let m = model(2.0, 4.0);
        assert!((a_score(4.0, &m) - 0.120_985_362_259_571_6).abs() < 1e-12);
        for t in [0.1, 1.0, 7.5] {
            assert_eq!(a_score(2.0 + t, &m), a_score(2.0 - t, &m));
        }
    }

    #[test]
    fn neg_log_density_matches_the_density() {
        let m = model(1.3, 0.7);
        for r in [-3.0, 0.0, 1.3, 2.5, 9.0] {
            assert!((m.neg_log_density(r) + a_score(r, &m).ln()).abs() < 1e-12);
        }
        // far tails stay finite where the density underflows
        assert!(a_score(1e6, &m) == 0.0 && m.neg_log_density(1e6).is_finite());
    }

    #[test]
    fn modes_and_missing_fit() {
        assert_eq!(anomaly_score_from_r(3.5, None, ScoreMode::RScore).unwrap(), 3.5);
        assert!(matches!(anomaly_score_from_r(3.5, None, ScoreMode::AScore), Err(AmaError::Config { .. })));
        let m = model(5.0, 1.0);
        let at_mu = anomaly_score_from_r(5.0, Some(&m), ScoreMode::AScore).unwrap();
        let lo = anomaly_score_from_r(3.0, Some(&m), ScoreMode::AScore).unwrap();
        let hi = anomaly_score_from_r(7.0, Some(&m), ScoreMode::AScore).unwrap();
        assert!(at_mu < lo);
        assert!((lo - hi).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(1.0, 2.0);
        let report = ScoreReport::from_r_scores(&[0.5, 3.25], &[false, true], Some(&m), ScoreMode::AScore).unwrap();
        let path = dir.path().join("s.csv");
        report.write_csv(&path).unwrap();
        let back = ScoreReport::read_csv(&path).unwrap();
        assert_eq!(back, report.records);
    }
}
