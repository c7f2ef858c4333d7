use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_dataset, DatasetSpec, DatasetSplit, ImageSet};
use crate::{AmaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One dataset is normal, another supplies anomalies.
    CrossDataset,
    /// One class is normal, the remaining classes are anomalies.
    OneClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub scenario: Scenario,
    pub normal_label: Option<u8>,
    /// Test anomalies per test normal.
    pub anomaly_fraction: f64,
    pub n_validation_anomalies: usize,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        Self {
            scenario: Scenario::CrossDataset,
            normal_label: None,
            anomaly_fraction: 0.2,
            n_validation_anomalies: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Normal,
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
}

/// One sample by provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub source: Source,
    pub partition: Partition,
    pub index: usize,
    pub class: u8,
    pub anomaly: bool,
}

/// Index-level description of a split, sufficient to rebuild it exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub protocol: SplitProtocol,
    pub normal_dataset: String,
    pub ood_dataset: Option<String>,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AmaError::config_general(format!("bad split manifest: {e}")))
    }
}

/// Images with binary anomaly labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: ImageSet,
    pub anomaly: Vec<bool>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.anomaly.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anomaly.is_empty()
    }

    pub fn count_anomalies(&self) -> usize {
        self.anomaly.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub manifest: SplitManifest,
    pub train: ImageSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

fn check_protocol(p: &SplitProtocol, expected: Scenario) -> Result<()> {
    if p.scenario != expected {
        return Err(AmaError::config("scenario", format!("expected {expected:?}, got {:?}", p.scenario)));
    }
    if !(p.anomaly_fraction > 0.0 && p.anomaly_fraction.is_finite()) {
        return Err(AmaError::config("anomaly_fraction", "must be positive"));
    }
    Ok(())
}

fn sref(source: Source, partition: Partition, index: usize, class: u8, anomaly: bool) -> SampleRef {
    SampleRef {
        source,
        partition,
        index,
        class,
        anomaly,
    }
}

struct Draw {
    train: Vec<usize>,
    val_normals: Vec<usize>,
}

/// Holds out `n_val` random training normals and caps the rest.
fn draw_train(mut normals: Vec<usize>, n_val: usize, max_train: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Draw> {
    if normals.len() <= n_val {
        return Err(AmaError::config(
            "n_validation_anomalies",
            format!("{} training normals cannot spare a holdout of {n_val}", normals.len()),
        ));
    }
    normals.shuffle(rng);
    let val_normals = normals.split_off(normals.len() - n_val);
    if let Some(cap) = max_train {
        normals.truncate(cap);
    }
    normals.sort_unstable();
    Ok(Draw {
        train: normals,
        val_normals,
    })
}

/// `(test, val)` anomaly picks from one shuffled pool, disjoint by construction.
fn draw_anomalies(mut pool: Vec<usize>, n_test: usize, n_val: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if pool.len() < n_test + n_val {
        return Err(AmaError::config(
            "anomaly_fraction",
            format!(
                "anomaly pool of {} is too small for {n_test} test and {n_val} validation anomalies",
                pool.len()
            ),
        ));
    }
    pool.shuffle(rng);
    let val = pool[n_test..n_test + n_val].to_vec();
    pool.truncate(n_test);
    Ok((pool, val))
}

fn test_anomaly_count(fraction: f64, normals: usize) -> usize {
    (fraction * normals as f64).round() as usize
}

/// Splits for the one-class scenario from the class labels alone.
pub fn plan_one_class(
    dataset: &str,
    train_labels: &[u8],
    test_labels: &[u8],
    protocol: &SplitProtocol,
    seed: u64,
    max_train: Option<usize>,
) -> Result<SplitManifest> {
    check_protocol(protocol, Scenario::OneClass)?;
    let Some(normal) = protocol.normal_label else {
        return Err(AmaError::config("normal_label", "required for the one_class scenario"));
    };
    if !train_labels.contains(&normal) {
        return Err(AmaError::config("normal_label", format!("class {normal} does not occur in {dataset}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_val = protocol.n_validation_anomalies;
    let train_normals: Vec<usize> = (0..train_labels.len()).filter(|&i| train_labels[i] == normal).collect();
    let draw = draw_train(train_normals, n_val, max_train, &mut rng)?;
    let test_normals: Vec<usize> = (0..test_labels.len()).filter(|&i| test_labels[i] == normal).collect();
    let pool: Vec<usize> = (0..test_labels.len()).filter(|&i| test_labels[i] != normal).collect();
    let n_test = test_anomaly_count(protocol.anomaly_fraction, test_normals.len());
    let (test_anom, val_anom) = draw_anomalies(pool, n_test, n_val, &mut rng)?;

    let (tr, te) = (Partition::Train, Partition::Test);
    let s = Source::Normal;
    Ok(SplitManifest {
        seed,
        protocol: protocol.clone(),
        normal_dataset: dataset.to_string(),
        ood_dataset: None,
        train: draw.train.iter().map(|&i| sref(s, tr, i, normal, false)).collect(),
        val: draw
            .val_normals
            .iter()
            .map(|&i| sref(s, tr, i, normal, false))
            .chain(val_anom.iter().map(|&i| sref(s, te, i, test_labels[i], true)))
            .collect(),
        test: test_normals
            .iter()
            .map(|&i| sref(s, te, i, normal, false))
            .chain(test_anom.iter().map(|&i| sref(s, te, i, test_labels[i], true)))
            .collect(),
    })
}

/// Splits for the cross-dataset scenario from the split sizes.
pub fn plan_cross_dataset(
    normal: (&str, &[u8], &[u8]),
    ood: (&str, &[u8]),
    protocol: &SplitProtocol,
    seed: u64,
    max_train: Option<usize>,
) -> Result<SplitManifest> {
    check_protocol(protocol, Scenario::CrossDataset)?;
    let (normal_name, train_labels, test_labels) = normal;
    let (ood_name, ood_labels) = ood;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_val = protocol.n_validation_anomalies;
    let draw = draw_train((0..train_labels.len()).collect(), n_val, max_train, &mut rng)?;
    let n_test = test_anomaly_count(protocol.anomaly_fraction, test_labels.len());
    let (test_anom, val_anom) = draw_anomalies((0..ood_labels.len()).collect(), n_test, n_val, &mut rng)?;
    let (tr, te) = (Partition::Train, Partition::Test);
    let (n, o) = (Source::Normal, Source::Ood);
    Ok(SplitManifest {
        seed,
        protocol: protocol.clone(),
        normal_dataset: normal_name.to_string(),
        ood_dataset: Some(ood_name.to_string()),
        train: draw.train.iter().map(|&i| sref(n, tr, i, train_labels[i], false)).collect(),
        val: draw
            .val_normals
            .iter()
            .map(|&i| sref(n, tr, i, train_labels[i], false))
            .chain(val_anom.iter().map(|&i| sref(o, te, i, ood_labels[i], true)))
            .collect(),
        test: (0..test_labels.len())
            .map(|i| sref(n, te, i, test_labels[i], false))
            .chain(test_anom.iter().map(|&i| sref(o, te, i, ood_labels[i], true)))
            .collect(),
    })
}

struct Sources<'a> {
    normal_train: &'a ImageSet,
    normal_test: &'a ImageSet,
    ood_test: Option<&'a ImageSet>,
}

impl Sources<'_> {
    fn set(&self, r: &SampleRef) -> &ImageSet {
        match (r.source, r.partition) {
            (Source::Normal, Partition::Train) => self.normal_train,
            (Source::Normal, Partition::Test) => self.normal_test,
            (Source::Ood, Partition::Test) => self.ood_test.expect("ood source loaded"),
            (Source::Ood, Partition::Train) => unreachable!("ood training samples are never drawn"),
        }
    }

    fn labeled(&self, refs: &[SampleRef]) -> LabeledSet {
        let first = self.normal_train;
        let mut images = ImageSet::empty(first.channels, first.height, first.width);
        for r in refs {
            images.push(self.set(r).image(r.index), r.class);
        }
        LabeledSet {
            images,
            anomaly: refs.iter().map(|r| r.anomaly).collect(),
        }
    }

    fn materialize(&self, manifest: SplitManifest) -> Splits {
        let train = self.labeled(&manifest.train).images;
        let val = self.labeled(&manifest.val);
        let test = self.labeled(&manifest.test);
        Splits {
            manifest,
            train,
            val,
            test,
        }
    }
}

pub fn build_one_class_split(
    dataset: &DatasetSpec,
    protocol: &SplitProtocol,
    seed: u64,
    max_train: Option<usize>,
) -> Result<Splits> {
    let train = load_dataset(dataset, DatasetSplit::Train)?.images;
    let test = load_dataset(dataset, DatasetSplit::Test)?.images;
    let manifest = plan_one_class(&dataset.name, &train.labels, &test.labels, protocol, seed, max_train)?;
    Ok(Sources {
        normal_train: &train,
        normal_test: &test,
        ood_test: None,
    }
    .materialize(manifest))
}

pub fn build_cross_dataset_split(
    normal: &DatasetSpec,
    ood: &DatasetSpec,
    protocol: &SplitProtocol,
    seed: u64,
    max_train: Option<usize>,
) -> Result<Splits> {
    if normal.output_shape() != ood.output_shape() {
        return Err(AmaError::config(
            "ood_dataset",
            format!(
                "{} delivers {:?} but {} delivers {:?}; adapt the OOD spec first",
                normal.name,
                normal.output_shape(),
                ood.name,
                ood.output_shape()
            ),
        ));
    }
    let train = load_dataset(normal, DatasetSplit::Train)?.images;
    let test = load_dataset(normal, DatasetSplit::Test)?.images;
    let ood_test = load_dataset(ood, DatasetSplit::Test)?.images;
    let manifest = plan_cross_dataset(
        (&normal.name, &train.labels, &test.labels),
        (&ood.name, &ood_test.labels),
        protocol,
        seed,
        max_train,
    )?;
    Ok(Sources {
        normal_train: &train,
        normal_test: &test,
        ood_test: Some(&ood_test),
    }
    .materialize(manifest))
}

/// Writes the manifest as JSON.
pub fn save_manifest(manifest: &SplitManifest, path: &Path) -> Result<()> {
    std::fs::write(path, manifest.to_json()).map_err(|e| AmaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn mnist_like_labels(per_class: usize) -> Vec<u8> {
        (0..10 * per_class).map(|i| (i % 10) as u8).collect()
    }

    fn one_class(normal: u8) -> SplitProtocol {
        SplitProtocol {
            scenario: Scenario::OneClass,
            normal_label: Some(normal),
            ..Default::default()
        }
    }

    #[test]
    fn one_class_counts_follow_the_fraction() {
        let train = mnist_like_labels(600);
        let mut test = mnist_like_labels(100);
        // 980 test normals of class 0
        test.extend(std::iter::repeat_n(0u8, 880));
        let m = plan_one_class("mnist", &train, &test, &one_class(0), 7, None).unwrap();
        let test_anomalies = m.test.iter().filter(|r| r.anomaly).count();
        assert_eq!(m.test.len() - test_anomalies, 980);
        assert_eq!(test_anomalies, 196);
        assert!(m.test.iter().filter(|r| r.anomaly).all(|r| r.class != 0));
        assert!(m.train.iter().all(|r| r.class == 0 && !r.anomaly));
        let val_anom: Vec<_> = m.val.iter().filter(|r| r.anomaly).collect();
        assert_eq!(val_anom.len(), 50);
        assert_eq!(m.val.len(), 100);
    }

    #[test]
    fn validation_and_test_anomalies_are_disjoint() {
        let train = mnist_like_labels(100);
        let test = mnist_like_labels(100);
        let m = plan_one_class("mnist", &train, &test, &one_class(3), 1, None).unwrap();
        let val: HashSet<_> = m.val.iter().filter(|r| r.anomaly).map(|r| (r.source, r.partition, r.index)).collect();
        assert!(m.test.iter().filter(|r| r.anomaly).all(|r| !val.contains(&(r.source, r.partition, r.index))));
        // the normal holdout leaves the training set
        let held: HashSet<_> = m.val.iter().filter(|r| !r.anomaly).map(|r| r.index).collect();
        assert!(m.train.iter().all(|r| !held.contains(&r.index)));
    }

    #[test]
    fn cross_dataset_draws_anomalies_from_the_ood_test_split() {
        let normal_train = vec![0u8; 500];
        let normal_test = vec![0u8; 10_000];
        let ood = vec![1u8; 26_032];
        let p = SplitProtocol::default();
        let m = plan_cross_dataset(("cifar10", &normal_train, &normal_test), ("svhn", &ood), &p, 3, None).unwrap();
        let anomalies: Vec<_> = m.test.iter().filter(|r| r.anomaly).collect();
        assert_eq!(anomalies.len(), 2000);
        assert!(anomalies.iter().all(|r| r.source == Source::Ood));
        assert_eq!(m.train.len(), 450);
        let again = plan_cross_dataset(("cifar10", &normal_train, &normal_test), ("svhn", &ood), &p, 3, None).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn small_pool_is_a_configuration_error() {
        let p = SplitProtocol {
            anomaly_fraction: 0.5,
            ..Default::default()
        };
        let err = plan_cross_dataset(("a", &[0; 200], &[0; 100]), ("b", &[0; 60]), &p, 0, None).unwrap_err();
        assert!(matches!(err, AmaError::Config { .. }));
    }

    #[test]
    fn training_cap_is_respected() {
        let m = plan_cross_dataset(("a", &[0; 1000], &[0; 100]), ("b", &[0; 500]), &SplitProtocol::default(), 0, Some(300)).unwrap();
        assert_eq!(m.train.len(), 300);
    }

    #[test]
    fn manifest_json_round_trips() {
        let m = plan_one_class("mnist", &mnist_like_labels(60), &mnist_like_labels(60), &one_class(5), 2, None).unwrap();
        assert_eq!(SplitManifest::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn mismatched_geometry_is_rejected_before_loading() {
        let root = Path::new("/nonexistent");
        let normal = DatasetSpec::standard("fashion_mnist", root).unwrap();
        let ood = DatasetSpec::standard("cifar10", root).unwrap();
        let err = build_cross_dataset_split(&normal, &ood, &SplitProtocol::default(), 0, None).unwrap_err();
        assert!(matches!(err, AmaError::Config { .. }));
    }
}
