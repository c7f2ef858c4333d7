//! Dataset ingestion, normalization to `[-1, 1]`, and split construction.
//!
//! Supported layouts under a dataset root (one directory per dataset):
//!
//! | name            | files                                                        |
//! |-----------------|--------------------------------------------------------------|
//! | `mnist`         | `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`, `t10k-*` |
//! | `fashion_mnist` | same as `mnist`                                              |
//! | `cifar10`       | `cifar-10-batches-bin/data_batch_{1..5}.bin`, `test_batch.bin` |
//! | `svhn`          | `train_32x32.mat`, `test_32x32.mat`                          |

pub mod formats;
mod split;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ama_nn::{Scalar, Tensor};

pub use split::{
    build_cross_dataset_split, build_one_class_split, plan_cross_dataset, plan_one_class, LabeledSet, Partition,
    save_manifest, SampleRef, Scenario, Source, SplitManifest, SplitProtocol, Splits,
};

use crate::{AmaError, Result};

/// Declared value range of normalized pixels.
pub const VALUE_RANGE: (f32, f32) = (-1.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSplit {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Idx,
    Cifar10,
    Svhn,
}

/// Where a dataset lives and the geometry it is delivered in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub root_path: PathBuf,
    /// Output channels after adaptation.
    pub channels: usize,
    pub native_size: (usize, usize),
    pub target_size: (usize, usize),
}

fn format_of(name: &str) -> Option<(Format, usize, (usize, usize))> {
    Some(match name {
        "mnist" | "fashion_mnist" => (Format::Idx, 1, (28, 28)),
        "cifar10" => (Format::Cifar10, 3, (32, 32)),
        "svhn" => (Format::Svhn, 3, (32, 32)),
        _ => return None,
    })
}

/// Names accepted by [`DatasetSpec::standard`].
pub const KNOWN_DATASETS: [&str; 4] = ["mnist", "fashion_mnist", "cifar10", "svhn"];

impl DatasetSpec {
    /// A known dataset at `data_root/<name>`, delivered at native geometry.
    pub fn standard(name: &str, data_root: &Path) -> Result<Self> {
        let Some((_, channels, native)) = format_of(name) else {
            return Err(AmaError::config(
                "normal_dataset",
                format!("unknown dataset `{name}` (known: {})", KNOWN_DATASETS.join(", ")),
            ));
        };
        Ok(Self {
            name: name.to_string(),
            root_path: data_root.join(name),
            channels,
            native_size: native,
            target_size: native,
        })
    }

    /// Delivers this dataset in `other`'s channel count and size.
    pub fn adapted_to(mut self, other: &DatasetSpec) -> Self {
        self.channels = other.channels;
        self.target_size = other.target_size;
        self
    }

    pub fn with_target_size(mut self, size: usize) -> Self {
        self.target_size = (size, size);
        self
    }

    pub fn native_channels(&self) -> usize {
        format_of(&self.name).map(|f| f.1).unwrap_or(self.channels)
    }

    /// `(channels, height, width)` of the delivered images.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.target_size.0, self.target_size.1)
    }

    fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(AmaError::config("channels", format!("{} must be 1 or 3", self.channels)));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(AmaError::config("image_size", "target size must be positive"));
        }
        Ok(())
    }
}

/// A batch of normalized images. The tensor is stored `[batch, h, w, c]`;
/// [`ImageBatch::shape_bchw`] reports the logical `(B, C, H, W)` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    pub tensor: Tensor<T>,
    pub value_range: (f32, f32),
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(AmaError::contract(format!("image batch must be rank 4, got {:?}", tensor.shape())));
        }
        Ok(Self {
            tensor,
            value_range: VALUE_RANGE,
        })
    }

    pub fn len(&self) -> usize {
        self.tensor.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape_bchw(&self) -> (usize, usize, usize, usize) {
        let [n, h, w, c] = self.tensor.dims4();
        (n, c, h, w)
    }

    pub fn within_range(&self) -> bool {
        let (lo, hi) = (self.value_range.0 as f64, self.value_range.1 as f64);
        self.tensor.data().iter().all(|v| (lo..=hi).contains(&v.as_f64()))
    }

    /// Pixels in `(B, C, H, W)` order.
    pub fn to_nchw(&self) -> Tensor<T> {
        self.tensor.nhwc_to_nchw()
    }
}

/// Normalized images held in memory, `[n, h, w, c]`, with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f32], label: u8) {
        assert_eq!(image.len(), self.image_len());
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let mut out = ImageSet::empty(self.channels, self.height, self.width);
        out.pixels.reserve(indices.len() * self.image_len());
        for &i in indices {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    /// Images at `indices` as a `[n, h, w, c]` tensor.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::from_vec(&[indices.len(), self.height, self.width, self.channels], data)
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> ImageBatch<T> {
        ImageBatch::new(self.gather(indices)).expect("gathered tensors are rank 4")
    }

    /// Consecutive batches over the set; shuffled deterministically when a
    /// seed is given. The final batch may be short.
    pub fn batches<T: Scalar>(&self, batch_size: usize, seed: Option<u64>) -> impl Iterator<Item = (Vec<usize>, ImageBatch<T>)> + '_ {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        }
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |idx| {
            let b = self.batch(&idx);
            (idx, b)
        })
    }

    /// Concatenates sets of identical geometry.
    pub fn concat(parts: &[&ImageSet]) -> ImageSet {
        let first = parts.first().expect("at least one part");
        let mut out = ImageSet::empty(first.channels, first.height, first.width);
        for p in parts {
            assert_eq!((p.channels, p.height, p.width), (first.channels, first.height, first.width));
            out.pixels.extend_from_slice(&p.pixels);
            out.labels.extend_from_slice(&p.labels);
        }
        out
    }
}

/// Byte 0 maps to -1 and byte 255 to +1.
pub fn normalize_byte(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Grayscale to RGB by replication, RGB to grayscale by BT.601 luminance.
pub fn adapt_channels(image: &[f32], pixels: usize, from: usize, to: usize) -> Vec<f32> {
    match (from, to) {
        (a, b) if a == b => image.to_vec(),
        (1, 3) => image.iter().flat_map(|&v| [v, v, v]).collect(),
        (3, 1) => image
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect(),
        _ => panic!("cannot adapt {from} channels to {to} for {pixels} pixels"),
    }
}

/// Bilinear resize of one `[h, w, c]` image with half-pixel centres.
pub fn resize_bilinear(image: &[f32], (h, w): (usize, usize), c: usize, (th, tw): (usize, usize)) -> Vec<f32> {
    if (h, w) == (th, tw) {
        return image.to_vec();
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len - 1);
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = axis(th, h);
    let xs = axis(tw, w);
    let mut out = Vec::with_capacity(th * tw * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| image[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Result of reading one split of a dataset.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub images: ImageSet,
    /// Damaged records left out.
    pub skipped: usize,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(AmaError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
        ))
    }
}

/// Reads one split, normalizes it, and adapts it to the requested geometry.
pub fn load_dataset(spec: &DatasetSpec, split: DatasetSplit) -> Result<LoadedSplit> {
    spec.validate()?;
    let Some((format, _, _)) = format_of(&spec.name) else {
        return Err(AmaError::config("normal_dataset", format!("unknown dataset `{}`", spec.name)));
    };
    if !spec.root_path.is_dir() {
        return Err(AmaError::io(
            &spec.root_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let root = &spec.root_path;
    let raw = match (format, split) {
        (Format::Idx, s) => {
            let stem = if s == DatasetSplit::Train { "train" } else { "t10k" };
            formats::read_idx(
                &require(root.join(format!("{stem}-images-idx3-ubyte")))?,
                &require(root.join(format!("{stem}-labels-idx1-ubyte")))?,
            )?
        }
        (Format::Cifar10, s) => {
            let dir = if root.join("cifar-10-batches-bin").is_dir() {
                root.join("cifar-10-batches-bin")
            } else {
                root.clone()
            };
            let files: Vec<PathBuf> = if s == DatasetSplit::Train {
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
            } else {
                vec![dir.join("test_batch.bin")]
            };
            let files = files.into_iter().map(require).collect::<Result<Vec<_>>>()?;
            formats::read_cifar10(&files)?
        }
        (Format::Svhn, s) => {
            let name = if s == DatasetSplit::Train { "train_32x32.mat" } else { "test_32x32.mat" };
            formats::read_svhn(&require(root.join(name))?)?
        }
    };
    let (th, tw) = spec.target_size;
    let mut images = ImageSet::empty(spec.channels, th, tw);
    images.pixels.reserve(raw.len() * images.image_len());
    let src_len = raw.height * raw.width * raw.channels;
    let mut buf = Vec::with_capacity(src_len);
    for (i, &label) in raw.labels.iter().enumerate() {
        buf.clear();
        buf.extend(raw.pixels[i * src_len..(i + 1) * src_len].iter().map(|&b| normalize_byte(b)));
        let adapted = adapt_channels(&buf, raw.height * raw.width, raw.channels, spec.channels);
        let resized = resize_bilinear(&adapted, (raw.height, raw.width), spec.channels, (th, tw));
        images.push(&resized, label);
    }
    Ok(LoadedSplit {
        images,
        skipped: raw.skipped,
    })
}
