//! Readers for the published archive formats: IDX (MNIST family), the
//! CIFAR-10 binary batches and MATLAB level-5 files (SVHN).
//!
//! Every reader returns raw bytes in NHWC order plus class labels, and counts
//! damaged records instead of failing on them.

use std::io::Read;
use std::path::Path;

use crate::{AmaError, Result};

/// Decoded images as bytes, `[n, h, w, c]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawImages {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub skipped: usize,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AmaError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// An IDX image file (magic 2051) with its label file (magic 2049).
///
/// A truncated trailing image, or an image without a label, is skipped.
pub fn read_idx(images: &Path, labels: &Path) -> Result<RawImages> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    if be_u32(&img, 0) != Some(2051) {
        return Err(AmaError::data(images, "not an IDX image file (bad magic)"));
    }
    if be_u32(&lab, 0) != Some(2049) {
        return Err(AmaError::data(labels, "not an IDX label file (bad magic)"));
    }
    let (Some(n), Some(h), Some(w)) = (be_u32(&img, 4), be_u32(&img, 8), be_u32(&img, 12)) else {
        return Err(AmaError::data(images, "truncated IDX header"));
    };
    let n_labels = be_u32(&lab, 4).ok_or_else(|| AmaError::data(labels, "truncated IDX header"))?;
    let (n, h, w) = (n as usize, h as usize, w as usize);
    let size = h * w;
    let available_images = img.len().saturating_sub(16) / size.max(1);
    let available_labels = lab.len().saturating_sub(8).min(n_labels as usize);
    let usable = n.min(available_images).min(available_labels);
    let mut out = RawImages {
        height: h,
        width: w,
        channels: 1,
        pixels: img[16..16 + usable * size].to_vec(),
        labels: lab[8..8 + usable].to_vec(),
        skipped: n - usable,
    };
    if let Some(bad) = out.labels.iter().position(|&l| l > 9) {
        // keep the sample order, drop the records with impossible labels
        let keep: Vec<usize> = (0..usable).filter(|&i| out.labels[i] <= 9).collect();
        out.skipped += usable - keep.len();
        out.pixels = keep.iter().flat_map(|&i| img[16 + i * size..16 + (i + 1) * size].iter().copied()).collect();
        out.labels = keep.iter().map(|&i| lab[8 + i]).collect();
        log::warn!("{}: record {bad} and others carry labels above 9", labels.display());
    }
    if out.skipped > 0 {
        log::warn!("{}: skipped {} damaged records", images.display(), out.skipped);
    }
    Ok(out)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batches: 1 label byte then 3072 bytes in channel-major order.
pub fn read_cifar10(files: &[impl AsRef<Path>]) -> Result<RawImages> {
    let mut out = RawImages {
        height: 32,
        width: 32,
        channels: 3,
        ..Default::default()
    };
    for file in files {
        let path = file.as_ref();
        let bytes = read_file(path)?;
        let records = bytes.chunks(CIFAR_RECORD);
        for rec in records {
            if rec.len() != CIFAR_RECORD || rec[0] > 9 {
                out.skipped += 1;
                continue;
            }
            out.labels.push(rec[0]);
            let planes = &rec[1..];
            for p in 0..1024 {
                for c in 0..3 {
                    out.pixels.push(planes[c * 1024 + p]);
                }
            }
        }
    }
    if out.skipped > 0 {
        log::warn!("cifar10: skipped {} damaged records", out.skipped);
    }
    Ok(out)
}

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

/// A numeric array from a MATLAB level-5 file.
#[derive(Clone, Debug, PartialEq)]
pub struct MatArray {
    pub name: String,
    /// Column-major dimensions.
    pub dims: Vec<usize>,
    pub values: MatValues,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatValues {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    little: bool,
}

impl<'a> Cursor<'a> {
    fn u32(&self, at: usize) -> Option<u32> {
        let b = self.bytes.get(at..at + 4)?;
        let arr = [b[0], b[1], b[2], b[3]];
        Some(if self.little { u32::from_le_bytes(arr) } else { u32::from_be_bytes(arr) })
    }

    /// Next `(type, payload)` element, honouring the packed small-element form.
    fn element(&mut self) -> Option<(u32, &'a [u8])> {
        let first = self.u32(self.pos)?;
        if first >> 16 != 0 {
            let (ty, len) = (first & 0xffff, (first >> 16) as usize);
            let data = self.bytes.get(self.pos + 4..self.pos + 4 + len)?;
            self.pos += 8;
            return Some((ty, data));
        }
        let len = self.u32(self.pos + 4)? as usize;
        let data = self.bytes.get(self.pos + 8..self.pos + 8 + len)?;
        // compressed elements are not padded
        let padded = if first == MI_COMPRESSED { len } else { len.div_ceil(8) * 8 };
        self.pos += 8 + padded;
        Some((first, data))
    }
}

fn numeric(ty: u32, data: &[u8], little: bool) -> Option<MatValues> {
    let word = |b: &[u8]| -> [u8; 8] {
        let mut a = [0u8; 8];
        a[..b.len()].copy_from_slice(b);
        a
    };
    let from = |w: [u8; 8], n: usize| -> u64 {
        let mut a = [0u8; 8];
        if little {
            a[..n].copy_from_slice(&w[..n]);
            u64::from_le_bytes(a)
        } else {
            a[8 - n..].copy_from_slice(&w[..n]);
            u64::from_be_bytes(a)
        }
    };
    let ints = |n: usize, signed: bool| -> Vec<f64> {
        data.chunks_exact(n)
            .map(|c| {
                let raw = from(word(c), n);
                if signed {
                    let shift = 64 - 8 * n as u32;
                    (((raw << shift) as i64) >> shift) as f64
                } else {
                    raw as f64
                }
            })
            .collect()
    };
    Some(match ty {
        MI_UINT8 => MatValues::U8(data.to_vec()),
        MI_INT8 => MatValues::F64(ints(1, true)),
        MI_INT16 => MatValues::F64(ints(2, true)),
        MI_UINT16 => MatValues::F64(ints(2, false)),
        MI_INT32 => MatValues::F64(ints(4, true)),
        MI_UINT32 => MatValues::F64(ints(4, false)),
        MI_SINGLE => MatValues::F64(
            data.chunks_exact(4)
                .map(|c| f32::from_bits(from(word(c), 4) as u32) as f64)
                .collect(),
        ),
        MI_DOUBLE => MatValues::F64(data.chunks_exact(8).map(|c| f64::from_bits(from(word(c), 8))).collect()),
        _ => return None,
    })
}

fn parse_matrix(data: &[u8], little: bool) -> Option<MatArray> {
    let mut cur = Cursor { bytes: data, pos: 0, little };
    let (_, _flags) = cur.element()?;
    let (_, dims_raw) = cur.element()?;
    let dims: Vec<usize> = dims_raw
        .chunks_exact(4)
        .map(|c| {
            let a = [c[0], c[1], c[2], c[3]];
            (if little { i32::from_le_bytes(a) } else { i32::from_be_bytes(a) }) as usize
        })
        .collect();
    let (_, name) = cur.element()?;
    let (ty, real) = cur.element()?;
    let values = numeric(ty, real, little)?;
    let count: usize = dims.iter().product();
    let len = match &values {
        MatValues::U8(v) => v.len(),
        MatValues::F64(v) => v.len(),
    };
    (len == count).then(|| MatArray {
        name: String::from_utf8_lossy(name).into_owned(),
        dims,
        values,
    })
}

/// Every numeric matrix in a level-5 MAT file; other element kinds are ignored.
pub fn read_mat(path: &Path) -> Result<Vec<MatArray>> {
    let bytes = read_file(path)?;
    if bytes.len() < 128 {
        return Err(AmaError::data(path, "too short for a MAT-file header"));
    }
    let little = match &bytes[126..128] {
        b"IM" => true,
        b"MI" => false,
        _ => return Err(AmaError::data(path, "not a level-5 MAT file")),
    };
    let mut out = Vec::new();
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 128,
        little,
    };
    while cur.pos < bytes.len() {
        let Some((ty, data)) = cur.element() else {
            return Err(AmaError::data(path, format!("truncated element at byte {}", cur.pos)));
        };
        let inflated;
        let (ty, data) = if ty == MI_COMPRESSED {
            let mut buf = Vec::new();
            flate2::read::ZlibDecoder::new(data)
                .read_to_end(&mut buf)
                .map_err(|e| AmaError::data(path, format!("bad compressed element: {e}")))?;
            inflated = buf;
            let mut inner = Cursor {
                bytes: &inflated,
                pos: 0,
                little,
            };
            inner
                .element()
                .ok_or_else(|| AmaError::data(path, "empty compressed element"))?
        } else {
            (ty, data)
        };
        if ty == MI_MATRIX {
            match parse_matrix(data, little) {
                Some(m) => out.push(m),
                None => log::warn!("{}: skipped an unsupported matrix", path.display()),
            }
        }
    }
    Ok(out)
}

/// SVHN cropped-digit file: `X` is `32x32x3xN` bytes, `y` holds labels 1..=10
/// with 10 standing for digit 0.
pub fn read_svhn(path: &Path) -> Result<RawImages> {
    let arrays = read_mat(path)?;
    let find = |n: &str| arrays.iter().find(|a| a.name == n);
    let (Some(x), Some(y)) = (find("X"), find("y")) else {
        return Err(AmaError::data(path, "expected arrays `X` and `y`"));
    };
    let MatValues::U8(px) = &x.values else {
        return Err(AmaError::data(path, "`X` must be uint8"));
    };
    if x.dims.len() != 4 || x.dims[2] != 3 {
        return Err(AmaError::data(path, format!("`X` has dims {:?}, expected HxWx3xN", x.dims)));
    }
    let (h, w, n) = (x.dims[0], x.dims[1], x.dims[3]);
    let labels: Vec<f64> = match &y.values {
        MatValues::U8(v) => v.iter().map(|&b| b as f64).collect(),
        MatValues::F64(v) => v.clone(),
    };
    if labels.len() != n {
        return Err(AmaError::data(path, format!("{} labels for {n} images", labels.len())));
    }
    let mut out = RawImages {
        height: h,
        width: w,
        channels: 3,
        ..Default::default()
    };
    for (i, &l) in labels.iter().enumerate() {
        if !(1.0..=10.0).contains(&l) || l.fract() != 0.0 {
            out.skipped += 1;
            continue;
        }
        out.labels.push((l as u8) % 10);
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    // column-major: row fastest, then column, channel, sample
                    out.pixels.push(px[r + h * (c + w * (ch + 3 * i))]);
                }
            }
        }
    }
    if out.skipped > 0 {
        log::warn!("{}: skipped {} records with invalid labels", path.display(), out.skipped);
    }
    Ok(out)
}
