use crate::Scalar;

/// Dense row-major tensor.
///
/// Image activations use NHWC layout; feature activations are `[batch, features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} needs {numel} elements");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per batch row.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Batch row `i` as a slice.
    pub fn row(&self, i: usize) -> &[T] {
        let len = self.row_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Rows `start..start + count` as a new tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Self {
        let len = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self {
            shape,
            data: self.data[start * len..(start + count) * len].to_vec(),
        }
    }

    /// Gathers the listed batch rows.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let len = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * len);
        for &r in rows {
            data.extend_from_slice(&self.data[r * len..(r + 1) * len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tail = &parts[0].shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut batch = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "concat_batch shape mismatch");
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = batch;
        Self { shape, data }
    }

    /// Splits along the batch axis into consecutive chunks of the given sizes.
    pub fn split_batch(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.batch(), "split sizes");
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let t = self.slice_batch(start, s);
                start += s;
                t
            })
            .collect()
    }

    /// Concatenates two NHWC tensors along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!(a.shape.len(), 4, "concat_channels expects NHWC");
        assert_eq!(a.shape[..3], b.shape[..3], "concat_channels shape mismatch");
        let (ca, cb) = (a.shape[3], b.shape[3]);
        let pixels = a.shape[0] * a.shape[1] * a.shape[2];
        let mut data = Vec::with_capacity(a.len() + b.len());
        for p in 0..pixels {
            data.extend_from_slice(&a.data[p * ca..(p + 1) * ca]);
            data.extend_from_slice(&b.data[p * cb..(p + 1) * cb]);
        }
        let mut shape = a.shape.clone();
        shape[3] = ca + cb;
        Self { shape, data }
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert_eq!(self.shape.len(), 4, "split_channels expects NHWC");
        let c = self.shape[3];
        assert!(first <= c, "split point beyond channel count");
        let second = c - first;
        let pixels = self.shape[0] * self.shape[1] * self.shape[2];
        let mut a = Vec::with_capacity(pixels * first);
        let mut b = Vec::with_capacity(pixels * second);
        for p in 0..pixels {
            a.extend_from_slice(&self.data[p * c..p * c + first]);
            b.extend_from_slice(&self.data[p * c + first..(p + 1) * c]);
        }
        let mut sa = self.shape.clone();
        sa[3] = first;
        let mut sb = self.shape.clone();
        sb[3] = second;
        (Self::from_vec(&sa, a), Self::from_vec(&sb, b))
    }

    /// NCHW -> NHWC.
    pub fn nchw_to_nhwc(&self) -> Self {
        let [n, c, h, w] = self.dims4();
        let mut out = vec![T::zero(); self.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((b * h + y) * w + x) * c + ch] = self.data[((b * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
        Self::from_vec(&[n, h, w, c], out)
    }

    /// NHWC -> NCHW.
    pub fn nhwc_to_nchw(&self) -> Self {
        let [n, h, w, c] = self.dims4();
        let mut out = vec![T::zero(); self.len()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[((b * c + ch) * h + y) * w + x] = self.data[((b * h + y) * w + x) * c + ch];
                    }
                }
            }
        }
        Self::from_vec(&[n, c, h, w], out)
    }

    pub fn dims4(&self) -> [usize; 4] {
        assert_eq!(self.shape.len(), 4, "expected a rank-4 tensor, got {:?}", self.shape);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
