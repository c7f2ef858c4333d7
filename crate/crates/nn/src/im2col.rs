//! Patch extraction for NHWC convolutions.
//!
//! A patch row is ordered `(kh, kw, c)`, matching conv weights stored as
//! `[out, kh, kw, in]`.

use crate::Scalar;

/// Spatial geometry of a square-kernel convolution over an NHWC image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        in_h: usize,
        in_w: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            in_h,
            in_w,
            channels,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Valid kernel-column span `[k0, k1)` for output column `o`, with the first
/// input column it touches.
#[inline]
fn span(g: &ConvGeometry, o: usize) -> (usize, usize, usize) {
    let start = (o * g.stride) as isize - g.pad as isize;
    let k0 = (-start).max(0) as usize;
    let k1 = ((g.in_w as isize - start).min(g.kernel as isize)).max(0) as usize;
    (k0, k1.max(k0), (start + k0 as isize).max(0) as usize)
}

/// `[batch*out_h*out_w, kernel*kernel*channels]` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let c = g.channels;
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); batch * g.out_pixels() * plen];
    let img = g.in_h * g.in_w * c;
    let spans: Vec<_> = (0..g.out_w).map(|ow| span(g, ow)).collect();
    let mut row = 0;
    for n in 0..batch {
        let xin = &x[n * img..(n + 1) * img];
        for oh in 0..g.out_h {
            for &(k0, k1, iw0) in &spans {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                let width = (k1 - k0) * c;
                if width > 0 {
                    for kh in 0..g.kernel {
                        let Some(ih) = g.source(oh, kh, g.in_h) else { continue };
                        let s = (ih * g.in_w + iw0) * c;
                        let d = (kh * g.kernel + k0) * c;
                        dst[d..d + width].copy_from_slice(&xin[s..s + width]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto an NHWC image (adjoint of [`im2col`]).
pub fn col2im<T: Scalar>(cols: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let c = g.channels;
    let plen = g.patch_len();
    let img = g.in_h * g.in_w * c;
    let mut x = vec![T::zero(); batch * img];
    let spans: Vec<_> = (0..g.out_w).map(|ow| span(g, ow)).collect();
    let mut row = 0;
    for n in 0..batch {
        let xout = &mut x[n * img..(n + 1) * img];
        for oh in 0..g.out_h {
            for &(k0, k1, iw0) in &spans {
                let src = &cols[row * plen..(row + 1) * plen];
                let width = (k1 - k0) * c;
                if width > 0 {
                    for kh in 0..g.kernel {
                        let Some(ih) = g.source(oh, kh, g.in_h) else { continue };
                        let d = (ih * g.in_w + iw0) * c;
                        let s = (kh * g.kernel + k0) * c;
                        for (o, &v) in xout[d..d + width].iter_mut().zip(&src[s..s + width]) {
                            *o = *o + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}
