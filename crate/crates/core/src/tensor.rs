//! Raster tensors and the low-level filtering kernels the encoder composes.
//!
//! Every operation here preserves the spatial size of its input: convolution
//! zero-pads, pooling has no stride and ignores out-of-bounds samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};

/// An `h x w x c` raster stored row-major as `[row][col][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(FlimError::domain(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(FlimError::domain(format!(
                "tensor data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FlimError::domain("tensor contains non-finite values"));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    /// All-zero tensor. Panics on a zero dimension.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "zero-sized tensor");
        ImageTensor {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for b in 0..channels {
                    data.push(f(r, c, b));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    // Internal constructor for operations that already guarantee the invariants.
    pub(crate) fn from_parts(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        ImageTensor {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Feature vector of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Copy of a single channel as a row-major plane.
    pub fn channel(&self, b: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(b)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// New tensor made of the listed channels, in the listed order.
    pub fn select_channels(&self, indices: &[usize]) -> Result<ImageTensor> {
        if indices.is_empty() {
            return Err(FlimError::domain("channel selection is empty"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.channels) {
            return Err(FlimError::domain(format!(
                "channel {bad} out of range for {} channels",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.height * self.width * indices.len());
        for px in self.data.chunks_exact(self.channels) {
            data.extend(indices.iter().map(|&i| px[i]));
        }
        Ok(ImageTensor::from_parts(
            self.height,
            self.width,
            indices.len(),
            data,
        ))
    }

    pub fn same_spatial_size(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// A flattened `k x k x c` neighbourhood sampled around one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    pub dilation: usize,
    pub data: Vec<f32>,
}

/// A convolution filter with the same layout as a [`Patch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    channels: usize,
    weights: Vec<f32>,
    norm: f32,
}

impl Kernel {
    pub fn new(size: usize, channels: usize, weights: Vec<f32>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(FlimError::domain(format!(
                "kernel size must be odd, got {size}"
            )));
        }
        if channels == 0 || weights.len() != size * size * channels {
            return Err(FlimError::domain(format!(
                "kernel of size {size}x{size}x{channels} needs {} weights, got {}",
                size * size * channels,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(FlimError::domain("kernel contains non-finite weights"));
        }
        let norm = l2_norm(&weights) as f32;
        Ok(Kernel {
            size,
            channels,
            weights,
            norm,
        })
    }

    /// Scale a weight vector to unit Euclidean norm. `None` for a zero vector.
    pub fn unit(size: usize, channels: usize, weights: &[f64]) -> Option<Result<Self>> {
        let n = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        if n <= f64::EPSILON {
            return None;
        }
        Some(Self::new(
            size,
            channels,
            weights.iter().map(|w| (w / n) as f32).collect(),
        ))
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    #[inline]
    pub fn norm(&self) -> f32 {
        self.norm
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Dot product with 64-bit accumulation. Lane order is fixed so results are
/// reproducible bit for bit.
#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] as f64 * y[0] as f64;
        acc[1] += x[1] as f64 * y[1] as f64;
        acc[2] += x[2] as f64 * y[2] as f64;
        acc[3] += x[3] as f64 * y[3] as f64;
    }
    let mut tail = 0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_window(size: usize, dilation: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(FlimError::domain(format!(
            "window size must be odd, got {size}"
        )));
    }
    if dilation == 0 {
        return Err(FlimError::domain("dilation must be >= 1"));
    }
    Ok(())
}

/// Writes the zero-padded dilated neighbourhood of `(row, col)` into `out`.
/// `out` must hold `size * size * channels` values.
fn gather_patch(
    image: &ImageTensor,
    row: usize,
    col: usize,
    size: usize,
    dilation: usize,
    out: &mut [f32],
) {
    let c = image.channels;
    let half = (size / 2) as isize;
    let d = dilation as isize;
    let (h, w) = (image.height as isize, image.width as isize);
    let (r0, c0) = (row as isize, col as isize);

    let interior = r0 - half * d >= 0
        && r0 + half * d < h
        && c0 - half * d >= 0
        && c0 + half * d < w;

    let mut k = 0;
    for dr in -half..=half {
        let r = r0 + dr * d;
        for dc in -half..=half {
            let cc = c0 + dc * d;
            let dst = &mut out[k..k + c];
            if interior || (r >= 0 && r < h && cc >= 0 && cc < w) {
                let src = ((r as usize) * image.width + cc as usize) * c;
                dst.copy_from_slice(&image.data[src..src + c]);
            } else {
                dst.fill(0.0);
            }
            k += c;
        }
    }
}

pub fn extract_patch(
    image: &ImageTensor,
    row: usize,
    col: usize,
    size: usize,
    dilation: usize,
) -> Result<Patch> {
    check_window(size, dilation)?;
    if row >= image.height || col >= image.width {
        return Err(FlimError::domain(format!(
            "patch center ({row},{col}) outside {}x{} image",
            image.height, image.width
        )));
    }
    let mut data = vec![0f32; size * size * image.channels];
    gather_patch(image, row, col, size, dilation, &mut data);
    Ok(Patch {
        size,
        channels: image.channels,
        dilation,
        data,
    })
}

/// Correlates `image` with every kernel of `bank`: output channel `b` at
/// `(i, j)` is the dot product of the zero-padded patch at `(i, j)` with
/// kernel `b`.
pub fn convolve(image: &ImageTensor, bank: &[Kernel], dilation: usize) -> Result<ImageTensor> {
    let first = bank
        .first()
        .ok_or_else(|| FlimError::domain("kernel bank is empty"))?;
    let (size, kc) = (first.size, first.channels);
    if bank.iter().any(|k| k.size != size || k.channels != kc) {
        return Err(FlimError::domain("kernels in a bank must share one shape"));
    }
    if kc != image.channels {
        return Err(FlimError::domain(format!(
            "kernel has {kc} channels but image has {}",
            image.channels
        )));
    }
    check_window(size, dilation)?;

    let m = bank.len();
    let (h, w) = (image.height, image.width);
    let plen = size * size * kc;
    let mut out = vec![0f32; h * w * m];

    out.par_chunks_mut(w * m)
        .enumerate()
        .for_each_init(
            || vec![0f32; plen],
            |patch, (row, out_row)| {
                for col in 0..w {
                    gather_patch(image, row, col, size, dilation, patch);
                    let dst = &mut out_row[col * m..(col + 1) * m];
                    for (o, k) in dst.iter_mut().zip(bank) {
                        *o = dot_f64(patch, &k.weights) as f32;
                    }
                }
            },
        );

    Ok(ImageTensor::from_parts(h, w, m, out))
}

pub fn relu(image: &ImageTensor) -> ImageTensor {
    let data = image.data.iter().map(|&v| v.max(0.0)).collect();
    ImageTensor::from_parts(image.height, image.width, image.channels, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Average,
}

/// Stride-free pooling over an `s x s` window around each pixel.
///
/// Out-of-bounds samples are ignored; average pooling divides by the number
/// of in-bounds samples. For even `s` the window extends one pixel further
/// towards larger indices.
pub fn pool(image: &ImageTensor, kind: PoolKind, window: usize) -> Result<ImageTensor> {
    if window == 0 {
        return Err(FlimError::domain("pooling window must be >= 1"));
    }
    if window == 1 {
        return Ok(image.clone());
    }
    let before = (window - 1) / 2;
    let after = window / 2;
    let (h, w, c) = (image.height, image.width, image.channels);

    // Separable: reduce along columns, then along rows.
    let mut horiz = vec![0f64; h * w * c];
    horiz
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(r, dst)| {
            for col in 0..w {
                let lo = col.saturating_sub(before);
                let hi = (col + after).min(w - 1);
                for b in 0..c {
                    let mut acc = match kind {
                        PoolKind::Max => f64::NEG_INFINITY,
                        PoolKind::Average => 0.0,
                    };
                    for cc in lo..=hi {
                        let v = image.data[(r * w + cc) * c + b] as f64;
                        match kind {
                            PoolKind::Max => acc = acc.max(v),
                            PoolKind::Average => acc += v,
                        }
                    }
                    dst[col * c + b] = acc;
                }
            }
        });

    let mut out = vec![0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(r, dst)| {
        let lo = r.saturating_sub(before);
        let hi = (r + after).min(h - 1);
        for col in 0..w {
            let ncols = (col + after).min(w - 1) - col.saturating_sub(before) + 1;
            for b in 0..c {
                let mut acc = match kind {
                    PoolKind::Max => f64::NEG_INFINITY,
                    PoolKind::Average => 0.0,
                };
                for rr in lo..=hi {
                    let v = horiz[(rr * w + col) * c + b];
                    match kind {
                        PoolKind::Max => acc = acc.max(v),
                        PoolKind::Average => acc += v,
                    }
                }
                if kind == PoolKind::Average {
                    acc /= ((hi - lo + 1) * ncols) as f64;
                }
                dst[col * c + b] = acc as f32;
            }
        }
    });

    Ok(ImageTensor::from_parts(h, w, c, out))
}

/// Maps every channel independently onto `[0, 1]`; constant channels become 0.
pub fn minmax_normalize_channels(image: &ImageTensor) -> ImageTensor {
    let c = image.channels;
    let mut lo = vec![f32::INFINITY; c];
    let mut hi = vec![f32::NEG_INFINITY; c];
    for px in image.data.chunks_exact(c) {
        for b in 0..c {
            lo[b] = lo[b].min(px[b]);
            hi[b] = hi[b].max(px[b]);
        }
    }
    let mut data = image.data.clone();
    for px in data.chunks_exact_mut(c) {
        for b in 0..c {
            let range = hi[b] as f64 - lo[b] as f64;
            px[b] = if range > 0.0 {
                ((px[b] as f64 - lo[b] as f64) / range).clamp(0.0, 1.0) as f32
            } else {
                0.0
            };
        }
    }
    ImageTensor::from_parts(image.height, image.width, c, data)
}
