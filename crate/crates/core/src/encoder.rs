//! Layer-by-layer encoder construction from image markers.
//!
//! A layer is built from the features its input carries at the marker pixels
//! of the training images:
//!
//! 1. z-score statistics are computed over the union of marker pixels,
//! 2. every marker pixel contributes one patch of the layer's kernel shape,
//! 3. each marker's patches are clustered into at most `k_m` centers,
//! 4. the union of those centers is clustered again into at most `k_l`
//!    centers, which are scaled to unit norm and become the kernel bank.
//!
//! Executing a layer is normalization, convolution with the selected
//! kernels, ReLU and stride-free pooling. There are no bias terms.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::markers::{MarkerRef, MarkerSet};
use crate::model::{FlimModel, Layer, LayerSpec};
use crate::tensor::{convolve, extract_patch, pool, relu, ImageTensor, Kernel, Patch};

pub const DEFAULT_EPSILON: f32 = 1e-4;

/// Per-channel marker statistics used to normalize a layer's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub epsilon: f32,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// A training image (already transformed to the current layer's input) with
/// its scribbles.
#[derive(Debug, Clone, Copy)]
pub struct MarkedImage<'a> {
    pub image: &'a ImageTensor,
    pub markers: &'a MarkerSet,
}

fn check_marker_bounds(item: &MarkedImage<'_>) -> Result<()> {
    let (h, w) = (item.image.height() as u32, item.image.width() as u32);
    for m in &item.markers.markers {
        if let Some(&(r, c)) = m.pixels.iter().find(|&&(r, c)| r >= h || c >= w) {
            return Err(FlimError::domain(format!(
                "marker {} of image '{}' has pixel ({r},{c}) outside {h}x{w}",
                m.marker_id, item.markers.image_id
            )));
        }
    }
    Ok(())
}

/// Mean and population standard deviation of every channel over all marker
/// pixels of all images.
pub fn compute_norm_stats(items: &[MarkedImage<'_>], epsilon: f32) -> Result<NormStats> {
    let channels = items
        .first()
        .map(|i| i.image.channels())
        .ok_or(FlimError::EmptyMarkers)?;
    let mut sum = vec![0f64; channels];
    let mut count = 0usize;
    for item in items {
        if item.image.channels() != channels {
            return Err(FlimError::domain("training images differ in channel count"));
        }
        check_marker_bounds(item)?;
        for m in &item.markers.markers {
            for &(r, c) in &m.pixels {
                for (s, &v) in sum.iter_mut().zip(item.image.pixel(r as usize, c as usize)) {
                    *s += v as f64;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(FlimError::EmptyMarkers);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0f64; channels];
    for item in items {
        for m in &item.markers.markers {
            for &(r, c) in &m.pixels {
                for ((acc, &v), mu) in var
                    .iter_mut()
                    .zip(item.image.pixel(r as usize, c as usize))
                    .zip(&mean)
                {
                    let d = v as f64 - mu;
                    *acc += d * d;
                }
            }
        }
    }
    Ok(NormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: var
            .iter()
            .map(|v| (v / count as f64).sqrt() as f32)
            .collect(),
        epsilon,
    })
}

/// `(x - mean_b) / (std_b + epsilon)` for every pixel and channel.
pub fn apply_norm(image: &ImageTensor, stats: &NormStats) -> Result<ImageTensor> {
    let c = image.channels();
    if stats.channels() != c {
        return Err(FlimError::domain(format!(
            "normalization has {} channels but image has {c}",
            stats.channels()
        )));
    }
    let scale: Vec<f64> = stats
        .std
        .iter()
        .map(|&s| 1.0 / (s as f64 + stats.epsilon as f64))
        .collect();
    let mut data = image.data().to_vec();
    for px in data.chunks_exact_mut(c) {
        for b in 0..c {
            px[b] = ((px[b] as f64 - stats.mean[b] as f64) * scale[b]) as f32;
        }
    }
    ImageTensor::new(image.height(), image.width(), c, data)
}

/// Patches harvested at marker pixels, grouped by the marker they came from.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub layer_index: usize,
    pub patches: Vec<(Patch, MarkerRef)>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Markers in first-appearance order.
    pub fn markers(&self) -> Vec<MarkerRef> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (_, m) in &self.patches {
            if seen.insert(m.clone()) {
                out.push(m.clone());
            }
        }
        out
    }
}

/// One patch per marker pixel, extracted from the (normalized) layer input
/// with the layer's kernel size and dilation.
pub fn build_patch_dataset(
    items: &[MarkedImage<'_>],
    spec: &LayerSpec,
    layer_index: usize,
) -> Result<PatchDataset> {
    spec.validate()?;
    let mut patches = Vec::new();
    for item in items {
        check_marker_bounds(item)?;
        for m in &item.markers.markers {
            let mref = MarkerRef {
                image_id: item.markers.image_id.clone(),
                marker_id: m.marker_id,
            };
            for &(r, c) in &m.pixels {
                let p = extract_patch(
                    item.image,
                    r as usize,
                    c as usize,
                    spec.kernel_size,
                    spec.dilation,
                )?;
                patches.push((p, mref.clone()));
            }
        }
    }
    Ok(PatchDataset {
        layer_index,
        patches,
    })
}

/// Which markers fed the stage-1 centers that a kernel was clustered from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelProvenance {
    pub markers: Vec<MarkerRef>,
}

/// Unit-norm kernels of one layer with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub kernels: Vec<Kernel>,
    pub provenance: Vec<KernelProvenance>,
}

impl KernelBank {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// `(size, channels)` shared by every kernel.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.kernels.first().map(|k| (k.size(), k.channels()))
    }
}

fn stage_seed(seed: u64, stage: u64, index: u64) -> u64 {
    // splitmix-style mixing keeps per-marker streams independent
    let mut z = seed ^ (stage << 56) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output of [`estimate_kernels_traced`]: the bank plus the stage-1 centers
/// and per-stage objective traces.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    pub bank: KernelBank,
    /// Stage-1 centers (flattened, `dim` values each) with their marker.
    pub stage1_centers: Vec<(Vec<f64>, MarkerRef)>,
    pub stage1_objectives: Vec<Vec<f64>>,
    pub stage2_objective: Vec<f64>,
}

/// Two-stage k-means kernel estimation.
///
/// Stage 1 clusters each marker's patches into `min(k_m, patches)` centers;
/// stage 2 clusters the union of those centers into `min(k_l, centers)`.
/// Final centers are scaled to unit norm. Degenerate clusters collapse, so
/// the bank may hold fewer than `k_l` kernels; all-zero centers are dropped.
pub fn estimate_kernels(dataset: &PatchDataset, spec: &LayerSpec, seed: u64) -> Result<KernelBank> {
    estimate_kernels_traced(dataset, spec, seed).map(|e| e.bank)
}

pub fn estimate_kernels_traced(
    dataset: &PatchDataset,
    spec: &LayerSpec,
    seed: u64,
) -> Result<KernelEstimate> {
    spec.validate()?;
    let (first, _) = dataset.patches.first().ok_or(FlimError::EmptyDataset)?;
    let (size, channels) = (first.size, first.channels);
    let dim = size * size * channels;
    if dataset
        .patches
        .iter()
        .any(|(p, _)| p.size != size || p.channels != channels)
    {
        return Err(FlimError::domain("patches in a dataset must share one shape"));
    }

    let markers = dataset.markers();
    let per_marker: Vec<(MarkerRef, Vec<f64>)> = markers
        .into_iter()
        .map(|m| {
            let pts: Vec<f64> = dataset
                .patches
                .iter()
                .filter(|(_, r)| *r == m)
                .flat_map(|(p, _)| p.data.iter().map(|&v| v as f64))
                .collect();
            (m, pts)
        })
        .collect();

    let stage1: Vec<(Vec<f64>, Vec<f64>, MarkerRef)> = per_marker
        .par_iter()
        .enumerate()
        .map(|(i, (mref, pts))| {
            let cfg = KMeansConfig::new(spec.kernels_per_marker, stage_seed(seed, 1, i as u64));
            let r = kmeans(pts, dim, &cfg);
            (r.centers, r.objective_history, mref.clone())
        })
        .collect();

    let mut stage1_centers = Vec::new();
    let mut stage1_objectives = Vec::new();
    let mut union = Vec::new();
    let mut union_refs = Vec::new();
    for (centers, hist, mref) in stage1 {
        for c in centers.chunks_exact(dim) {
            union.extend_from_slice(c);
            union_refs.push(mref.clone());
            stage1_centers.push((c.to_vec(), mref.clone()));
        }
        stage1_objectives.push(hist);
    }

    let cfg = KMeansConfig::new(spec.kernels_total, stage_seed(seed, 2, 0));
    let reduced = kmeans(&union, dim, &cfg);

    let mut kernels = Vec::new();
    let mut provenance = Vec::new();
    for ci in 0..reduced.k() {
        let Some(kernel) = Kernel::unit(size, channels, reduced.center(ci)) else {
            continue;
        };
        let kernel = kernel?;
        // unit scaling can map distinct raw centers onto the same direction
        if kernels.iter().any(|k: &Kernel| k.weights() == kernel.weights()) {
            continue;
        }
        let members: BTreeSet<MarkerRef> = reduced
            .assignments
            .iter()
            .zip(&union_refs)
            .filter(|(&a, _)| a == ci)
            .map(|(_, m)| m.clone())
            .collect();
        kernels.push(kernel);
        provenance.push(KernelProvenance {
            markers: members.into_iter().collect(),
        });
    }
    if kernels.is_empty() {
        return Err(FlimError::domain(
            "all cluster centers are zero; markers carry no signal",
        ));
    }

    Ok(KernelEstimate {
        bank: KernelBank {
            kernels,
            provenance,
        },
        stage1_centers,
        stage1_objectives,
        stage2_objective: reduced.objective_history,
    })
}

/// Normalization, convolution with the selected kernels, ReLU, pooling.
pub fn run_layer(input: &ImageTensor, layer: &Layer) -> Result<ImageTensor> {
    if layer.selected.is_empty() {
        return Err(FlimError::EmptySelection);
    }
    let normalized = apply_norm(input, &layer.norm_stats)?;
    let bank: Vec<Kernel> = layer
        .selected
        .iter()
        .map(|&i| {
            layer.bank.kernels.get(i).cloned().ok_or_else(|| {
                FlimError::domain(format!(
                    "selected kernel {i} out of range for bank of {}",
                    layer.bank.len()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let filtered = convolve(&normalized, &bank, layer.spec.dilation)?;
    let activated = relu(&filtered);
    pool(&activated, layer.spec.pooling.kind, layer.spec.pooling.window)
}

/// Runs layers `1..=up_to_layer` (1-based) of `layers`.
pub fn run_layers(image: &ImageTensor, layers: &[Layer], up_to_layer: usize) -> Result<ImageTensor> {
    if up_to_layer == 0 || up_to_layer > layers.len() {
        return Err(FlimError::LayerOutOfRange {
            index: up_to_layer,
            layers: layers.len(),
        });
    }
    let mut x = run_layer(image, &layers[0])?;
    for layer in &layers[1..up_to_layer] {
        x = run_layer(&x, layer)?;
    }
    Ok(x)
}

pub fn run_encoder(image: &ImageTensor, model: &FlimModel, up_to_layer: usize) -> Result<ImageTensor> {
    run_layers(image, model.layers(), up_to_layer)
}
