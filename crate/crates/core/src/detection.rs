//! Saliency map to scored bounding boxes: Otsu binarization, 8-connected
//! components, area filtering and box expansion.

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_image, SaliencyMap};
use crate::error::Result;
use crate::markers::BoundingBox;
use crate::model::{FlimModel, PostProc};
use crate::tensor::ImageTensor;

pub const OTSU_BINS: usize = 256;

/// Scored boxes for one image, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub boxes: Vec<BoundingBox>,
}

/// Quantization used by the thresholding: `round(255 v)`.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Pixels whose quantized value is strictly above `bin` are foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threshold {
    pub bin: u8,
}

impl Threshold {
    pub fn value(&self) -> f32 {
        self.bin as f32 / 255.0
    }

    #[inline]
    pub fn is_foreground(&self, v: f32) -> bool {
        quantize(v) > self.bin
    }
}

pub fn histogram(values: &[f32]) -> [u64; OTSU_BINS] {
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[quantize(v) as usize] += 1;
    }
    hist
}

/// Between-class score `(n1 S0 - n0 S1)^2 / (n0 n1)` as an exact fraction
/// when it fits in 128 bits.
#[derive(Debug, Clone, Copy)]
enum Score {
    Exact { num: u128, den: u128 },
    Approx(f64),
}

impl Score {
    fn new(n0: u64, s0: u64, n1: u64, s1: u64) -> Score {
        let a = n1 as u128 * s0 as u128;
        let b = n0 as u128 * s1 as u128;
        let diff = a.abs_diff(b);
        let den = n0 as u128 * n1 as u128;
        match diff.checked_mul(diff) {
            Some(num) => Score::Exact { num, den },
            None => Score::Approx((diff as f64) * (diff as f64) / den as f64),
        }
    }

    fn as_f64(&self) -> f64 {
        match *self {
            Score::Exact { num, den } => num as f64 / den as f64,
            Score::Approx(v) => v,
        }
    }

    fn greater_than(&self, other: &Score) -> bool {
        if let (Score::Exact { num: a, den: b }, Score::Exact { num: c, den: d }) = (self, other) {
            if let (Some(l), Some(r)) = (a.checked_mul(*d), c.checked_mul(*b)) {
                return l > r;
            }
        }
        self.as_f64() > other.as_f64()
    }
}

/// Otsu threshold over 256 bins, scanning every boundary and keeping the
/// lowest one on ties. A map with a single occupied bin gets that bin as
/// threshold, leaving the foreground empty.
pub fn otsu_threshold_values(values: &[f32]) -> Threshold {
    let hist = histogram(values);
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();

    let mut best: Option<(u8, Score)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for (t, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += h;
        s0 += t as u64 * h;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let score = Score::new(n0, s0, n1, total_s - s0);
        if best.as_ref().is_none_or(|(_, b)| score.greater_than(b)) {
            best = Some((t as u8, score));
        }
    }
    match best {
        Some((bin, _)) => Threshold { bin },
        None => Threshold {
            bin: hist.iter().position(|&h| h > 0).unwrap_or(0) as u8,
        },
    }
}

pub fn otsu_threshold(map: &SaliencyMap) -> Threshold {
    otsu_threshold_values(&map.values)
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }
}

pub fn binarize(map: &SaliencyMap, t: Threshold) -> BinaryMask {
    BinaryMask {
        height: map.height,
        width: map.width,
        data: map.values.iter().map(|&v| t.is_foreground(v)).collect(),
    }
}

/// Foreground pixels `(row, col)` of one 8-connected component, in raster
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<(u32, u32)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Smallest half-open box containing every pixel.
    pub fn tight_box(&self) -> BoundingBox {
        let mut b = BoundingBox::new(u32::MAX, u32::MAX, 0, 0);
        for &(r, c) in &self.pixels {
            b.x1 = b.x1.min(c);
            b.y1 = b.y1.min(r);
            b.x2 = b.x2.max(c + 1);
            b.y2 = b.y2.max(r + 1);
        }
        b
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Two-pass union-find labelling with 8-connectivity. Components are ordered
/// by their first pixel in raster order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    const NONE: u32 = u32::MAX;
    let mut labels = vec![NONE; h * w];
    let mut parent: Vec<u32> = Vec::new();

    for r in 0..h {
        for c in 0..w {
            if !mask.data[r * w + c] {
                continue;
            }
            let mut neighbours = [NONE; 4];
            if c > 0 {
                neighbours[0] = labels[r * w + c - 1];
            }
            if r > 0 {
                if c > 0 {
                    neighbours[1] = labels[(r - 1) * w + c - 1];
                }
                neighbours[2] = labels[(r - 1) * w + c];
                if c + 1 < w {
                    neighbours[3] = labels[(r - 1) * w + c + 1];
                }
            }
            let mut label = NONE;
            for &n in neighbours.iter().filter(|&&n| n != NONE) {
                let root = find(&mut parent, n);
                if label == NONE {
                    label = root;
                } else if root != label {
                    let (lo, hi) = (label.min(root), label.max(root));
                    parent[hi as usize] = lo;
                    label = lo;
                }
            }
            if label == NONE {
                label = parent.len() as u32;
                parent.push(label);
            }
            labels[r * w + c] = label;
        }
    }

    let mut index_of_root = vec![NONE; parent.len()];
    let mut comps: Vec<Component> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            if l == NONE {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            if index_of_root[root] == NONE {
                index_of_root[root] = comps.len() as u32;
                comps.push(Component { pixels: Vec::new() });
            }
            comps[index_of_root[root] as usize]
                .pixels
                .push((r as u32, c as u32));
        }
    }
    comps
}

// Growth per side; snaps values within 1e-9 of an integer so that products
// like 20 * 0.1 do not round up through ceil/floor.
fn half_growth(extent: u32, fraction: f64) -> f64 {
    let g = extent as f64 * fraction / 2.0;
    let snapped = g.round();
    if (g - snapped).abs() < 1e-9 {
        snapped
    } else {
        g
    }
}

/// Expands `b` by `fraction` of its width and height, centered, rounding
/// outward to whole pixels and clamping to the image.
pub fn expand_box(b: &BoundingBox, fraction: f64, height: usize, width: usize) -> BoundingBox {
    if fraction <= 0.0 {
        return *b;
    }
    let gx = half_growth(b.width(), fraction);
    let gy = half_growth(b.height(), fraction);
    let x1 = (b.x1 as f64 - gx).floor().max(0.0) as u32;
    let y1 = (b.y1 as f64 - gy).floor().max(0.0) as u32;
    let x2 = ((b.x2 as f64 + gx).ceil() as u64).min(width as u64) as u32;
    let y2 = ((b.y2 as f64 + gy).ceil() as u64).min(height as u64) as u32;
    BoundingBox {
        x1,
        y1,
        x2,
        y2,
        score: b.score,
    }
}

fn mean_inside(map: &SaliencyMap, b: &BoundingBox) -> f64 {
    let mut acc = 0f64;
    for r in b.y1 as usize..b.y2 as usize {
        let row = &map.values[r * map.width..(r + 1) * map.width];
        acc += row[b.x1 as usize..b.x2 as usize]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>();
    }
    (acc / b.area() as f64).clamp(0.0, 1.0)
}

/// Descending score; equal scores ordered by `(y1, x1)`.
pub fn sort_boxes(boxes: &mut [BoundingBox]) {
    boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y1.cmp(&b.y1))
            .then(a.x1.cmp(&b.x1))
    });
}

/// Tight box per component with at least `min_area_px` pixels, expanded and
/// scored by the mean saliency inside the final box.
pub fn boxes_from_components(
    components: &[Component],
    map: &SaliencyMap,
    expand_fraction: f64,
    min_area_px: usize,
) -> Vec<BoundingBox> {
    let mut boxes: Vec<BoundingBox> = components
        .iter()
        .filter(|c| !c.pixels.is_empty() && c.area() >= min_area_px)
        .map(|c| {
            let b = expand_box(&c.tight_box(), expand_fraction, map.height, map.width);
            let score = mean_inside(map, &b);
            b.with_score(score)
        })
        .collect();
    sort_boxes(&mut boxes);
    boxes
}

/// Otsu, components, boxes.
pub fn detect_from_saliency(map: &SaliencyMap, post: &PostProc, image_id: &str) -> DetectionSet {
    let t = otsu_threshold(map);
    let comps = connected_components(&binarize(map, t));
    DetectionSet {
        image_id: image_id.to_string(),
        boxes: boxes_from_components(&comps, map, post.box_expand_fraction, post.min_area_px),
    }
}

/// Full pipeline: encoder, adaptive decoder at the last layer, detection head.
pub fn detect(image: &ImageTensor, model: &FlimModel, image_id: &str) -> Result<DetectionSet> {
    detect_at_layer(image, model, model.num_layers(), image_id)
}

pub fn detect_at_layer(
    image: &ImageTensor,
    model: &FlimModel,
    layer: usize,
    image_id: &str,
) -> Result<DetectionSet> {
    let map = decode_image(image, model, layer)?;
    Ok(detect_from_saliency(&map, &model.postproc(), image_id))
}
