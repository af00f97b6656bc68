//! Generated detection fixture: dark ellipses on a bright textured
//! background, with automatic scribbles and tight ground-truth boxes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FlimError, Result};
use crate::imageio::save_png;
use crate::markers::{BoundingBox, GroundTruth, Marker, MarkerSet};
use crate::model::Heuristic;
use crate::project::{save_project, write_json, Project, ProjectConfig, ProjectImage};
use crate::tensor::ImageTensor;

/// Marker ids at or above this value are background scribbles.
pub const BACKGROUND_MARKER_BASE: u32 = 100;

pub fn is_foreground_marker(marker_id: u32) -> bool {
    marker_id < BACKGROUND_MARKER_BASE
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub size: usize,
    pub images: usize,
    pub train: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            size: 128,
            images: 20,
            train: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    /// Semi-axes along and across `angle`.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Normalized radius: below 1 inside.
    pub fn radius(&self, row: f64, col: f64) -> f64 {
        let (dy, dx) = (row - self.cy, col - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.radius(row as f64, col as f64) <= 1.0
    }

    // Axis-aligned extent of the continuous ellipse.
    fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let hx = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let hy = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (hy, hx)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub id: String,
    pub image: ImageTensor,
    pub ellipses: Vec<Ellipse>,
    pub gt: GroundTruth,
    pub markers: MarkerSet,
}

fn place_ellipses(rng: &mut ChaCha8Rng, size: usize) -> Vec<Ellipse> {
    let n = rng.gen_range(2..=4);
    let margin = 4.0;
    let gap = 8.0;
    let mut out: Vec<Ellipse> = Vec::new();
    while out.len() < n {
        let area = rng.gen_range(170.0..560.0);
        let ratio: f64 = rng.gen_range(1.0..2.0);
        let a = (area * ratio / PI).sqrt();
        let b = (area / (ratio * PI)).sqrt();
        let angle = rng.gen_range(0.0..PI);
        let probe = Ellipse { cy: 0.0, cx: 0.0, a, b, angle };
        let (hy, hx) = probe.half_extent();
        let lim = size as f64;
        let cy = rng.gen_range(margin + hy..lim - margin - hy);
        let cx = rng.gen_range(margin + hx..lim - margin - hx);
        let e = Ellipse { cy, cx, ..probe };
        let clear = out.iter().all(|o| {
            let (oy, ox) = o.half_extent();
            (e.cy - o.cy).abs() > hy + oy + gap || (e.cx - o.cx).abs() > hx + ox + gap
        });
        if clear {
            out.push(e);
        }
    }
    out
}

fn render(rng: &mut ChaCha8Rng, size: usize, ellipses: &[Ellipse]) -> ImageTensor {
    let fy = rng.gen_range(0.02..0.06);
    let fx = rng.gen_range(0.02..0.06);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut data = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let noise: f64 = rng.gen_range(-0.04..0.04);
            let v = if ellipses.iter().any(|e| e.contains(r, c)) {
                0.25 + noise
            } else {
                0.75 + 0.06 * (2.0 * PI * (fy * r as f64 + fx * c as f64) + phase).sin() + noise
            };
            data.push(v as f32);
        }
    }
    ImageTensor::new(size, size, 1, data).expect("sizes agree")
}

fn tight_box(e: &Ellipse, size: usize) -> Option<BoundingBox> {
    let mut b: Option<BoundingBox> = None;
    for r in 0..size {
        for c in 0..size {
            if e.contains(r, c) {
                let (r, c) = (r as u32, c as u32);
                let bb = b.get_or_insert(BoundingBox::new(c, r, c + 1, r + 1));
                bb.x1 = bb.x1.min(c);
                bb.y1 = bb.y1.min(r);
                bb.x2 = bb.x2.max(c + 1);
                bb.y2 = bb.y2.max(r + 1);
            }
        }
    }
    b
}

// Pixels along a segment, deduplicated, in drawing order.
fn segment(y0: f64, x0: f64, y1: f64, x1: f64) -> Vec<(i64, i64)> {
    let steps = ((y1 - y0).abs().max((x1 - x0).abs()).ceil() as usize).max(1);
    let mut out: Vec<(i64, i64)> = Vec::new();
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let p = ((y0 + t * (y1 - y0)).round() as i64, (x0 + t * (x1 - x0)).round() as i64);
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

fn scribbles(rng: &mut ChaCha8Rng, size: usize, ellipses: &[Ellipse]) -> MarkerSet {
    let mut markers = Vec::new();
    for (i, e) in ellipses.iter().enumerate() {
        // along the major axis, well inside the object
        let (s, c) = e.angle.sin_cos();
        let half = 0.6 * e.a;
        let pixels: Vec<(u32, u32)> = segment(
            e.cy - half * s,
            e.cx - half * c,
            e.cy + half * s,
            e.cx + half * c,
        )
        .into_iter()
        .filter(|&(r, c)| e.radius(r as f64, c as f64) < 0.8)
        .map(|(r, c)| (r as u32, c as u32))
        .collect();
        markers.push(Marker {
            marker_id: i as u32 + 1,
            pixels,
        });
    }
    let lim = size as f64 - 1.0;
    let mut id = BACKGROUND_MARKER_BASE;
    while markers.len() < ellipses.len() + 2 {
        let len = rng.gen_range(30.0..50.0);
        let ang: f64 = rng.gen_range(0.0..PI);
        let y0 = rng.gen_range(2.0..lim - 2.0);
        let x0 = rng.gen_range(2.0..lim - 2.0);
        let (y1, x1) = (
            (y0 + len * ang.sin()).clamp(2.0, lim - 2.0),
            (x0 + len * ang.cos()).clamp(2.0, lim - 2.0),
        );
        let pixels: Vec<(u32, u32)> = segment(y0, x0, y1, x1)
            .into_iter()
            .filter(|&(r, c)| ellipses.iter().all(|e| e.radius(r as f64, c as f64) > 1.6))
            .map(|(r, c)| (r as u32, c as u32))
            .collect();
        if pixels.len() >= 15 {
            markers.push(Marker { marker_id: id, pixels });
            id += 1;
        }
    }
    let mut set = MarkerSet {
        image_id: String::new(),
        markers,
    };
    set.markers.retain(|m| !m.pixels.is_empty());
    set.canonicalize();
    set
}

pub fn sample_id(index: usize) -> String {
    format!("syn_{index:03}")
}

pub fn generate_sample(index: usize, cfg: &SyntheticConfig) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let ellipses = place_ellipses(&mut rng, cfg.size);
    let image = render(&mut rng, cfg.size, &ellipses);
    let id = sample_id(index);
    let boxes = ellipses.iter().filter_map(|e| tight_box(e, cfg.size)).collect();
    let mut markers = scribbles(&mut rng, cfg.size, &ellipses);
    markers.image_id = id.clone();
    SyntheticSample {
        gt: GroundTruth {
            image_id: id.clone(),
            boxes,
        },
        id,
        image,
        ellipses,
        markers,
    }
}

/// Training samples first, then the held-out ones.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Vec<SyntheticSample> {
    (0..cfg.images).map(|i| generate_sample(i, cfg)).collect()
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub project: PathBuf,
    pub holdout_images: PathBuf,
    pub holdout_gt: PathBuf,
}

/// Writes `<out>/project` (training images with scribbles and ground truth)
/// and `<out>/holdout/{images,gt}`.
pub fn write_fixture(out: &Path, cfg: &SyntheticConfig, heuristic: Heuristic) -> Result<FixturePaths> {
    if cfg.train > cfg.images {
        return Err(FlimError::domain("more training images than images"));
    }
    let samples = generate_dataset(cfg);
    let paths = FixturePaths {
        project: out.join("project"),
        holdout_images: out.join("holdout").join("images"),
        holdout_gt: out.join("holdout").join("gt"),
    };
    let staging = paths.project.join("images");
    fs::create_dir_all(&staging).map_err(|e| FlimError::io(&staging, e))?;
    fs::create_dir_all(&paths.holdout_images).map_err(|e| FlimError::io(&paths.holdout_images, e))?;

    let mut project = Project {
        root: paths.project.clone(),
        config: ProjectConfig::new("synthetic", heuristic),
        images: Vec::new(),
        markers: Default::default(),
        ground_truth: Default::default(),
    };
    for (i, s) in samples.iter().enumerate() {
        if i < cfg.train {
            let path = staging.join(format!("{}.png", s.id));
            save_png(&s.image, &path)?;
            project.images.push(ProjectImage {
                id: s.id.clone(),
                height: cfg.size as u32,
                width: cfg.size as u32,
                path,
            });
            project.markers.insert(s.id.clone(), s.markers.clone());
            project.ground_truth.insert(s.id.clone(), s.gt.clone());
        } else {
            save_png(&s.image, &paths.holdout_images.join(format!("{}.png", s.id)))?;
            write_json(&paths.holdout_gt.join(format!("{}.json", s.id)), &s.gt)?;
        }
    }
    save_project(&project, &paths.project)?;
    Ok(paths)
}
