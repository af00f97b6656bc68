//! Layer specifications, the assembled model, and its on-disk format.
//!
//! A model directory holds `meta.json` (architecture, normalization
//! statistics, selections, provenance) and `weights.bin`:
//!
//! ```text
//! "FLIM" | version u32 | kernel count u32 | reserved u32   (16-byte header)
//! f32 weights, layer by layer, [kernel][row][col][channel]
//! CRC32 of everything above                                 (4 bytes)
//! ```
//!
//! All integers and reals are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{KernelBank, KernelProvenance, NormStats};
use crate::error::{FlimError, Result};
use crate::tensor::{Kernel, PoolKind};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"FLIM";
pub const META_FILE: &str = "meta.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pooling {
    pub kind: PoolKind,
    pub window: usize,
}

/// Architecture hyperparameters of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub kernels_per_marker: usize,
    pub kernels_total: usize,
    pub pooling: Pooling,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FlimError::InvalidSpec(m));
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.dilation == 0 {
            return fail("dilation must be >= 1".into());
        }
        if self.kernels_per_marker == 0 {
            return fail("kernels_per_marker must be >= 1".into());
        }
        if self.kernels_total == 0 {
            return fail("kernels_total must be >= 1".into());
        }
        if self.pooling.window == 0 {
            return fail("pooling window must be >= 1".into());
        }
        Ok(())
    }
}

/// Channel-sign heuristic used by the adaptive decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    /// Fixed threshold on the mean activation (small, compact objects).
    Parasite,
    /// Band around the mean of channel means, with a neutral zone.
    Ship,
}

/// Box post-processing applied to saliency components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostProc {
    pub box_expand_fraction: f64,
    pub min_area_px: usize,
}

impl PostProc {
    pub const PARASITE: PostProc = PostProc {
        box_expand_fraction: 0.10,
        min_area_px: 100,
    };
    pub const SHIP: PostProc = PostProc {
        box_expand_fraction: 0.0,
        min_area_px: 100,
    };

    pub fn for_heuristic(h: Heuristic) -> PostProc {
        match h {
            Heuristic::Parasite => Self::PARASITE,
            Heuristic::Ship => Self::SHIP,
        }
    }
}

impl Default for PostProc {
    fn default() -> Self {
        Self::PARASITE
    }
}

/// One built encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub norm_stats: NormStats,
    pub bank: KernelBank,
    /// Indices into `bank` of the kernels the layer actually applies.
    pub selected: Vec<usize>,
}

impl Layer {
    pub fn input_channels(&self) -> usize {
        self.norm_stats.channels()
    }

    pub fn output_channels(&self) -> usize {
        self.selected.len()
    }

    fn validate(&self, index: usize) -> Result<()> {
        let at = |m: String| FlimError::domain(format!("layer {}: {m}", index + 1));
        self.spec.validate()?;
        if self.selected.is_empty() {
            return Err(FlimError::EmptySelection);
        }
        let mut seen = vec![false; self.bank.len()];
        for &i in &self.selected {
            match seen.get_mut(i) {
                None => return Err(at(format!("selected kernel {i} out of range"))),
                Some(true) => return Err(at(format!("kernel {i} selected twice"))),
                Some(s) => *s = true,
            }
        }
        if self.bank.provenance.len() != self.bank.len() {
            return Err(at("provenance count differs from kernel count".into()));
        }
        let Some((size, channels)) = self.bank.shape() else {
            return Err(at("empty kernel bank".into()));
        };
        if size != self.spec.kernel_size
            || self
                .bank
                .kernels
                .iter()
                .any(|k| k.size() != size || k.channels() != channels)
        {
            return Err(at("kernel shapes disagree with the layer spec".into()));
        }
        if channels != self.norm_stats.channels() || self.norm_stats.std.len() != channels {
            return Err(at(format!(
                "normalization covers {} channels, kernels expect {channels}",
                self.norm_stats.channels()
            )));
        }
        Ok(())
    }
}

/// An encoder plus decoder configuration. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct FlimModel {
    layers: Vec<Layer>,
    heuristic: Heuristic,
    postproc: PostProc,
}

impl FlimModel {
    pub fn new(layers: Vec<Layer>, heuristic: Heuristic, postproc: PostProc) -> Result<Self> {
        if layers.is_empty() {
            return Err(FlimError::domain("a model needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.validate(i)?;
            if i > 0 && layer.input_channels() != layers[i - 1].output_channels() {
                return Err(FlimError::domain(format!(
                    "layer {} expects {} input channels but layer {i} emits {}",
                    i + 1,
                    layer.input_channels(),
                    layers[i - 1].output_channels()
                )));
            }
        }
        Ok(FlimModel {
            layers,
            heuristic,
            postproc,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heuristic(&self) -> Heuristic {
        self.heuristic
    }

    pub fn postproc(&self) -> PostProc {
        self.postproc
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].input_channels()
    }

    /// Total kernel count across all layers' banks.
    pub fn kernel_count(&self) -> usize {
        self.layers.iter().map(|l| l.bank.len()).sum()
    }

    /// Number of weights, counting only selected kernels when `selected_only`.
    /// The architecture has no biases.
    pub fn count_parameters(&self, selected_only: bool) -> usize {
        count_parameters(self, selected_only)
    }
}

pub fn count_parameters(model: &FlimModel, selected_only: bool) -> usize {
    model
        .layers
        .iter()
        .map(|l| {
            let per_kernel = l.spec.kernel_size * l.spec.kernel_size * l.input_channels();
            let m = if selected_only {
                l.selected.len()
            } else {
                l.bank.len()
            };
            m * per_kernel
        })
        .sum()
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    format: String,
    version: u32,
    heuristic: Heuristic,
    postproc: PostProc,
    layers: Vec<MetaLayer>,
    weights: MetaWeights,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLayer {
    spec: LayerSpec,
    input_channels: usize,
    kernel_count: usize,
    norm_stats: NormStats,
    selected: Vec<usize>,
    provenance: Vec<KernelProvenance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaWeights {
    file: String,
    kernel_count: usize,
    crc32: u32,
}

/// Encodes every kernel of every layer (selected or not) into the weights
/// sidecar byte stream.
pub fn encode_weights(model: &FlimModel) -> Vec<u8> {
    let payload: usize = model
        .layers
        .iter()
        .flat_map(|l| l.bank.kernels.iter())
        .map(|k| k.len() * 4)
        .sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + payload + 4);
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.kernel_count() as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for k in model.layers.iter().flat_map(|l| l.bank.kernels.iter()) {
        for w in k.weights() {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Validates the header and checksum, returning the f32 payload.
fn decode_weights(bytes: &[u8], expected_kernels: usize, expected_values: usize) -> Result<Vec<f32>> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(FlimError::Checksum(format!(
            "weights file is {} bytes, shorter than header and checksum",
            bytes.len()
        )));
    }
    if &bytes[..4] != WEIGHTS_MAGIC {
        return Err(FlimError::ModelFormat("bad weights magic".into()));
    }
    let version = read_u32(bytes, 4);
    if version != MODEL_FORMAT_VERSION {
        return Err(FlimError::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let body_end = bytes.len() - 4;
    let stored = read_u32(bytes, body_end);
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(FlimError::Checksum(format!(
            "CRC32 mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let kernels = read_u32(bytes, 8) as usize;
    if kernels != expected_kernels {
        return Err(FlimError::ModelFormat(format!(
            "weights hold {kernels} kernels, metadata describes {expected_kernels}"
        )));
    }
    let payload = &bytes[HEADER_LEN..body_end];
    if payload.len() != expected_values * 4 {
        return Err(FlimError::Checksum(format!(
            "weights payload is {} bytes, expected {}",
            payload.len(),
            expected_values * 4
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_model(model: &FlimModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FlimError::io(dir, e))?;
    let weights = encode_weights(model);
    let crc = read_u32(&weights, weights.len() - 4);
    let meta = MetaFile {
        format: "flim-model".into(),
        version: MODEL_FORMAT_VERSION,
        heuristic: model.heuristic,
        postproc: model.postproc,
        layers: model
            .layers
            .iter()
            .map(|l| MetaLayer {
                spec: l.spec,
                input_channels: l.input_channels(),
                kernel_count: l.bank.len(),
                norm_stats: l.norm_stats.clone(),
                selected: l.selected.clone(),
                provenance: l.bank.provenance.clone(),
            })
            .collect(),
        weights: MetaWeights {
            file: WEIGHTS_FILE.into(),
            kernel_count: model.kernel_count(),
            crc32: crc,
        },
    };
    let wpath = dir.join(WEIGHTS_FILE);
    std::fs::write(&wpath, &weights).map_err(|e| FlimError::io(&wpath, e))?;
    let mpath = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("model metadata serializes");
    std::fs::write(&mpath, json + "\n").map_err(|e| FlimError::io(&mpath, e))
}

pub fn load_model(dir: &Path) -> Result<FlimModel> {
    let mpath = dir.join(META_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| FlimError::io(&mpath, e))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|source| FlimError::Json {
        path: mpath.clone(),
        source,
    })?;
    if meta.version != MODEL_FORMAT_VERSION {
        return Err(FlimError::VersionMismatch {
            found: meta.version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let wpath = dir.join(&meta.weights.file);
    let bytes = std::fs::read(&wpath).map_err(|e| FlimError::io(&wpath, e))?;
    let values: usize = meta
        .layers
        .iter()
        .map(|l| l.kernel_count * l.spec.kernel_size * l.spec.kernel_size * l.input_channels)
        .sum();
    let kernel_total: usize = meta.layers.iter().map(|l| l.kernel_count).sum();
    if kernel_total != meta.weights.kernel_count {
        return Err(FlimError::ModelFormat(
            "layer kernel counts do not add up to the weights kernel count".into(),
        ));
    }
    let weights = decode_weights(&bytes, kernel_total, values)?;
    if read_u32(&bytes, bytes.len() - 4) != meta.weights.crc32 {
        return Err(FlimError::Checksum(
            "weights file does not belong to this metadata".into(),
        ));
    }

    let mut offset = 0;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for ml in meta.layers {
        let (k, c) = (ml.spec.kernel_size, ml.input_channels);
        let len = k * k * c;
        let mut kernels = Vec::with_capacity(ml.kernel_count);
        for _ in 0..ml.kernel_count {
            kernels.push(Kernel::new(k, c, weights[offset..offset + len].to_vec())?);
            offset += len;
        }
        layers.push(Layer {
            spec: ml.spec,
            norm_stats: ml.norm_stats,
            bank: KernelBank {
                kernels,
                provenance: ml.provenance,
            },
            selected: ml.selected,
        });
    }
    FlimModel::new(layers, meta.heuristic, meta.postproc)
}
