//! Architecture files for non-interactive training.
//!
//! ```json
//! {
//!   "heuristic": "parasite",
//!   "postproc": {"box_expand_fraction": 0.1, "min_area_px": 100},
//!   "layers": [
//!     {"kernel_size": 3, "dilation": 1, "kernels_per_marker": 5,
//!      "kernels_total": 32, "pooling": {"kind": "max", "window": 3},
//!      "selection": [0, 2, 5]}
//!   ]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::builder::BuildSession;
use crate::error::{FlimError, Result};
use crate::model::{FlimModel, Heuristic, LayerSpec, Pooling, PostProc};
use crate::tensor::PoolKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchLayer {
    #[serde(flatten)]
    pub spec: LayerSpec,
    /// Kernels to keep; all candidates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub heuristic: Heuristic,
    /// Defaults to the profile of the heuristic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub postproc: Option<PostProc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f32>,
    pub layers: Vec<ArchLayer>,
}

fn layer(kernel_size: usize, dilation: usize, k_m: usize, k_l: usize, kind: PoolKind) -> ArchLayer {
    ArchLayer {
        spec: LayerSpec {
            kernel_size,
            dilation,
            kernels_per_marker: k_m,
            kernels_total: k_l,
            pooling: Pooling { kind, window: 3 },
        },
        selection: None,
    }
}

impl Architecture {
    /// Two layers, five kernels per marker, fixed-threshold signs, 10% box
    /// growth.
    pub fn parasite() -> Self {
        Architecture {
            heuristic: Heuristic::Parasite,
            postproc: Some(PostProc::PARASITE),
            epsilon: None,
            layers: vec![
                layer(3, 1, 5, 32, PoolKind::Max),
                layer(3, 2, 5, 64, PoolKind::Average),
            ],
        }
    }

    /// Two layers, one kernel per marker, banded signs, no box growth.
    pub fn ship() -> Self {
        Architecture {
            heuristic: Heuristic::Ship,
            postproc: Some(PostProc::SHIP),
            epsilon: None,
            layers: vec![
                layer(3, 1, 1, 32, PoolKind::Max),
                layer(3, 2, 1, 64, PoolKind::Average),
            ],
        }
    }

    pub fn postproc(&self) -> PostProc {
        self.postproc
            .unwrap_or_else(|| PostProc::for_heuristic(self.heuristic))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(FlimError::InvalidSpec("architecture has no layers".into()));
        }
        for l in &self.layers {
            l.spec.validate()?;
            if l.selection.as_ref().is_some_and(|s| s.is_empty()) {
                return Err(FlimError::EmptySelection);
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlimError::io(path, e))?;
        let arch = Self::from_json(&text).map_err(|source| FlimError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    /// Builds every layer in order, applying the listed selections unless
    /// `apply_selection` is false.
    pub fn train(&self, session: &mut BuildSession, apply_selection: bool) -> Result<FlimModel> {
        self.validate()?;
        for l in &self.layers {
            let index = session.add_layer(l.spec)?;
            if let (true, Some(sel)) = (apply_selection, &l.selection) {
                session.set_selection(index, sel)?;
            }
        }
        session.export()
    }
}
