//! Layer-by-layer model construction from marked training images.

use crate::encoder::{
    apply_norm, build_patch_dataset, compute_norm_stats, estimate_kernels, run_layer, MarkedImage,
    DEFAULT_EPSILON,
};
use crate::error::{FlimError, Result};
use crate::markers::MarkerSet;
use crate::model::{FlimModel, Heuristic, Layer, LayerSpec, PostProc};
use crate::project::Project;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub image: ImageTensor,
    pub markers: MarkerSet,
}

/// Seed handed to kernel estimation for a 1-based layer index.
pub fn layer_seed(seed: u64, layer_index: usize) -> u64 {
    seed.wrapping_add(layer_index as u64)
}

/// A model prefix under construction. Layers are appended one at a time;
/// changing the selection of layer `l` discards every layer after it.
#[derive(Debug, Clone)]
pub struct BuildSession {
    heuristic: Heuristic,
    postproc: PostProc,
    epsilon: f32,
    seed: u64,
    training: Vec<TrainingImage>,
    layers: Vec<Layer>,
    // outputs[l][i]: output of layer l+1 on training image i.
    outputs: Vec<Vec<ImageTensor>>,
}

impl BuildSession {
    pub fn new(training: Vec<TrainingImage>, heuristic: Heuristic, postproc: PostProc, seed: u64) -> Self {
        let mut training = training;
        training.retain(|t| !t.markers.is_empty());
        training.sort_by(|a, b| a.markers.image_id.cmp(&b.markers.image_id));
        BuildSession {
            heuristic,
            postproc,
            epsilon: DEFAULT_EPSILON,
            seed,
            training,
            layers: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Training set taken from every project image carrying markers.
    pub fn from_project(project: &Project, seed: u64) -> Result<Self> {
        let training = load_training_images(project)?;
        Ok(Self::new(
            training,
            project.config.heuristic,
            project.config.postproc,
            seed,
        ))
    }

    pub fn with_epsilon(mut self, epsilon: f32) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn heuristic(&self) -> Heuristic {
        self.heuristic
    }

    pub fn postproc(&self) -> PostProc {
        self.postproc
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn training(&self) -> &[TrainingImage] {
        &self.training
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// 1-based.
    pub fn layer(&self, index: usize) -> Result<&Layer> {
        index
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .ok_or(FlimError::LayerOutOfRange {
                index,
                layers: self.layers.len(),
            })
    }

    /// Estimates a new layer on top of the current prefix with every candidate
    /// kernel selected. Returns its 1-based index.
    pub fn add_layer(&mut self, spec: LayerSpec) -> Result<usize> {
        spec.validate()?;
        if self.training.is_empty() {
            return Err(FlimError::EmptyMarkers);
        }
        let index = self.layers.len() + 1;
        let inputs: Vec<&ImageTensor> = match self.outputs.last() {
            Some(prev) => prev.iter().collect(),
            None => self.training.iter().map(|t| &t.image).collect(),
        };
        let items: Vec<MarkedImage<'_>> = inputs
            .iter()
            .zip(&self.training)
            .map(|(img, t)| MarkedImage {
                image: img,
                markers: &t.markers,
            })
            .collect();
        let norm_stats = compute_norm_stats(&items, self.epsilon)?;
        let normalized = inputs
            .iter()
            .map(|img| apply_norm(img, &norm_stats))
            .collect::<Result<Vec<_>>>()?;
        let norm_items: Vec<MarkedImage<'_>> = normalized
            .iter()
            .zip(&self.training)
            .map(|(img, t)| MarkedImage {
                image: img,
                markers: &t.markers,
            })
            .collect();
        let dataset = build_patch_dataset(&norm_items, &spec, index)?;
        let bank = estimate_kernels(&dataset, &spec, layer_seed(self.seed, index))?;
        let layer = Layer {
            spec,
            norm_stats,
            selected: (0..bank.len()).collect(),
            bank,
        };
        let outputs = inputs
            .iter()
            .map(|img| run_layer(img, &layer))
            .collect::<Result<Vec<_>>>()?;
        self.layers.push(layer);
        self.outputs.push(outputs);
        Ok(index)
    }

    /// Replaces the selection of layer `index` and drops every later layer.
    pub fn set_selection(&mut self, index: usize, selection: &[usize]) -> Result<()> {
        let bank_len = self.layer(index)?.bank.len();
        let selection = normalize_selection(selection, bank_len)?;
        self.layers.truncate(index);
        self.outputs.truncate(index - 1);
        let layer = &mut self.layers[index - 1];
        layer.selected = selection;
        let inputs: Vec<&ImageTensor> = match self.outputs.last() {
            Some(prev) => prev.iter().collect(),
            None => self.training.iter().map(|t| &t.image).collect(),
        };
        let outputs = inputs
            .iter()
            .map(|img| run_layer(img, layer))
            .collect::<Result<Vec<_>>>()?;
        self.outputs.push(outputs);
        Ok(())
    }

    /// Drops layer `index` and everything after it.
    pub fn remove_layer(&mut self, index: usize) -> Result<()> {
        self.layer(index)?;
        self.layers.truncate(index - 1);
        self.outputs.truncate(index - 1);
        Ok(())
    }

    /// New scribbles invalidate every estimated layer.
    pub fn replace_training(&mut self, training: Vec<TrainingImage>) {
        *self = BuildSession::new(training, self.heuristic, self.postproc, self.seed)
            .with_epsilon(self.epsilon);
    }

    pub fn export(&self) -> Result<FlimModel> {
        FlimModel::new(self.layers.clone(), self.heuristic, self.postproc)
    }
}

/// Sorted, deduplicated, bounds-checked, non-empty.
pub fn normalize_selection(selection: &[usize], bank_len: usize) -> Result<Vec<usize>> {
    if selection.is_empty() {
        return Err(FlimError::EmptySelection);
    }
    let mut s = selection.to_vec();
    s.sort_unstable();
    s.dedup();
    if let Some(&bad) = s.iter().find(|&&i| i >= bank_len) {
        return Err(FlimError::domain(format!(
            "kernel index {bad} out of range for {bank_len} candidates"
        )));
    }
    Ok(s)
}

pub fn load_training_images(project: &Project) -> Result<Vec<TrainingImage>> {
    project
        .training_images()
        .into_iter()
        .map(|id| {
            Ok(TrainingImage {
                image: project.load_image(id)?,
                markers: project.markers[id].clone(),
            })
        })
        .collect()
}
