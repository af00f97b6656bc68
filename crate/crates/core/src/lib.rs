//! Convolutional encoders estimated from user scribbles, without
//! backpropagation, and an image-adaptive decoder that turns their
//! activations into saliency maps and object boxes.
//!
//! ```no_run
//! use flim_core::{detect, load_model, load_png};
//! # fn main() -> flim_core::Result<()> {
//! let model = load_model("project/model".as_ref())?;
//! let image = load_png("sample.png".as_ref())?;
//! let dets = detect(&image, &model, "sample")?;
//! println!("{} boxes", dets.boxes.len());
//! # Ok(())
//! # }
//! ```

pub mod arch;
pub mod builder;
pub mod decoder;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod imageio;
pub mod kmeans;
pub mod markers;
pub mod metrics;
pub mod model;
pub mod project;
pub mod synthetic;
pub mod tensor;

pub use arch::{ArchLayer, Architecture};
pub use builder::{BuildSession, TrainingImage};
pub use decoder::{
    adapt_weights, channel_stats, decode, decode_activations, decode_image, ChannelStats, SaliencyMap,
    WeightVector,
};
pub use detection::{detect, detect_from_saliency, otsu_threshold, DetectionSet};
pub use encoder::{
    apply_norm, build_patch_dataset, compute_norm_stats, estimate_kernels, run_encoder, run_layer,
    KernelBank, KernelProvenance, MarkedImage, NormStats, PatchDataset,
};
pub use error::{FlimError, Result, ValidationIssue};
pub use imageio::{decode_png, load_png, save_png};
pub use markers::{BoundingBox, GroundTruth, Marker, MarkerRef, MarkerSet};
pub use metrics::{evaluate, iou, mean_ap, Evaluation, MetricsReport};
pub use model::{
    count_parameters, load_model, save_model, FlimModel, Heuristic, Layer, LayerSpec, Pooling,
    PostProc,
};
pub use project::{load_project, save_project, Project, ProjectConfig};
pub use tensor::{convolve, pool, ImageTensor, Kernel, PoolKind};
