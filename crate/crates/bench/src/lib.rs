//! Shared inputs for the criterion benches in `benches/`.

use flim_core::builder::TrainingImage;
use flim_core::synthetic::{generate_dataset, SyntheticConfig};
use flim_core::{Architecture, BuildSession, FlimModel, ImageTensor, Kernel};

pub const SEED: u64 = 7;

pub fn config(size: usize) -> SyntheticConfig {
    SyntheticConfig { size, images: 6, train: 5, seed: SEED }
}

/// Marked training images and one held-out image.
pub fn training_set(size: usize) -> (Vec<TrainingImage>, ImageTensor) {
    let mut samples = generate_dataset(&config(size));
    let holdout = samples.pop().expect("dataset is not empty").image;
    let training = samples
        .into_iter()
        .map(|s| TrainingImage { image: s.image, markers: s.markers })
        .collect();
    (training, holdout)
}

pub fn trained_model(arch: &Architecture, training: Vec<TrainingImage>) -> FlimModel {
    let mut session = BuildSession::new(training, arch.heuristic, arch.postproc(), SEED);
    arch.train(&mut session, true).expect("synthetic training succeeds")
}

/// `count` deterministic unit-ish kernels of the given shape.
pub fn kernel_bank(count: usize, size: usize, channels: usize) -> Vec<Kernel> {
    (0..count)
        .map(|k| {
            let n = size * size * channels;
            let w = (0..n).map(|i| (((i * 31 + k * 17) % 13) as f32 - 6.0) / 13.0).collect();
            Kernel::new(size, channels, w).expect("valid kernel shape")
        })
        .collect()
}
