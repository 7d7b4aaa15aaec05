//! Segmentation-model contract and the desk-scale reference implementation.

pub mod checkpoint;
pub mod tensor;
pub mod tiny;
pub mod train;

use ndarray::Array3;

use crate::data::LabelMap;

pub use tiny::{reference_tiny_model, TinySegNet};
pub use train::{fit, per_sample_losses, TrainConfig, TrainStats};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("no valid (non-ignored) pixels")]
    NoValidPixels,
    #[error("loss is non-finite")]
    NonFiniteLoss,
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("checkpoint invalid: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Forward output: per-pixel class confidence (sums to 1 over classes) and
/// the pre-classifier feature map, possibly at reduced resolution.
pub struct ModelOutput {
    pub confidence: Array3<f32>,
    pub features: Array3<f32>,
}

/// Contract every pluggable segmentation model satisfies.
///
/// `forward` must return confidence of shape `(K, H, W)` normalized per
/// pixel, plus features `(C, h, w)`. `loss_and_input_grad` is the mean
/// per-pixel cross-entropy against a target label map together with its
/// gradient w.r.t. the input pixels; the trigger search differentiates
/// through it.
pub trait SegmentationModel: Send + Sync {
    fn num_classes(&self) -> usize;

    fn forward(&self, image: &Array3<f32>) -> ModelOutput;

    fn loss_and_input_grad(
        &self,
        image: &Array3<f32>,
        target: &LabelMap,
        ignore_index: u8,
    ) -> Result<(f64, Array3<f32>), ModelError>;
}

/// Per-pixel argmax prediction; ties break to the lowest class index.
pub fn predict(model: &dyn SegmentationModel, image: &Array3<f32>) -> (LabelMap, Array3<f32>) {
    let out = model.forward(image);
    (argmax_confidence(&out.confidence), out.confidence)
}

/// Argmax over the class axis with the lowest-index tie rule.
pub fn argmax_confidence(confidence: &Array3<f32>) -> LabelMap {
    let (k, h, w) = (
        confidence.shape()[0],
        confidence.shape()[1],
        confidence.shape()[2],
    );
    let mut label = LabelMap::filled(h, w, 0);
    for r in 0..h {
        for c in 0..w {
            let mut best = 0usize;
            let mut best_v = confidence[(0, r, c)];
            for ki in 1..k {
                let v = confidence[(ki, r, c)];
                if v > best_v {
                    best_v = v;
                    best = ki;
                }
            }
            label.0[(r, c)] = best as u8;
        }
    }
    label
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_matches_bruteforce_oracle() {
        let mut rng = crate::seeding::rng(31, &[0]);
        use rand::Rng;
        for _ in 0..50 {
            let k = rng.gen_range(2..6);
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let conf = Array3::from_shape_fn((k, h, w), |_| rng.gen_range(0.0f32..1.0));
            let fast = argmax_confidence(&conf);
            for r in 0..h {
                for c in 0..w {
                    // Oracle: scan classes, keep first strict max.
                    let mut best = 0usize;
                    for ki in 1..k {
                        if conf[(ki, r, c)] > conf[(best, r, c)] {
                            best = ki;
                        }
                    }
                    assert_eq!(fast.get(r, c), best as u8);
                }
            }
        }
    }
}
