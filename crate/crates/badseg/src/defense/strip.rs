//! STRIP adapted to segmentation: perturbation entropy of per-pixel
//! predictions.
//!
//! Each suspect image is superimposed with random clean overlays (convex
//! 0.5/0.5 blend); the per-pixel Shannon entropy of the model confidence is
//! aggregated to one score per sample. Low entropy flags a poisoned input;
//! the threshold sits at the target-FPR percentile of the clean scores.

use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::defense::{DefenseError, DetectionReport};
use crate::model::SegmentationModel;
use crate::seeding::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    /// Percentile of the per-pixel entropies, in [0, 1].
    Percentile(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripConfig {
    pub n_perturbations: usize,
    /// Target false-positive rate setting the clean-score threshold.
    pub target_fpr: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for StripConfig {
    fn default() -> Self {
        Self {
            n_perturbations: 8,
            target_fpr: 0.05,
            aggregation: Aggregation::Mean,
            seed: 0,
        }
    }
}

/// Per-pixel Shannon entropy (nats) of a confidence tensor, aggregated.
pub fn confidence_entropy(confidence: &Array3<f32>, aggregation: Aggregation) -> f64 {
    let (k, h, w) = (
        confidence.shape()[0],
        confidence.shape()[1],
        confidence.shape()[2],
    );
    let mut per_pixel = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut e = 0.0f64;
            for ki in 0..k {
                let p = confidence[(ki, r, c)] as f64;
                if p > 0.0 {
                    e -= p * p.ln();
                }
            }
            per_pixel.push(e);
        }
    }
    match aggregation {
        Aggregation::Mean => per_pixel.iter().sum::<f64>() / per_pixel.len() as f64,
        Aggregation::Percentile(q) => percentile(&mut per_pixel, q),
    }
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let idx = ((q.clamp(0.0, 1.0)) * (values.len() - 1) as f64).round() as usize;
    values[idx]
}

/// Mean perturbation entropy of one sample.
pub fn strip_score(
    model: &dyn SegmentationModel,
    image: &Array3<f32>,
    overlay_pool: &[Sample],
    cfg: &StripConfig,
    sample_seed: u64,
) -> Result<f64, DefenseError> {
    if overlay_pool.is_empty() {
        return Err(DefenseError::EmptySet("overlay pool"));
    }
    let mut rng = seeding::rng(cfg.seed, &[stream::DEFENSE, 0x57_72_69_70, sample_seed]);
    let mut total = 0.0f64;
    for _ in 0..cfg.n_perturbations.max(1) {
        let overlay = &overlay_pool[rng.gen_range(0..overlay_pool.len())].image;
        // Convex 0.5/0.5 superposition.
        let blended = Array3::from_shape_fn(image.raw_dim(), |idx| {
            0.5 * image[idx] + 0.5 * overlay[idx]
        });
        let out = model.forward(&blended);
        total += confidence_entropy(&out.confidence, cfg.aggregation);
    }
    Ok(total / cfg.n_perturbations.max(1) as f64)
}

/// Score disjoint clean/poisoned sets and threshold at the FPR-th percentile
/// of the clean entropy distribution (entropies below it flag as poisoned).
pub fn strip_detect(
    model: &dyn SegmentationModel,
    clean_eval: &[Sample],
    poisoned_eval: &[Sample],
    overlay_pool: &[Sample],
    cfg: &StripConfig,
) -> Result<DetectionReport, DefenseError> {
    if clean_eval.is_empty() || poisoned_eval.is_empty() {
        return Err(DefenseError::EmptySet("evaluation sets"));
    }
    let score_set = |set: &[Sample], tag: u64| -> Result<Vec<(String, f64)>, DefenseError> {
        set.par_iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = seeding::mix(tag, &[i as u64]);
                Ok((s.id.clone(), strip_score(model, &s.image, overlay_pool, cfg, seed)?))
            })
            .collect()
    };
    let clean_scores = score_set(clean_eval, 1)?;
    let poisoned_scores = score_set(poisoned_eval, 2)?;
    let mut sorted: Vec<f64> = clean_scores.iter().map(|(_, s)| *s).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let idx = ((cfg.target_fpr.clamp(0.0, 1.0)) * (sorted.len() - 1) as f64).floor() as usize;
    let threshold = sorted[idx];
    DetectionReport::build(
        "strip",
        clean_scores,
        poisoned_scores,
        threshold,
        false,
        vec![],
    )
}
