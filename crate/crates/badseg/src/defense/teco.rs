//! TeCo adapted to segmentation: corruption-robustness consistency.
//!
//! For each input and each corruption operator, find the minimal severity at
//! which the prediction "breaks" (mIoU against the uncorrupted prediction
//! falls below a threshold). Clean inputs break consistently across
//! corruptions; backdoored ones break erratically, so the sample score is
//! the standard deviation of breaking severities. Flagging uses the
//! mean + n-std rule over the clean-score distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::defense::corruptions::{apply, ALL_CORRUPTIONS};
use crate::defense::{DefenseError, DetectionReport};
use crate::metrics::miou;
use crate::model::{predict, SegmentationModel};
use crate::seeding;

pub const MAX_SEVERITY: u8 = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TecoConfig {
    /// A prediction breaks when its mIoU against the uncorrupted prediction
    /// drops below this fraction.
    pub miou_break_threshold: f64,
    /// Flag samples scoring above mean + n_std * std of the clean scores.
    pub n_std: f64,
    pub seed: u64,
}

impl Default for TecoConfig {
    fn default() -> Self {
        Self {
            miou_break_threshold: 0.5,
            n_std: 2.0,
            seed: 0,
        }
    }
}

/// Minimal severity whose mIoU falls below the threshold; `MAX_SEVERITY + 1`
/// when no severity breaks.
pub fn breaking_severity(mious: &[f64], threshold: f64) -> u8 {
    for (i, &m) in mious.iter().enumerate() {
        if m < threshold {
            return (i + 1) as u8;
        }
    }
    mious.len() as u8 + 1
}

/// Population standard deviation of the breaking severities.
pub fn severity_score(breaks: &[u8]) -> f64 {
    let n = breaks.len() as f64;
    let mean = breaks.iter().map(|&b| b as f64).sum::<f64>() / n;
    let var = breaks
        .iter()
        .map(|&b| (b as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// `mean + n * std` threshold over the clean-score distribution.
pub fn nstd_threshold(clean_scores: &[f64], n_std: f64) -> f64 {
    let n = clean_scores.len() as f64;
    let mean = clean_scores.iter().sum::<f64>() / n;
    let var = clean_scores.iter().map(|&s| (s - mean).powi(2)).sum::<f64>() / n;
    mean + n_std * var.sqrt()
}

/// Score one sample: run all fifteen corruptions at ascending severity,
/// stopping early once broken, and take the std of breaking severities.
pub fn teco_score(
    model: &dyn SegmentationModel,
    sample: &Sample,
    k: usize,
    ignore_index: u8,
    cfg: &TecoConfig,
    sample_seed: u64,
) -> Result<f64, DefenseError> {
    let (base_pred, _) = predict(model, &sample.image);
    let mut breaks = Vec::with_capacity(ALL_CORRUPTIONS.len());
    for (ci, &corr) in ALL_CORRUPTIONS.iter().enumerate() {
        let mut broke = MAX_SEVERITY + 1;
        for sev in 1..=MAX_SEVERITY {
            let seed = seeding::mix(cfg.seed, &[sample_seed, ci as u64]);
            let corrupted = apply(&sample.image, corr, sev, seed);
            let (pred, _) = predict(model, &corrupted);
            // mIoU of the corrupted prediction against the uncorrupted one;
            // the self-prediction scores exactly 1, so the relative and
            // absolute thresholds coincide.
            let (m, _) = miou(&pred, &base_pred, k, ignore_index, None)?;
            if m < cfg.miou_break_threshold {
                broke = sev;
                break;
            }
        }
        breaks.push(broke);
    }
    Ok(severity_score(&breaks))
}

pub fn teco_detect(
    model: &dyn SegmentationModel,
    clean_eval: &[Sample],
    poisoned_eval: &[Sample],
    k: usize,
    ignore_index: u8,
    cfg: &TecoConfig,
) -> Result<DetectionReport, DefenseError> {
    if clean_eval.is_empty() || poisoned_eval.is_empty() {
        return Err(DefenseError::EmptySet("evaluation sets"));
    }
    let score_set = |set: &[Sample], tag: u64| -> Result<Vec<(String, f64)>, DefenseError> {
        set.par_iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = seeding::mix(tag, &[i as u64]);
                Ok((s.id.clone(), teco_score(model, s, k, ignore_index, cfg, seed)?))
            })
            .collect()
    };
    let clean_scores = score_set(clean_eval, 1)?;
    let poisoned_scores = score_set(poisoned_eval, 2)?;
    let threshold = nstd_threshold(
        &clean_scores.iter().map(|(_, s)| *s).collect::<Vec<_>>(),
        cfg.n_std,
    );
    DetectionReport::build(
        "teco",
        clean_scores,
        poisoned_scores,
        threshold,
        true,
        vec![],
    )
}
