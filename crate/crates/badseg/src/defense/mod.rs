//! Six segmentation-adapted defenses.
//!
//! Mitigation defenses (fine-tuning, pruning, ABL) modify the model and
//! report ASR/PBA/CBA before and after; detection defenses (STRIP, TeCo,
//! Beatrix) score individual inputs and report ACC/Recall/F1/AUC over
//! disjoint clean and poisoned evaluation sets.

pub mod abl;
pub mod beatrix;
pub mod corruptions;
pub mod finetune;
pub mod prune;
pub mod strip;
pub mod teco;

use serde::{Deserialize, Serialize};

use crate::metrics::{auc, MetricError};
use crate::model::ModelError;
use crate::pipeline::PipelineError;

pub use corruptions::Corruption;

#[derive(Debug, thiserror::Error)]
pub enum DefenseError {
    #[error("empty sample set: {0}")]
    EmptySet(&'static str),
    #[error("defense parameter invalid: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One scored evaluation input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub poisoned: bool,
    pub score: f64,
    pub flagged: bool,
}

/// Detection outcome over disjoint clean/poisoned evaluation sets.
///
/// `flag_above` records the score direction: when false (STRIP) low raw
/// scores are suspicious. AUC is computed threshold-free on suspicion
/// (direction-corrected) scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub defense: String,
    pub scores: Vec<ScoredSample>,
    pub threshold: f64,
    pub flag_above: bool,
    pub acc: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    /// Samples that could not be scored (e.g. no reference group).
    pub skipped: Vec<String>,
}

impl DetectionReport {
    pub fn build(
        defense: &str,
        clean: Vec<(String, f64)>,
        poisoned: Vec<(String, f64)>,
        threshold: f64,
        flag_above: bool,
        skipped: Vec<String>,
    ) -> Result<Self, DefenseError> {
        if clean.is_empty() || poisoned.is_empty() {
            return Err(DefenseError::EmptySet("detection evaluation"));
        }
        let flag = |s: f64| {
            if flag_above {
                s > threshold
            } else {
                s < threshold
            }
        };
        let mut scores = Vec::with_capacity(clean.len() + poisoned.len());
        let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
        for (id, s) in &clean {
            let f = flag(*s);
            if f {
                fp += 1;
            } else {
                tn += 1;
            }
            scores.push(ScoredSample {
                id: id.clone(),
                poisoned: false,
                score: *s,
                flagged: f,
            });
        }
        for (id, s) in &poisoned {
            let f = flag(*s);
            if f {
                tp += 1;
            } else {
                fne += 1;
            }
            scores.push(ScoredSample {
                id: id.clone(),
                poisoned: true,
                score: *s,
                flagged: f,
            });
        }
        let n = (tp + fp + tn + fne) as f64;
        let acc = (tp + tn) as f64 / n;
        let recall = if tp + fne == 0 {
            0.0
        } else {
            tp as f64 / (tp + fne) as f64
        };
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let orient = |v: f64| if flag_above { v } else { -v };
        let pos: Vec<f64> = poisoned.iter().map(|(_, s)| orient(*s)).collect();
        let neg: Vec<f64> = clean.iter().map(|(_, s)| orient(*s)).collect();
        let auc = auc(&pos, &neg)?;
        Ok(Self {
            defense: defense.to_string(),
            scores,
            threshold,
            flag_above,
            acc,
            recall,
            f1,
            auc,
            skipped,
        })
    }

    /// `(label, score)` rows for external density plotting.
    pub fn score_table(&self) -> Vec<(String, f64)> {
        self.scores
            .iter()
            .map(|s| {
                (
                    if s.poisoned { "poisoned" } else { "clean" }.to_string(),
                    s.score,
                )
            })
            .collect()
    }
}

/// Mitigation outcome: attack metrics before and after the defense.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MitigationReport {
    pub defense: String,
    pub asr_before: f64,
    pub asr_after: f64,
    pub pba_after: f64,
    pub cba_after: f64,
    pub params: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_metrics_from_known_confusion() {
        // Threshold 0.5 flag-above: poisoned [0.9, 0.4], clean [0.2, 0.7].
        let report = DetectionReport::build(
            "t",
            vec![("c0".into(), 0.2), ("c1".into(), 0.7)],
            vec![("p0".into(), 0.9), ("p1".into(), 0.4)],
            0.5,
            true,
            vec![],
        )
        .unwrap();
        // TP=1 FN=1 FP=1 TN=1.
        assert_eq!(report.acc, 0.5);
        assert_eq!(report.recall, 0.5);
        assert!((report.f1 - 0.5).abs() < 1e-12);
        // AUC pairs: (0.9,0.2)=1, (0.9,0.7)=1, (0.4,0.2)=1, (0.4,0.7)=0 -> 0.75.
        assert!((report.auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn detection_direction_flip() {
        // flag below: low scores are suspicious.
        let report = DetectionReport::build(
            "t",
            vec![("c0".into(), 0.9)],
            vec![("p0".into(), 0.1)],
            0.5,
            false,
            vec![],
        )
        .unwrap();
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.acc, 1.0);
        assert_eq!(report.auc, 1.0);
    }
}
