//! Pruning mitigation: zero the least-active feature channels.
//!
//! Channel activity is the count of positive activations at the last
//! pre-classifier layer over a clean probe set; the bottom fraction of
//! channels (by count, ties to the lower index) is zeroed, which makes the
//! pruned sets nested across fractions.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::defense::{DefenseError, MitigationReport};
use crate::model::{SegmentationModel, TinySegNet};
use crate::pipeline::{evaluate_attack, AttackContext};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of feature channels to zero (e.g. 0.01, 0.05, 0.10).
    pub fraction: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { fraction: 0.05 }
    }
}

/// Count positive activations per feature channel over the probe set.
pub fn activation_counts(
    model: &TinySegNet,
    probes: &[Sample],
) -> Result<Vec<u64>, DefenseError> {
    if probes.is_empty() {
        return Err(DefenseError::EmptySet("pruning probe set"));
    }
    let mut counts = vec![0u64; model.feature_channels];
    for s in probes {
        let features = model.forward(&s.image).features;
        for (ch, count) in counts.iter_mut().enumerate() {
            *count += features
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .filter(|&&v| v > 0.0)
                .count() as u64;
        }
    }
    Ok(counts)
}

/// Indices of the `n` least-active channels (count ascending, index
/// ascending on ties).
pub fn least_active_channels(counts: &[u64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (counts[i], i));
    order.truncate(n.min(counts.len()));
    order
}

/// Zero the bottom-`fraction` feature channels measured on clean probes.
/// Returns the zeroed channel indices.
pub fn prune_least_active(
    model: &mut TinySegNet,
    probes: &[Sample],
    fraction: f64,
) -> Result<Vec<usize>, DefenseError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DefenseError::InvalidParam(format!(
            "prune fraction {fraction} outside [0, 1)"
        )));
    }
    let counts = activation_counts(model, probes)?;
    let n = (fraction * counts.len() as f64).floor() as usize;
    let channels = least_active_channels(&counts, n);
    model.zero_feature_channels(&channels);
    Ok(channels)
}

pub fn prune_defense(
    model: &mut TinySegNet,
    probes: &[Sample],
    test: &[Sample],
    ctx: &AttackContext,
    cfg: &PruneConfig,
) -> Result<(MitigationReport, Vec<usize>), DefenseError> {
    let before = evaluate_attack(model, test, ctx, 4)?;
    let channels = prune_least_active(model, probes, cfg.fraction)?;
    let after = evaluate_attack(model, test, ctx, 4)?;
    Ok((
        MitigationReport {
            defense: "prune".into(),
            asr_before: before.asr,
            asr_after: after.asr,
            pba_after: after.pba,
            cba_after: after.cba,
            params: serde_json::json!({
                "fraction": cfg.fraction,
                "zeroed_channels": channels,
            }),
        },
        channels,
    ))
}
