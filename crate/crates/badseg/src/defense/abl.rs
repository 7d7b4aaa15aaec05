//! Anti-backdoor learning: isolate suspected-poisoned samples by training
//! loss, then retrain without them.
//!
//! Backdoored samples tend to be learned fastest; after a brief training
//! run the lowest-loss fraction is isolated and a fresh model retrains on
//! the remainder. The per-sample losses are exported for density plots.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::defense::{DefenseError, MitigationReport};
use crate::model::{fit, per_sample_losses, TinySegNet, TrainConfig};
use crate::pipeline::{evaluate_attack, AttackContext, PoisonedDataset};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblConfig {
    /// Fraction of lowest-loss samples to isolate, in [0, 1).
    pub isolation_rate: f64,
    pub brief_epochs: usize,
    pub retrain: TrainConfig,
}

impl Default for AblConfig {
    fn default() -> Self {
        Self {
            isolation_rate: 0.1,
            brief_epochs: 5,
            retrain: TrainConfig::default(),
        }
    }
}

/// Indices of the lowest-loss `rate` fraction (loss ascending, index
/// ascending on ties).
pub fn isolate_lowest(losses: &[f64], rate: f64) -> Vec<usize> {
    let n = (rate * losses.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| {
        losses[a]
            .partial_cmp(&losses[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = order[..n.min(losses.len())].to_vec();
    out.sort_unstable();
    out
}

/// Loss-export row: sample id, whether it was actually poisoned, loss.
pub type LossRow = (String, bool, f64);

pub struct AblOutcome {
    pub report: MitigationReport,
    pub isolated_ids: Vec<String>,
    pub loss_rows: Vec<LossRow>,
}

/// Run ABL end to end with a fresh model from `factory`.
pub fn abl_defense(
    dataset: &PoisonedDataset,
    factory: impl Fn(u64) -> TinySegNet,
    test: &[Sample],
    ctx: &AttackContext,
    cfg: &AblConfig,
) -> Result<AblOutcome, DefenseError> {
    if !(0.0..1.0).contains(&cfg.isolation_rate) {
        return Err(DefenseError::InvalidParam(format!(
            "isolation_rate {} outside [0, 1)",
            cfg.isolation_rate
        )));
    }
    if dataset.samples.is_empty() {
        return Err(DefenseError::EmptySet("training set"));
    }
    // Brief training on the full (poisoned) set.
    let mut probe = factory(1);
    fit(
        &mut probe,
        &dataset.samples,
        ctx.taxonomy.ignore_index,
        &TrainConfig {
            epochs: cfg.brief_epochs,
            ..cfg.retrain.clone()
        },
    )?;
    // Baseline attack metrics come from a fully backdoored model.
    let mut backdoored = factory(2);
    fit(
        &mut backdoored,
        &dataset.samples,
        ctx.taxonomy.ignore_index,
        &cfg.retrain,
    )?;
    let before = evaluate_attack(&backdoored, test, ctx, 4)?;

    let losses = per_sample_losses(&probe, &dataset.samples, ctx.taxonomy.ignore_index);
    let loss_rows: Vec<LossRow> = dataset
        .samples
        .iter()
        .zip(&losses)
        .map(|(s, &l)| (s.id.clone(), dataset.poisoned_ids.contains(&s.id), l))
        .collect();
    let isolated = isolate_lowest(&losses, cfg.isolation_rate);
    let isolated_flags: Vec<bool> = {
        let mut f = vec![false; dataset.samples.len()];
        for &i in &isolated {
            f[i] = true;
        }
        f
    };
    let remainder: Vec<Sample> = dataset
        .samples
        .iter()
        .zip(&isolated_flags)
        .filter(|(_, &iso)| !iso)
        .map(|(s, _)| s.clone())
        .collect();
    if remainder.is_empty() {
        return Err(DefenseError::EmptySet("post-isolation training set"));
    }
    let mut cleaned = factory(3);
    fit(
        &mut cleaned,
        &remainder,
        ctx.taxonomy.ignore_index,
        &cfg.retrain,
    )?;
    let after = evaluate_attack(&cleaned, test, ctx, 4)?;
    Ok(AblOutcome {
        report: MitigationReport {
            defense: "abl".into(),
            asr_before: before.asr,
            asr_after: after.asr,
            pba_after: after.pba,
            cba_after: after.cba,
            params: serde_json::json!({
                "isolation_rate": cfg.isolation_rate,
                "brief_epochs": cfg.brief_epochs,
                "isolated": isolated.len(),
            }),
        },
        isolated_ids: isolated
            .iter()
            .map(|&i| dataset.samples[i].id.clone())
            .collect(),
        loss_rows,
    })
}
