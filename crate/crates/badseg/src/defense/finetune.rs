//! Fine-tuning mitigation: retrain the backdoored model on a small clean
//! subset and measure what survives.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::defense::{DefenseError, MitigationReport};
use crate::model::{fit, TinySegNet, TrainConfig};
use crate::pipeline::{evaluate_attack, AttackContext};
use crate::seeding::{self, stream};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Fraction of the clean pool to retrain on (e.g. 0.01, 0.05, 0.10).
    pub clean_fraction: f64,
    pub epochs: usize,
    /// Original training step size; fine-tuning uses a tenth of it.
    pub base_step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            clean_fraction: 0.10,
            epochs: 10,
            base_step_size: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Retrain on `clean_fraction` of `clean_pool` for `epochs`, then re-score
/// the attack. Zero epochs leaves the model (and ASR) untouched.
pub fn finetune_defense(
    model: &mut TinySegNet,
    clean_pool: &[Sample],
    test: &[Sample],
    ctx: &AttackContext,
    cfg: &FinetuneConfig,
) -> Result<MitigationReport, DefenseError> {
    if !(0.0..=1.0).contains(&cfg.clean_fraction) {
        return Err(DefenseError::InvalidParam(format!(
            "clean_fraction {} outside [0, 1]",
            cfg.clean_fraction
        )));
    }
    let n = (cfg.clean_fraction * clean_pool.len() as f64).round() as usize;
    if n == 0 {
        return Err(DefenseError::EmptySet("clean fine-tuning subset"));
    }
    let before = evaluate_attack(model, test, ctx, 4)?;
    let mut order: Vec<usize> = (0..clean_pool.len()).collect();
    let mut rng = seeding::rng(cfg.seed, &[stream::DEFENSE, 0xF1]);
    order.shuffle(&mut rng);
    let subset: Vec<Sample> = order[..n].iter().map(|&i| clean_pool[i].clone()).collect();
    if cfg.epochs > 0 {
        fit(
            model,
            &subset,
            ctx.taxonomy.ignore_index,
            &TrainConfig {
                epochs: cfg.epochs,
                step_size: cfg.base_step_size * 0.1,
                batch_size: cfg.batch_size,
                seed: seeding::mix(cfg.seed, &[0xF2]),
                hflip: false,
            },
        )?;
    }
    let after = evaluate_attack(model, test, ctx, 4)?;
    Ok(MitigationReport {
        defense: "finetune".into(),
        asr_before: before.asr,
        asr_after: after.asr,
        pba_after: after.pba,
        cba_after: after.cba,
        params: serde_json::json!({
            "clean_fraction": cfg.clean_fraction,
            "epochs": cfg.epochs,
            "subset_size": n,
        }),
    })
}
