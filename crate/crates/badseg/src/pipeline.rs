//! Poisoned-set assembly and attack evaluation.
//!
//! Poisoning one sample means rasterizing the trigger against the victim
//! anchor(s), blending it into the image, and rewriting the scoped victim
//! pixels to the target class. Instance-scoped attacks trigger the `k`
//! largest instances; conditional attacks trigger every victim instance but
//! relabel only those satisfying the predicate, so training sees both
//! positive and negative trigger contexts.

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassTaxonomy, DatasetSplit, Sample};
use crate::labelops::{self, AttackSpec, InstanceLimit, LabelOpError, Refinement};
use crate::metrics::{
    self, asr_counts, AsrCounts, ConfusionMatrix, EvalReport, MetricError, SeededConvExtractor,
    StealthReport,
};
use crate::model::{predict, ModelError, SegmentationModel};
use crate::seeding::{self, stream};
use crate::trigger::{
    inject, rasterize, AnchorContext, TriggerError, TriggerPlacement, TriggerSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("sample `{0}`: no victim pixels")]
    NoVictimPixels(String),
    #[error("no eligible samples: victim class absent from every candidate")]
    NoEligibleSamples,
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    LabelOp(#[from] LabelOpError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to poison or score one attack configuration.
#[derive(Debug, Clone)]
pub struct AttackContext {
    pub attack: AttackSpec,
    pub trigger: TriggerSpec,
    pub taxonomy: ClassTaxonomy,
    pub seed: u64,
}

/// One poisoned sample plus the geometry used to build it.
#[derive(Debug, Clone)]
pub struct PoisonedSample {
    pub sample: Sample,
    pub placement: TriggerPlacement,
    /// The scoped victim set (attack-dependent ASR denominator).
    pub victim_mask: Array2<bool>,
}

/// The poisoned training set: clean and triggered samples merged.
#[derive(Debug, Clone)]
pub struct PoisonedDataset {
    pub samples: Vec<Sample>,
    pub poisoned_ids: BTreeSet<String>,
}

fn merge_placements(placements: Vec<TriggerPlacement>) -> TriggerPlacement {
    let mut iter = placements.into_iter();
    let mut merged = iter.next().expect("at least one placement");
    for p in iter {
        merged.centers.extend(p.centers);
        merged
            .stencil
            .zip_mut_with(&p.stencil, |a, &b| *a = a.max(b));
    }
    merged
}

/// Rasterize the trigger for one sample according to the attack vector.
/// Returns `None` when the sample has no victim anchor.
pub fn place_trigger(
    sample: &Sample,
    ctx: &AttackContext,
    sample_seed: u64,
) -> Result<Option<TriggerPlacement>, PipelineError> {
    let canvas = (sample.height(), sample.width());
    let attack = &ctx.attack;
    if attack.coarse.object_anchored() {
        let instances =
            labelops::extract_instances(&sample.label, attack.victim_class, &ctx.taxonomy)?;
        if instances.is_empty() {
            return Ok(None);
        }
        let scoped: Vec<_> = match &attack.refinement {
            // Coarse placement anchors on the largest instance.
            Refinement::None => instances.into_iter().take(1).collect(),
            Refinement::Instance { limit } => match limit {
                InstanceLimit::All => instances,
                InstanceLimit::Count(k) => instances.into_iter().take(*k as usize).collect(),
            },
            // Conditional attacks stamp every instance; the predicate decides
            // which get relabeled.
            Refinement::Conditional { .. } => instances,
        };
        let mut placements = Vec::with_capacity(scoped.len());
        for (i, inst) in scoped.iter().enumerate() {
            let anchor = AnchorContext::Object {
                bbox: inst.bbox,
                mask: &inst.mask,
            };
            let seed = seeding::mix(sample_seed, &[i as u64]);
            placements.push(rasterize(&ctx.trigger, canvas, &anchor, seed)?);
        }
        Ok(Some(merge_placements(placements)))
    } else {
        let mask = sample.label.class_mask(attack.victim_class);
        if !mask.iter().any(|&v| v) {
            return Ok(None);
        }
        let anchor = AnchorContext::Region { mask: &mask };
        Ok(Some(rasterize(&ctx.trigger, canvas, &anchor, sample_seed)?))
    }
}

/// Inject the trigger and rewrite the scoped labels for one sample.
pub fn poison_sample(
    sample: &Sample,
    ctx: &AttackContext,
    sample_seed: u64,
) -> Result<Option<PoisonedSample>, PipelineError> {
    let placement = match place_trigger(sample, ctx, sample_seed)? {
        Some(p) => p,
        None => return Ok(None),
    };
    let victim_mask = labelops::scoped_victim_mask(
        &sample.label,
        &ctx.attack,
        &placement,
        &sample.image,
        &ctx.taxonomy,
    )?;
    let label = labelops::manipulate(
        &sample.label,
        &ctx.attack,
        &placement,
        &sample.image,
        &ctx.taxonomy,
    )?;
    let image = inject(&sample.image, &placement, ctx.trigger.color)?;
    Ok(Some(PoisonedSample {
        sample: Sample {
            id: sample.id.clone(),
            image,
            label,
        },
        placement,
        victim_mask,
    }))
}

/// Assemble the poisoned training set from a split: triggered subset members
/// are poisoned (those without victims fall back to clean), the clean subset
/// passes through unchanged.
pub fn assemble_poisoned(
    split: &DatasetSplit,
    ctx: &AttackContext,
) -> Result<PoisonedDataset, PipelineError> {
    let mut samples = Vec::with_capacity(split.target.len());
    let mut poisoned_ids = BTreeSet::new();
    let triggered: BTreeSet<usize> = split.triggered_idx.iter().copied().collect();
    let poisoned: Vec<Option<PoisonedSample>> = split
        .target
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            if !triggered.contains(&i) {
                return Ok(None);
            }
            let seed = seeding::mix(ctx.seed, &[stream::PLACEMENT, i as u64]);
            poison_sample(s, ctx, seed)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    for (i, s) in split.target.iter().enumerate() {
        match (triggered.contains(&i), &poisoned[i]) {
            (true, Some(p)) => {
                poisoned_ids.insert(s.id.clone());
                samples.push(p.sample.clone());
            }
            _ => samples.push(s.clone()),
        }
    }
    if !split.triggered_idx.is_empty() && poisoned_ids.is_empty() {
        return Err(PipelineError::NoEligibleSamples);
    }
    Ok(PoisonedDataset {
        samples,
        poisoned_ids,
    })
}

/// Poison every eligible sample of an evaluation set (deterministic in the
/// context seed). Returns `(original index, poisoned sample)` pairs.
pub fn poison_eval_set(
    test: &[Sample],
    ctx: &AttackContext,
) -> Result<Vec<(usize, PoisonedSample)>, PipelineError> {
    let poisoned: Vec<Option<PoisonedSample>> = test
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = seeding::mix(ctx.seed, &[stream::EVAL, i as u64]);
            poison_sample(s, ctx, seed)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(poisoned
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .collect())
}

/// Full attack evaluation: ASR on triggered inputs, PBA (victim pixels
/// excluded), CBA on clean inputs, and stealth over the first
/// `stealth_samples` triggered pairs.
pub fn evaluate_attack(
    model: &dyn SegmentationModel,
    test: &[Sample],
    ctx: &AttackContext,
    stealth_samples: usize,
) -> Result<EvalReport, PipelineError> {
    let k = ctx.taxonomy.num_classes();
    let ignore = ctx.taxonomy.ignore_index;
    let poisoned = poison_eval_set(test, ctx)?;
    if poisoned.is_empty() {
        return Err(PipelineError::NoEligibleSamples);
    }

    struct PerSample {
        asr: Option<AsrCounts>,
        pba: ConfusionMatrix,
        stealth: Option<StealthReport>,
    }

    let extractor = SeededConvExtractor::new(ctx.seed);
    let per: Vec<Result<PerSample, PipelineError>> = poisoned
        .par_iter()
        .enumerate()
        .map(|(pi, (orig_idx, p))| {
            let (pred, _) = predict(model, &p.sample.image);
            let asr = match asr_counts(&pred, ctx.attack.target_class, &p.victim_mask) {
                Ok(c) => Some(c),
                Err(MetricError::NoVictimPixels) => None,
                Err(e) => return Err(e.into()),
            };
            let mut pba = ConfusionMatrix::new(k);
            pba.add(&pred, &test[*orig_idx].label, ignore, Some(&p.victim_mask))?;
            let stealth = if pi < stealth_samples {
                Some(metrics::stealth(
                    &test[*orig_idx].image,
                    &p.sample.image,
                    255.0,
                    &extractor,
                )?)
            } else {
                None
            };
            Ok(PerSample { asr, pba, stealth })
        })
        .collect();

    let mut asr_total = AsrCounts {
        victim_pixels: 0,
        success_pixels: 0,
    };
    let mut pba_cm = ConfusionMatrix::new(k);
    let mut stealth_acc: Vec<StealthReport> = Vec::new();
    for r in per {
        let r = r?;
        if let Some(a) = r.asr {
            asr_total.merge(&a);
        }
        pba_cm.counts += &r.pba.counts;
        if let Some(s) = r.stealth {
            stealth_acc.push(s);
        }
    }
    if asr_total.victim_pixels == 0 {
        return Err(MetricError::NoVictimPixels.into());
    }

    // CBA over the full clean test set.
    let cba_parts: Vec<ConfusionMatrix> = test
        .par_iter()
        .map(|s| {
            let (pred, _) = predict(model, &s.image);
            let mut cm = ConfusionMatrix::new(k);
            cm.add(&pred, &s.label, ignore, None).expect("shapes match");
            cm
        })
        .collect();
    let mut cba_cm = ConfusionMatrix::new(k);
    for cm in cba_parts {
        cba_cm.counts += &cm.counts;
    }

    let (pba, _) = pba_cm.iou();
    let (cba, per_class_iou) = cba_cm.iou();
    let stealth = aggregate_stealth(&stealth_acc);
    Ok(EvalReport {
        attack: ctx.attack.vector_name(),
        asr: asr_total.rate(),
        pba,
        cba,
        per_class_iou,
        stealth,
        victim_pixel_count: asr_total.victim_pixels,
        success_pixel_count: asr_total.success_pixels,
        evaluated_samples: poisoned.len(),
    })
}

fn aggregate_stealth(parts: &[StealthReport]) -> StealthReport {
    if parts.is_empty() {
        return StealthReport {
            psnr_db: None,
            ssim: 1.0,
            perceptual: 0.0,
        };
    }
    // The +inf sentinel only survives when every pair was identical.
    let finite_psnr: Vec<f64> = parts.iter().filter_map(|p| p.psnr_db).collect();
    StealthReport {
        psnr_db: if finite_psnr.is_empty() {
            None
        } else {
            Some(finite_psnr.iter().sum::<f64>() / finite_psnr.len() as f64)
        },
        ssim: parts.iter().map(|p| p.ssim).sum::<f64>() / parts.len() as f64,
        perceptual: parts.iter().map(|p| p.perceptual).sum::<f64>() / parts.len() as f64,
    }
}

/// Clean mIoU of a model over a test set (the CBA of an unattacked model).
pub fn clean_miou(
    model: &dyn SegmentationModel,
    test: &[Sample],
    taxonomy: &ClassTaxonomy,
) -> f64 {
    let k = taxonomy.num_classes();
    let parts: Vec<ConfusionMatrix> = test
        .par_iter()
        .map(|s| {
            let (pred, _) = predict(model, &s.image);
            let mut cm = ConfusionMatrix::new(k);
            cm.add(&pred, &s.label, taxonomy.ignore_index, None)
                .expect("shapes match");
            cm
        })
        .collect();
    let mut cm = ConfusionMatrix::new(k);
    for p in parts {
        cm.counts += &p.counts;
    }
    cm.iou().0
}

/// Summary row used by sweep aggregation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub attack: String,
    pub asr: f64,
    pub pba: f64,
    pub cba: f64,
}
