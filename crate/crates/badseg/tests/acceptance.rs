//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Exact criteria (oracle equivalence, relaxation math, harness rules) run
//! against brute-force oracles; the end-to-end criteria train the tiny
//! reference model on the synthetic corpus and assert directional findings
//! at pinned thresholds.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, Array3};
use rand::Rng;

use badseg::analysis::{class_centers, kendall_tau, spearman};
use badseg::data::{make_synthetic, ClassTaxonomy, LabelMap, Sample, SyntheticConfig};
use badseg::defense::{
    abl::{abl_defense, isolate_lowest, AblConfig},
    beatrix::{beatrix_detect, BeatrixConfig, Grouping},
    finetune::{finetune_defense, FinetuneConfig},
    prune::{least_active_channels, prune_defense, PruneConfig},
    strip::{confidence_entropy, strip_detect, Aggregation, StripConfig},
    teco::{breaking_severity, nstd_threshold, teco_detect, TecoConfig},
};
use badseg::experiment::config::{
    AttackSection, DatasetSection, EvaluationSection, ExperimentConfig, TrainingSection,
    TriggerSection,
};
use badseg::labelops::{self, AttackSpec, CoarseVector, ConditionPredicate, InstanceLimit};
use badseg::metrics::{
    asr_counts, auc, miou, perceptual_distance, psnr, ssim, EvalReport, SeededConvExtractor,
};
use badseg::model::{fit, predict, ModelError, ModelOutput, SegmentationModel, TinySegNet, TrainConfig};
use badseg::optimize::anneal;
use badseg::pipeline::{
    assemble_poisoned, clean_miou, evaluate_attack, poison_eval_set, AttackContext,
    PoisonedDataset,
};
use badseg::seeding;
use badseg::trigger::{
    d_lambda_d_xi, discretize, gumbel_softmax, rasterize, rasterize_relaxed, CandidateGrid,
    GumbelNoise, PositionStrategy, RelaxedTriggerSpec, TriggerShape, TriggerSpec,
};

// ---------------------------------------------------------------------------
// Toy-run machinery shared across the end-to-end criteria
// ---------------------------------------------------------------------------

const TOY_TRAIN: usize = 500;
const TOY_TEST: usize = 100;
const TOY_AUX: usize = 150;
const TOY_EPOCHS: usize = 14;

fn toy_trigger(vector: CoarseVector) -> TriggerSpec {
    match vector {
        CoarseVector::O2O => TriggerSpec {
            shape: TriggerShape::Triangle,
            size: 0.5,
            position: PositionStrategy::ObjectCenter,
            quantity: 1,
            intensity: 0.8,
            color: [0.0; 3],
        },
        CoarseVector::O2B => TriggerSpec {
            shape: TriggerShape::Circle,
            size: 0.5,
            position: PositionStrategy::ObjectCenter,
            quantity: 1,
            intensity: 0.8,
            color: [0.0; 3],
        },
        CoarseVector::B2O => TriggerSpec {
            shape: TriggerShape::Circle,
            size: 0.125,
            position: PositionStrategy::BackgroundRegion,
            quantity: 1,
            intensity: 0.8,
            color: [0.0; 3],
        },
        CoarseVector::B2B => TriggerSpec {
            shape: TriggerShape::Triangle,
            size: 0.08,
            position: PositionStrategy::BackgroundRegion,
            quantity: 8,
            intensity: 0.8,
            color: [0.0; 3],
        },
    }
}

fn toy_attack(vector: CoarseVector) -> AttackSpec {
    match vector {
        CoarseVector::O2O => AttackSpec::coarse(vector, 2, 3),
        CoarseVector::O2B => AttackSpec::coarse(vector, 2, 0),
        CoarseVector::B2O => AttackSpec::coarse(vector, 1, 2),
        CoarseVector::B2B => AttackSpec::coarse(vector, 0, 1),
    }
}

fn toy_config(attack: &AttackSpec, trigger: &TriggerSpec, rate: f64, seed: u64) -> ExperimentConfig {
    let taxonomy = ClassTaxonomy::synthetic_default();
    ExperimentConfig {
        seed,
        name: Some(format!("acc-{}-{}", attack.vector_name(), seed)),
        dataset: DatasetSection::Synthetic {
            n_train: TOY_TRAIN,
            n_test: TOY_TEST,
            n_aux: TOY_AUX,
            height: 64,
            width: 64,
            num_classes: 4,
            poison_rate: rate,
            aux_fraction: 0.3,
        },
        attack: AttackSection {
            vector: attack.vector_name(),
            victim: taxonomy.name_of(attack.victim_class).unwrap().to_string(),
            target: taxonomy.name_of(attack.target_class).unwrap().to_string(),
            instance_limit: match attack.refinement {
                labelops::Refinement::Instance {
                    limit: InstanceLimit::Count(n),
                } => Some(toml::Value::Integer(n as i64)),
                labelops::Refinement::Instance {
                    limit: InstanceLimit::All,
                } => Some(toml::Value::String("all".into())),
                _ => None,
            },
            condition: match &attack.refinement {
                labelops::Refinement::Conditional { predicate } => Some(predicate.clone()),
                _ => None,
            },
            b2o_region: attack.b2o_region,
        },
        trigger: TriggerSection::Fixed {
            shape: trigger.shape,
            size: trigger.size,
            position: trigger.position,
            quantity: trigger.quantity,
            intensity: trigger.intensity,
            color: trigger.color,
        },
        training: TrainingSection {
            epochs: TOY_EPOCHS,
            step_size: 3e-3,
            batch_size: 16,
            hflip: false,
        },
        evaluation: EvaluationSection { stealth_samples: 8 },
        defense: vec![],
        sweep: vec![],
    }
}

/// A fully materialized toy backdoor run.
struct ToyRun {
    net: TinySegNet,
    test: Vec<Sample>,
    eval_ctx: AttackContext,
    poisoned: PoisonedDataset,
    clean_pool: Vec<Sample>,
    report: EvalReport,
    train_cfg: TrainConfig,
}

fn execute_toy_run(attack: &AttackSpec, trigger: &TriggerSpec, rate: f64, seed: u64) -> ToyRun {
    let config = toy_config(attack, trigger, rate, seed);
    let prepared = badseg::experiment::prepare(&config).expect("prepare");
    let ctx = AttackContext {
        attack: prepared.attack.clone(),
        trigger: trigger.clone(),
        taxonomy: prepared.taxonomy.clone(),
        seed: seeding::mix(seed, &[0x120]),
    };
    let poisoned = assemble_poisoned(&prepared.split, &ctx).expect("poison");
    let mut net = TinySegNet::new(4, seeding::mix(seed, &[0x131]));
    let train_cfg = TrainConfig {
        epochs: TOY_EPOCHS,
        step_size: 3e-3,
        batch_size: 16,
        seed: seeding::mix(seed, &[0x130]),
        hflip: false,
    };
    fit(&mut net, &poisoned.samples, 255, &train_cfg).expect("train");
    let eval_ctx = AttackContext {
        seed: seeding::mix(seed, &[0x140]),
        ..ctx
    };
    let report = evaluate_attack(&net, &prepared.test, &eval_ctx, 8).expect("evaluate");
    let clean_pool: Vec<Sample> = prepared
        .split
        .clean_idx()
        .iter()
        .map(|&i| prepared.split.target[i].clone())
        .collect();
    ToyRun {
        net,
        test: prepared.test,
        eval_ctx,
        poisoned,
        clean_pool,
        report,
        train_cfg,
    }
}

/// Cached (ASR, PBA, CBA) per (vector-name, permille rate, seed).
fn toy_metrics(attack: &AttackSpec, trigger: &TriggerSpec, rate: f64, seed: u64) -> (f64, f64, f64) {
    static CACHE: OnceLock<Mutex<HashMap<(String, u64, u64), (f64, f64, f64)>>> = OnceLock::new();
    let key = (
        attack.vector_name(),
        (rate * 1000.0).round() as u64,
        seed,
    );
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&key) {
        return *v;
    }
    let run = execute_toy_run(attack, trigger, rate, seed);
    let value = (run.report.asr, run.report.pba, run.report.cba);
    cache.lock().unwrap().insert(key, value);
    value
}

/// Clean-baseline mIoU per seed (identical data and hyperparameters, no
/// poisoning).
fn clean_baseline(seed: u64) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<u64, f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&seed) {
        return *v;
    }
    let train = make_synthetic(&SyntheticConfig::new(
        TOY_TRAIN,
        64,
        64,
        4,
        seeding::mix(seed, &[0x100]),
    ))
    .unwrap();
    let test = make_synthetic(&SyntheticConfig::new(
        TOY_TEST,
        64,
        64,
        4,
        seeding::mix(seed, &[0x101]),
    ))
    .unwrap();
    let mut net = TinySegNet::new(4, seeding::mix(seed, &[0x131]));
    let cfg = TrainConfig {
        epochs: TOY_EPOCHS,
        step_size: 3e-3,
        batch_size: 16,
        seed: seeding::mix(seed, &[0x130]),
        hflip: false,
    };
    fit(&mut net, &train, 255, &cfg).expect("clean train");
    let taxonomy = ClassTaxonomy::synthetic_default();
    let value = clean_miou(&net, &test, &taxonomy);
    cache.lock().unwrap().insert(seed, value);
    value
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

const SEEDS: [u64; 3] = [7, 19, 41];

// ---------------------------------------------------------------------------
// 1. Oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn c01_oracle_equivalence() {
    let mut rng = seeding::rng(101, &[1]);
    let trials = 10_000;

    // ASR: exact count equality against a pixel loop.
    for _ in 0..trials {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let mut pred = LabelMap::filled(h, w, 0);
        pred.0.mapv_inplace(|_| rng.gen_range(0..4));
        let mask = Array2::from_shape_fn((h, w), |_| rng.gen_bool(0.5));
        let target = rng.gen_range(0..4u8);
        let (mut victim, mut success) = (0u64, 0u64);
        for ((r, c), &m) in mask.indexed_iter() {
            if m {
                victim += 1;
                if pred.get(r, c) == target {
                    success += 1;
                }
            }
        }
        match asr_counts(&pred, target, &mask) {
            Ok(counts) => {
                assert_eq!(counts.victim_pixels, victim);
                assert_eq!(counts.success_pixels, success);
            }
            Err(_) => assert_eq!(victim, 0),
        }
    }

    // mIoU: exact equality against pooled per-class set counts.
    for _ in 0..trials {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let k = 4usize;
        let mut gt = LabelMap::filled(h, w, 0);
        gt.0.mapv_inplace(|_| {
            let v = rng.gen_range(0..5u8);
            if v == 4 {
                255
            } else {
                v
            }
        });
        let mut pred = LabelMap::filled(h, w, 0);
        pred.0.mapv_inplace(|_| rng.gen_range(0..4));
        let (mut inter, mut pc, mut gc) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
        let mut any = false;
        for ((r, c), &g) in gt.0.indexed_iter() {
            if g == 255 {
                continue;
            }
            any = true;
            let p = pred.get(r, c) as usize;
            gc[g as usize] += 1;
            pc[p] += 1;
            if p == g as usize {
                inter[p] += 1;
            }
        }
        let got = miou(&pred, &gt, k, 255, None);
        if !any {
            assert!(got.is_err());
            continue;
        }
        let (m, _) = got.unwrap();
        let (mut sum, mut n) = (0.0, 0usize);
        for c in 0..k {
            let union = gc[c] + pc[c] - inter[c];
            if union > 0 {
                sum += inter[c] as f64 / union as f64;
                n += 1;
            }
        }
        let oracle = if n == 0 { 0.0 } else { sum / n as f64 };
        assert!((m - oracle).abs() == 0.0, "mIoU {m} vs oracle {oracle}");
    }

    // Class centers: per-pixel loop within 1e-5.
    for _ in 0..trials {
        let (h, w, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16), 3usize);
        let features = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0f32..2.0));
        let mut label = LabelMap::filled(h, w, 0);
        label.0.mapv_inplace(|_| rng.gen_range(0..4));
        let cc = class_centers(&features, &label, 4, 255).unwrap();
        for cls in 0..4u8 {
            let mut sums = vec![0.0f64; c];
            let mut n = 0u64;
            for ((r, cc2), &v) in label.0.indexed_iter() {
                if v == cls {
                    n += 1;
                    for ch in 0..c {
                        sums[ch] += features[(ch, r, cc2)] as f64;
                    }
                }
            }
            assert_eq!(cc.counts[cls as usize], n);
            if n > 0 {
                for ch in 0..c {
                    assert!((cc.centers[(cls as usize, ch)] - sums[ch] / n as f64).abs() < 1e-5);
                }
            }
        }
    }

    // AUC: pairwise comparison oracle within 1e-9.
    for _ in 0..trials {
        let np = rng.gen_range(1..=20);
        let nn = rng.gen_range(1..=20);
        let pos: Vec<f64> = (0..np).map(|_| rng.gen_range(0..8) as f64).collect();
        let neg: Vec<f64> = (0..nn).map(|_| rng.gen_range(0..8) as f64).collect();
        let fast = auc(&pos, &neg).unwrap();
        let mut acc = 0.0f64;
        for &p in &pos {
            for &n in &neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        assert!((fast - acc / (np * nn) as f64).abs() < 1e-9);
    }

    println!("ACCEPTANCE 1 (oracle equivalence): PASS — ASR/mIoU/centers/AUC match brute force on {trials} instances each");
}

// ---------------------------------------------------------------------------
// 2. Relaxation correctness
// ---------------------------------------------------------------------------

#[test]
fn c02_relaxation_correctness() {
    let mut rng = seeding::rng(102, &[1]);
    // eta sums to 1 within 1e-6 on 10k random draws.
    for _ in 0..10_000 {
        let n = rng.gen_range(2..=8);
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..3.0)).collect();
        let s: f64 = raw.iter().sum();
        let xi: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let noise: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                -(-u.ln()).ln()
            })
            .collect();
        let tau = rng.gen_range(0.01..5.0);
        let eta = gumbel_softmax(&xi, &noise, tau).unwrap();
        assert!((eta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    // Gradient of the relaxed size/intensity path vs central differences,
    // 100 configurations, 1e-3 relative.
    let grids = [
        CandidateGrid::for_vector(CoarseVector::O2B),
        CandidateGrid::for_vector(CoarseVector::B2B),
    ];
    for trial in 0..100 {
        let grid = &grids[trial % 2];
        let values: &[f64] = if trial % 4 < 2 {
            &grid.sizes
        } else {
            &grid.intensities
        };
        let n = values.len();
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..2.0)).collect();
        let s: f64 = raw.iter().sum();
        let xi: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tau = rng.gen_range(0.2..2.0);
        let analytic = d_lambda_d_xi(&xi, &noise, tau, values, 1.0).unwrap();
        let lambda = |xi: &[f64]| -> f64 {
            let eta = gumbel_softmax(xi, &noise, tau).unwrap();
            eta.iter().zip(values).map(|(&e, &v)| e * v).sum()
        };
        let h = 1e-5;
        for i in 0..n {
            let mut hi = xi.clone();
            hi[i] += h;
            let mut lo = xi.clone();
            lo[i] -= h;
            let fd = (lambda(&hi) - lambda(&lo)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-3,
                "trial {trial} i={i}: analytic {} fd {fd}",
                analytic[i]
            );
        }
    }
    println!("ACCEPTANCE 2 (relaxation correctness): PASS — eta sums and size/intensity gradients check out");
}

// ---------------------------------------------------------------------------
// 3. Discretization consistency
// ---------------------------------------------------------------------------

#[test]
fn c03_discretization_consistency() {
    // For one-hot xi, rasterize_relaxed(tau=0.01, zero noise) matches
    // rasterize(discretize(..)) within L-inf 1e-3, across the candidate grid
    // varied one attribute at a time.
    let mut object_mask = Array2::from_elem((64, 64), false);
    for r in 14..50 {
        for c in 14..50 {
            object_mask[(r, c)] = true;
        }
    }
    let mut region_mask = Array2::from_elem((64, 64), false);
    for r in 0..64 {
        for c in 0..32 {
            region_mask[(r, c)] = true;
        }
    }
    let mut checked = 0usize;
    for vector in [
        CoarseVector::O2O,
        CoarseVector::O2B,
        CoarseVector::B2O,
        CoarseVector::B2B,
    ] {
        let grid = CandidateGrid::for_vector(vector);
        let base = TriggerSpec {
            shape: TriggerShape::Circle,
            size: grid.sizes[2.min(grid.sizes.len() - 1)],
            position: grid.positions[0],
            quantity: grid.quantities[0],
            intensity: 0.4,
            color: [0.0; 3],
        };
        let mut variants: Vec<TriggerSpec> = Vec::new();
        for &shape in &grid.shapes {
            variants.push(TriggerSpec { shape, ..base.clone() });
        }
        for &size in &grid.sizes {
            variants.push(TriggerSpec { size, ..base.clone() });
        }
        for &position in &grid.positions {
            variants.push(TriggerSpec { position, ..base.clone() });
        }
        for &quantity in &grid.quantities {
            variants.push(TriggerSpec { quantity, ..base.clone() });
        }
        for &intensity in &grid.intensities {
            variants.push(TriggerSpec { intensity, ..base.clone() });
        }
        let anchor = if vector.object_anchored() {
            badseg::trigger::AnchorContext::Object {
                bbox: (14, 14, 49, 49),
                mask: &object_mask,
            }
        } else {
            badseg::trigger::AnchorContext::Region { mask: &region_mask }
        };
        for spec in variants {
            let relaxed = RelaxedTriggerSpec::one_hot(grid.clone(), &spec, 0.01).unwrap();
            let noise = GumbelNoise::zeros(&relaxed.grid);
            assert_eq!(discretize(&relaxed), spec);
            let (pa, _) = rasterize_relaxed(&relaxed, &noise, (64, 64), &anchor, 77).unwrap();
            let pb = rasterize(&spec, (64, 64), &anchor, 77).unwrap();
            let mut linf = 0.0f32;
            for (a, b) in pa.stencil.iter().zip(pb.stencil.iter()) {
                linf = linf.max((a - b).abs());
            }
            assert!(
                linf < 1e-3,
                "{vector} {spec:?}: L-inf {linf}"
            );
            checked += 1;
        }
    }
    println!("ACCEPTANCE 3 (discretization consistency): PASS — {checked} one-hot grid points match within 1e-3");
}

// ---------------------------------------------------------------------------
// 4. End-to-end toy backdoor, four coarse vectors
// ---------------------------------------------------------------------------

fn assert_coarse_vector(vector: CoarseVector) {
    let attack = toy_attack(vector);
    let trigger = toy_trigger(vector);
    let mut asrs = Vec::new();
    let mut cba_gaps = Vec::new();
    for &seed in &SEEDS {
        let (asr, _pba, cba) = toy_metrics(&attack, &trigger, 0.2, seed);
        let baseline = clean_baseline(seed);
        asrs.push(asr);
        cba_gaps.push(cba - (baseline - 0.05));
    }
    let med_asr = median(asrs.clone());
    let med_gap = median(cba_gaps.clone());
    assert!(
        med_asr >= 0.80,
        "{vector}: median ASR {med_asr:.4} < 0.80 (seeds {asrs:?})"
    );
    assert!(
        med_gap >= 0.0,
        "{vector}: median CBA below clean baseline - 0.05 (gaps {cba_gaps:?})"
    );
    println!(
        "ACCEPTANCE 4 ({vector} toy backdoor): PASS — median ASR {med_asr:.4}, CBA within 0.05 of clean baseline"
    );
}

#[test]
fn c04_toy_backdoor_o2o() {
    assert_coarse_vector(CoarseVector::O2O);
}

#[test]
fn c04_toy_backdoor_o2b() {
    assert_coarse_vector(CoarseVector::O2B);
}

#[test]
fn c04_toy_backdoor_b2o() {
    assert_coarse_vector(CoarseVector::B2O);
}

#[test]
fn c04_toy_backdoor_b2b() {
    assert_coarse_vector(CoarseVector::B2B);
}

// ---------------------------------------------------------------------------
// 5. Fine-grained scoping
// ---------------------------------------------------------------------------

/// Local IoU of the victim class inside an instance's (slightly expanded)
/// bounding box.
fn instance_iou(
    pred: &LabelMap,
    gt: &LabelMap,
    victim: u8,
    bbox: (usize, usize, usize, usize),
) -> (u64, u64) {
    let (h, w) = (gt.height(), gt.width());
    let r0 = bbox.0.saturating_sub(2);
    let c0 = bbox.1.saturating_sub(2);
    let r1 = (bbox.2 + 2).min(h - 1);
    let c1 = (bbox.3 + 2).min(w - 1);
    let (mut inter, mut union) = (0u64, 0u64);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let p = pred.get(r, c) == victim;
            let g = gt.get(r, c) == victim;
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    (inter, union)
}

#[test]
fn c05_fine_grained_instance_scoping() {
    let attack = AttackSpec::instance(CoarseVector::O2B, 2, 0, InstanceLimit::Count(1));
    let trigger = toy_trigger(CoarseVector::O2B);
    let taxonomy = ClassTaxonomy::synthetic_default();
    let mut asrs = Vec::new();
    let mut ious = Vec::new();
    for &seed in &SEEDS {
        let run = execute_toy_run(&attack, &trigger, 0.2, seed);
        let poisoned = poison_eval_set(&run.test, &run.eval_ctx).unwrap();
        let (mut victim_px, mut success_px) = (0u64, 0u64);
        let (mut inter, mut union) = (0u64, 0u64);
        let mut multi = 0usize;
        for (orig_idx, p) in &poisoned {
            let gt = &run.test[*orig_idx];
            let instances = labelops::extract_instances(&gt.label, 2, &taxonomy).unwrap();
            if instances.len() < 2 {
                continue;
            }
            multi += 1;
            let (pred, _) = predict(&run.net, &p.sample.image);
            // Triggered-instance ASR over the scoped victim mask.
            if let Ok(c) = asr_counts(&pred, 0, &p.victim_mask) {
                victim_px += c.victim_pixels;
                success_px += c.success_pixels;
            }
            // Untriggered instance (second largest) must keep its clean
            // segmentation.
            let (i, u) = instance_iou(&pred, &gt.label, 2, instances[1].bbox);
            inter += i;
            union += u;
        }
        assert!(multi >= 10, "need multi-instance samples, got {multi}");
        asrs.push(success_px as f64 / victim_px as f64);
        ious.push(inter as f64 / union as f64);
    }
    let med_asr = median(asrs.clone());
    let med_iou = median(ious.clone());
    assert!(
        med_asr >= 0.75,
        "INS-O2B triggered-instance ASR {med_asr:.4} < 0.75 ({asrs:?})"
    );
    assert!(
        med_iou >= 0.70,
        "INS-O2B untriggered-instance IoU {med_iou:.4} < 0.70 ({ious:?})"
    );
    println!(
        "ACCEPTANCE 5a (INS scoping): PASS — triggered ASR {med_asr:.4}, untriggered IoU {med_iou:.4}"
    );
}

#[test]
fn c05_fine_grained_conditional() {
    let predicate = ConditionPredicate::red();
    let attack = AttackSpec::conditional(CoarseVector::O2B, 2, 0, predicate.clone());
    let trigger = toy_trigger(CoarseVector::O2B);
    let taxonomy = ClassTaxonomy::synthetic_default();
    let mut sat_asrs = Vec::new();
    let mut vio_asrs = Vec::new();
    for &seed in &SEEDS {
        let run = execute_toy_run(&attack, &trigger, 0.2, seed);
        let poisoned = poison_eval_set(&run.test, &run.eval_ctx).unwrap();
        let (mut sat_v, mut sat_s, mut vio_v, mut vio_s) = (0u64, 0u64, 0u64, 0u64);
        for (orig_idx, p) in &poisoned {
            let gt = &run.test[*orig_idx];
            let (pred, _) = predict(&run.net, &p.sample.image);
            let instances = labelops::extract_instances(&gt.label, 2, &taxonomy).unwrap();
            for inst in &instances {
                // Every instance carries a trigger under the conditional
                // poisoning rule; split by the predicate.
                let satisfied =
                    labelops::eval_condition(&gt.image, &inst.mask, &predicate).unwrap();
                for ((r, c), &m) in inst.mask.indexed_iter() {
                    if !m {
                        continue;
                    }
                    let hit = pred.get(r, c) == 0;
                    if satisfied {
                        sat_v += 1;
                        sat_s += hit as u64;
                    } else {
                        vio_v += 1;
                        vio_s += hit as u64;
                    }
                }
            }
        }
        assert!(sat_v > 0 && vio_v > 0, "need both red and non-red instances");
        sat_asrs.push(sat_s as f64 / sat_v as f64);
        vio_asrs.push(vio_s as f64 / vio_v as f64);
    }
    let med_sat = median(sat_asrs.clone());
    let med_vio = median(vio_asrs.clone());
    assert!(
        med_sat >= 0.75,
        "CON-O2B satisfying-instance ASR {med_sat:.4} < 0.75 ({sat_asrs:?})"
    );
    assert!(
        med_vio <= 0.15,
        "CON-O2B violating-instance ASR {med_vio:.4} > 0.15 ({vio_asrs:?})"
    );
    println!(
        "ACCEPTANCE 5b (CON scoping): PASS — satisfying ASR {med_sat:.4}, violating ASR {med_vio:.4}"
    );
}

// ---------------------------------------------------------------------------
// 6. Poisoning-rate monotonicity
// ---------------------------------------------------------------------------

#[test]
fn c06_poisoning_rate_monotonicity() {
    let attack = toy_attack(CoarseVector::O2B);
    let trigger = toy_trigger(CoarseVector::O2B);
    let rates = [0.05, 0.1, 0.2];
    let mut medians = Vec::new();
    for &rate in &rates {
        let asrs: Vec<f64> = SEEDS
            .iter()
            .map(|&s| toy_metrics(&attack, &trigger, rate, s).0)
            .collect();
        medians.push(median(asrs));
    }
    for i in 1..medians.len() {
        assert!(
            medians[i] >= medians[i - 1] - 0.05,
            "ASR not monotone within slack: {medians:?} at rates {rates:?}"
        );
    }
    println!(
        "ACCEPTANCE 6 (poisoning-rate monotonicity): PASS — median ASR {medians:?} at rates {rates:?}"
    );
}

// ---------------------------------------------------------------------------
// 7. Pair-ranking sanity
// ---------------------------------------------------------------------------

#[test]
fn c07_pair_ranking_sanity() {
    // Rank-correlation machinery vs brute-force oracles, exact.
    let mut rng = seeding::rng(107, &[1]);
    for _ in 0..200 {
        let n = rng.gen_range(3..15);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        if let Some(tau) = kendall_tau(&xs, &ys) {
            let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
            for i in 0..n {
                for j in (i + 1)..n {
                    let dx = xs[i] - xs[j];
                    let dy = ys[i] - ys[j];
                    if dx == 0.0 && dy == 0.0 {
                        continue;
                    } else if dx == 0.0 {
                        tx += 1;
                    } else if dy == 0.0 {
                        ty += 1;
                    } else if dx * dy > 0.0 {
                        conc += 1;
                    } else {
                        disc += 1;
                    }
                }
            }
            let oracle = (conc - disc) as f64
                / (((conc + disc + tx) as f64) * ((conc + disc + ty) as f64)).sqrt();
            assert!((tau - oracle).abs() < 1e-12);
        }
        if let Some(rho) = spearman(&xs, &ys) {
            let ranks = |v: &[f64]| -> Vec<f64> {
                (0..v.len())
                    .map(|i| {
                        let less = v.iter().filter(|&&x| x < v[i]).count();
                        let equal = v.iter().filter(|&&x| x == v[i]).count();
                        less as f64 + (equal as f64 + 1.0) / 2.0
                    })
                    .collect()
            };
            let rx = ranks(&xs);
            let ry = ranks(&ys);
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (mx, my) = (mean(&rx), mean(&ry));
            let mut sxy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            for i in 0..n {
                sxy += (rx[i] - mx) * (ry[i] - my);
                sxx += (rx[i] - mx) * (rx[i] - mx);
                syy += (ry[i] - my) * (ry[i] - my);
            }
            if sxx > 0.0 && syy > 0.0 {
                assert!((rho - sxy / (sxx * syy).sqrt()).abs() < 1e-12);
            }
        }
    }

    // Directional finding: ASR correlates with (negated) class-pair center
    // distance across >= 4 victim-target pairs at a weakened attack setting.
    let pairs: Vec<AttackSpec> = vec![
        AttackSpec::coarse(CoarseVector::B2B, 0, 1),
        AttackSpec::coarse(CoarseVector::B2B, 1, 0),
        AttackSpec::coarse(CoarseVector::O2B, 2, 0),
        AttackSpec::coarse(CoarseVector::O2B, 2, 1),
        AttackSpec::coarse(CoarseVector::O2B, 3, 0),
        AttackSpec::coarse(CoarseVector::O2O, 2, 3),
    ];
    let seed = 7u64;
    // Surrogate: clean training on the attacker's side of the split.
    let config = toy_config(&pairs[2], &toy_trigger(CoarseVector::O2B), 0.1, seed);
    let prepared = badseg::experiment::prepare(&config).unwrap();
    let surrogate = badseg::experiment::run::train_surrogate(&prepared, &config, 6).unwrap();
    let taxonomy = ClassTaxonomy::synthetic_default();
    let mut per_image = Vec::new();
    for s in prepared.split.surrogate() {
        let features = surrogate.forward(&s.image).features;
        per_image.push(class_centers(&features, &s.label, 4, 255).unwrap());
    }
    let global = badseg::analysis::global_centers(&per_image).unwrap();
    let ranking = badseg::analysis::rank_pairs(&global, &taxonomy).unwrap();
    let distance_of = |a: u8, b: u8| -> f64 {
        ranking.distance_matrix[(a as usize, b as usize)]
    };
    let mut neg_distances = Vec::new();
    let mut asrs = Vec::new();
    for attack in &pairs {
        // Weakened poisoning separates pair difficulty: low rate, soft
        // trigger, shorter training.
        let mut trig = toy_trigger(attack.coarse);
        trig.intensity = 0.5;
        let mut asr_seeds = Vec::new();
        for &s in &SEEDS[..2] {
            let cfgd = WeakRun {
                attack: attack.clone(),
                trigger: trig.clone(),
                seed: s,
            };
            asr_seeds.push(cfgd.asr());
        }
        neg_distances.push(-distance_of(attack.victim_class, attack.target_class));
        asrs.push(asr_seeds.iter().sum::<f64>() / asr_seeds.len() as f64);
    }
    let rho = spearman(&neg_distances, &asrs).expect("correlation defined");
    assert!(
        rho > 0.0,
        "Spearman(-distance, ASR) = {rho:.3} not positive; distances {neg_distances:?} asrs {asrs:?}"
    );
    println!(
        "ACCEPTANCE 7 (pair-ranking sanity): PASS — Spearman(-distance, ASR) = {rho:.3} over {} pairs",
        pairs.len()
    );
}

/// A weakened toy run for pair-difficulty separation.
struct WeakRun {
    attack: AttackSpec,
    trigger: TriggerSpec,
    seed: u64,
}

impl WeakRun {
    fn asr(&self) -> f64 {
        static CACHE: OnceLock<Mutex<HashMap<(String, u64), f64>>> = OnceLock::new();
        let key = (self.attack.vector_name() + &format!("-{}-{}", self.attack.victim_class, self.attack.target_class), self.seed);
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(v) = cache.lock().unwrap().get(&key) {
            return *v;
        }
        let config = toy_config(&self.attack, &self.trigger, 0.08, self.seed);
        let prepared = badseg::experiment::prepare(&config).unwrap();
        let ctx = AttackContext {
            attack: prepared.attack.clone(),
            trigger: self.trigger.clone(),
            taxonomy: prepared.taxonomy.clone(),
            seed: seeding::mix(self.seed, &[0x120]),
        };
        let poisoned = assemble_poisoned(&prepared.split, &ctx).unwrap();
        let mut net = TinySegNet::new(4, seeding::mix(self.seed, &[0x131]));
        fit(
            &mut net,
            &poisoned.samples,
            255,
            &TrainConfig {
                epochs: 8,
                step_size: 3e-3,
                batch_size: 16,
                seed: seeding::mix(self.seed, &[0x130]),
                hflip: false,
            },
        )
        .unwrap();
        let eval_ctx = AttackContext {
            seed: seeding::mix(self.seed, &[0x140]),
            ..ctx
        };
        let report = evaluate_attack(&net, &prepared.test, &eval_ctx, 0).unwrap();
        cache.lock().unwrap().insert(key, report.asr);
        report.asr
    }
}

// ---------------------------------------------------------------------------
// 8. Defense harness integrity
// ---------------------------------------------------------------------------

struct UniformStub {
    k: usize,
}

impl SegmentationModel for UniformStub {
    fn num_classes(&self) -> usize {
        self.k
    }
    fn forward(&self, image: &Array3<f32>) -> ModelOutput {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        ModelOutput {
            confidence: Array3::from_elem((self.k, h, w), 1.0 / self.k as f32),
            features: Array3::zeros((2, h, w)),
        }
    }
    fn loss_and_input_grad(
        &self,
        _: &Array3<f32>,
        _: &LabelMap,
        _: u8,
    ) -> Result<(f64, Array3<f32>), ModelError> {
        unimplemented!()
    }
}

fn toy_backdoor_bundle() -> Arc<ToyRun> {
    static CACHE: OnceLock<Arc<ToyRun>> = OnceLock::new();
    CACHE
        .get_or_init(|| {
            Arc::new(execute_toy_run(
                &toy_attack(CoarseVector::O2B),
                &toy_trigger(CoarseVector::O2B),
                0.2,
                7,
            ))
        })
        .clone()
}

#[test]
fn c08_defense_harness_exact_rules() {
    // STRIP entropy under a uniform-confidence stub: exactly ln K.
    for k in [2usize, 4, 6] {
        let stub = UniformStub { k };
        let out = stub.forward(&Array3::zeros((3, 16, 16)));
        let e = confidence_entropy(&out.confidence, Aggregation::Mean);
        assert!(
            (e - (k as f64).ln()).abs() < 1e-12,
            "k={k}: entropy {e} != ln k"
        );
    }
    // TeCo breaking-severity extraction and n-std thresholding on
    // hand-constructed vectors.
    assert_eq!(breaking_severity(&[0.9, 0.6, 0.49, 0.2, 0.1], 0.5), 3);
    assert_eq!(breaking_severity(&[0.9; 5], 0.5), 6);
    assert_eq!(breaking_severity(&[0.2, 0.9, 0.9, 0.9, 0.9], 0.5), 1);
    let thr = nstd_threshold(&[1.0, 2.0, 3.0], 2.0);
    assert!((thr - (2.0 + 2.0 * (2.0f64 / 3.0).sqrt())).abs() < 1e-12);
    // Pruning zeroes exactly the bottom-fraction channels.
    assert_eq!(least_active_channels(&[5, 1, 3], 1), vec![1]);
    assert_eq!(least_active_channels(&[7, 7, 2, 9], 2), vec![2, 0]);
    // ABL isolates exactly the bottom-quantile-loss samples.
    assert_eq!(isolate_lowest(&[0.1, 0.9, 0.5, 0.2], 0.25), vec![0]);
    assert_eq!(isolate_lowest(&[0.4, 0.3, 0.2, 0.1], 0.5), vec![2, 3]);
    println!("ACCEPTANCE 8a (defense exact rules): PASS — STRIP ln K, TeCo severities, prune and ABL quantiles exact");
}

#[test]
fn c08_defenses_run_end_to_end() {
    let run = toy_backdoor_bundle();
    let n_eval = 10usize;
    let half = run.test.len() / 2;
    let clean_eval: Vec<Sample> = run.test[..n_eval].to_vec();
    let poisoned_eval: Vec<Sample> = poison_eval_set(&run.test[half..], &run.eval_ctx)
        .unwrap()
        .into_iter()
        .take(n_eval)
        .map(|(_, p)| p.sample)
        .collect();
    assert_eq!(clean_eval.len(), poisoned_eval.len());

    // Fine-tuning.
    let mut model = run.net.clone();
    let ft = finetune_defense(
        &mut model,
        &run.clean_pool,
        &run.test,
        &run.eval_ctx,
        &FinetuneConfig {
            clean_fraction: 0.10,
            epochs: 3,
            base_step_size: 3e-3,
            batch_size: 16,
            seed: 1,
        },
    )
    .unwrap();
    assert!(ft.asr_before > 0.5 && (0.0..=1.0).contains(&ft.asr_after));

    // Pruning.
    let mut model = run.net.clone();
    let probes: Vec<Sample> = run.clean_pool.iter().take(24).cloned().collect();
    let (pr, channels) = prune_defense(
        &mut model,
        &probes,
        &run.test,
        &run.eval_ctx,
        &PruneConfig { fraction: 0.05 },
    )
    .unwrap();
    assert_eq!(channels.len(), (0.05f64 * 24.0).floor() as usize);
    assert!((0.0..=1.0).contains(&pr.asr_after));

    // ABL.
    let abl = abl_defense(
        &run.poisoned,
        |tag| TinySegNet::new(4, seeding::mix(1234, &[tag])),
        &run.test,
        &run.eval_ctx,
        &AblConfig {
            isolation_rate: 0.1,
            brief_epochs: 2,
            retrain: TrainConfig {
                epochs: 6,
                ..run.train_cfg.clone()
            },
        },
    )
    .unwrap();
    assert_eq!(abl.loss_rows.len(), run.poisoned.samples.len());
    assert_eq!(
        abl.isolated_ids.len(),
        (run.poisoned.samples.len() as f64 * 0.1).floor() as usize
    );

    // STRIP.
    let overlays: Vec<Sample> = run.clean_pool.iter().take(12).cloned().collect();
    let strip = strip_detect(
        &run.net,
        &clean_eval,
        &poisoned_eval,
        &overlays,
        &StripConfig::default(),
    )
    .unwrap();
    assert_eq!(strip.scores.len(), 2 * n_eval);
    assert!((0.0..=1.0).contains(&strip.auc));

    // TeCo.
    let teco = teco_detect(
        &run.net,
        &clean_eval[..6],
        &poisoned_eval[..6],
        4,
        255,
        &TecoConfig::default(),
    )
    .unwrap();
    assert_eq!(teco.scores.len(), 12);
    assert!((0.0..=1.0).contains(&teco.auc));

    // Beatrix, both grouping modes.
    for grouping in [Grouping::MainClass, Grouping::SelectedClass(2)] {
        let reference: Vec<Sample> = run.clean_pool.iter().take(30).cloned().collect();
        let beatrix = beatrix_detect(
            &run.net,
            &reference,
            &clean_eval,
            &poisoned_eval,
            4,
            255,
            &BeatrixConfig {
                grouping,
                gram_orders: vec![1, 2, 3, 4],
                n_mad: 3.0,
            },
        )
        .unwrap();
        assert!(!beatrix.scores.is_empty());
        assert!((0.0..=1.0).contains(&beatrix.auc));
    }
    println!("ACCEPTANCE 8b (defense end-to-end): PASS — all six defenses emitted well-formed reports on the toy backdoor");
}

// ---------------------------------------------------------------------------
// 9. Stealth metrics
// ---------------------------------------------------------------------------

#[test]
fn c09_stealth_metrics() {
    // PSNR closed form: +16 shift on the 8-bit range -> 24.05 dB +- 0.01.
    let a = Array3::from_elem((3, 32, 32), 90.0f32);
    let b = a.mapv(|v| v + 16.0);
    let p = psnr(&a, &b, 255.0).unwrap();
    assert!((p - 24.05).abs() <= 0.01, "psnr {p}");
    // SSIM(a, a) = 1.0 exactly.
    let mut rng = seeding::rng(109, &[1]);
    let img = Array3::from_shape_fn((3, 24, 24), |_| rng.gen_range(0.0f32..255.0));
    assert_eq!(ssim(&img, &img, 255.0).unwrap(), 1.0);
    // Perceptual: symmetric, zero on identical inputs.
    let ex = SeededConvExtractor::new(5);
    let other = Array3::from_shape_fn((3, 24, 24), |_| rng.gen_range(0.0f32..255.0));
    assert_eq!(perceptual_distance(&ex, &img, &img), 0.0);
    let ab = perceptual_distance(&ex, &img, &other);
    let ba = perceptual_distance(&ex, &other, &img);
    assert!((ab - ba).abs() < 1e-12 && ab > 0.0);
    println!("ACCEPTANCE 9 (stealth metrics): PASS — PSNR closed form, SSIM identity, perceptual symmetry");
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

#[test]
fn c10_run_determinism() {
    let taxonomy = ClassTaxonomy::synthetic_default();
    let mut config = toy_config(
        &toy_attack(CoarseVector::O2B),
        &toy_trigger(CoarseVector::O2B),
        0.2,
        13,
    );
    // Small but complete: include one mitigation and one detection defense.
    config.dataset = DatasetSection::Synthetic {
        n_train: 60,
        n_test: 20,
        n_aux: 20,
        height: 64,
        width: 64,
        num_classes: 4,
        poison_rate: 0.2,
        aux_fraction: 0.3,
    };
    config.training.epochs = 4;
    config.defense = vec![
        badseg::experiment::config::DefenseSection::Prune {
            fraction: 0.05,
            probe_samples: 8,
        },
        badseg::experiment::config::DefenseSection::Strip {
            n_perturbations: 4,
            target_fpr: 0.05,
            eval_samples: 6,
        },
    ];
    let _ = &taxonomy;
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    badseg::experiment::run(&config, dir_a.path()).unwrap();
    badseg::experiment::run(&config, dir_b.path()).unwrap();
    // Every report file must be byte-identical (the run record carries
    // timings and is exempt).
    let reports = [
        "eval_report.json",
        "poison_manifest.json",
        "train_stats.json",
        "trigger.toml",
        "taxonomy.toml",
        "mitigation_prune.json",
        "detection_strip.json",
        "scores_strip.csv",
        "checkpoint.ckpt",
    ];
    for file in reports {
        let a = std::fs::read(dir_a.path().join(file)).unwrap_or_else(|_| panic!("missing {file}"));
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "report file {file} differs between identical runs");
    }
    println!("ACCEPTANCE 10 (determinism): PASS — repeated runs reproduce every report byte-identically");
}

// ---------------------------------------------------------------------------
// Temperature schedule sanity used by the search criteria
// ---------------------------------------------------------------------------

#[test]
fn anneal_schedule_is_exponential() {
    assert_eq!(anneal(1.0, 0.1, 0, 300), 1.0);
    assert!((anneal(1.0, 0.1, 300, 300) - 0.1).abs() < 1e-12);
    assert!((anneal(1.0, 0.1, 150, 300) - 0.1f64.sqrt()).abs() < 1e-9);
}
