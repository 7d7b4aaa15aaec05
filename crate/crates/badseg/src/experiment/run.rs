//! Run orchestration: prepare -> optimize -> poison -> train -> evaluate ->
//! defend, with every artifact persisted under the run directory.
//!
//! Stage timings live only in the run record; all report files are pure
//! functions of (config, seed) and reproduce byte-identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, ClassTaxonomy, DatasetSplit, Sample, SyntheticConfig};
use crate::defense::{
    abl::{abl_defense, AblConfig},
    beatrix::{beatrix_detect, BeatrixConfig, Grouping},
    finetune::{finetune_defense, FinetuneConfig},
    prune::{prune_defense, PruneConfig},
    strip::{strip_detect, Aggregation, StripConfig},
    teco::{teco_detect, TecoConfig},
    DetectionReport, MitigationReport,
};
use crate::experiment::config::{
    DatasetSection, DefenseSection, ExperimentConfig, TriggerSection,
};
use crate::labelops::AttackSpec;
use crate::model::{checkpoint, fit, TinySegNet, TrainConfig};
use crate::optimize::{search, SearchConfig};
use crate::pipeline::{assemble_poisoned, evaluate_attack, AttackContext, PoisonedDataset};
use crate::seeding::{self};
use crate::trigger::TriggerSpec;

/// Stage tags for seed derivation, disjoint from the low-level streams.
mod stage_seed {
    pub const DATA_TRAIN: u64 = 0x100;
    pub const DATA_TEST: u64 = 0x101;
    pub const DATA_AUX: u64 = 0x102;
    pub const SURROGATE: u64 = 0x110;
    pub const SEARCH: u64 = 0x111;
    pub const POISON: u64 = 0x120;
    pub const TRAIN: u64 = 0x130;
    pub const MODEL: u64 = 0x131;
    pub const EVAL: u64 = 0x140;
    pub const DEFENSE: u64 = 0x150;
}

#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct RunError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

/// The persisted, self-describing record of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub toolkit_version: String,
    pub name: String,
    pub seed: u64,
    pub config_toml: String,
    pub stage_seconds: Vec<(String, f64)>,
    pub artifacts: BTreeMap<String, String>,
    #[serde(default)]
    pub error: Option<StageFailure>,
}

pub const RECORD_FILE: &str = "run_record.json";

impl RunRecord {
    fn new(config: &ExperimentConfig, name: &str) -> Self {
        Self {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            name: name.to_string(),
            seed: config.seed,
            config_toml: config.to_toml_string(),
            stage_seconds: Vec::new(),
            artifacts: BTreeMap::new(),
            error: None,
        }
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(
            dir.join(RECORD_FILE),
            serde_json::to_vec_pretty(self).expect("record serializes"),
        )
    }

    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(RECORD_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| RunError {
            stage: "report".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        serde_json::from_str(&text).map_err(|e| RunError {
            stage: "report".into(),
            message: format!("corrupt record: {e}"),
        })
    }
}

/// Materialized experiment inputs.
pub struct PreparedData {
    pub taxonomy: ClassTaxonomy,
    pub split: DatasetSplit,
    pub test: Vec<Sample>,
    pub attack: AttackSpec,
}

/// Build datasets and the split for a config (deterministic in the seed).
pub fn prepare(config: &ExperimentConfig) -> Result<PreparedData, String> {
    let taxonomy = config.taxonomy().map_err(|e| e.to_string())?;
    let (train, test, aux) = match &config.dataset {
        DatasetSection::Synthetic {
            n_train,
            n_test,
            n_aux,
            height,
            width,
            num_classes,
            ..
        } => {
            let make = |n: usize, tag: u64| {
                data::make_synthetic(&SyntheticConfig::new(
                    n,
                    *height,
                    *width,
                    *num_classes,
                    seeding::mix(config.seed, &[tag]),
                ))
            };
            (
                make(*n_train, stage_seed::DATA_TRAIN).map_err(|e| e.to_string())?,
                make(*n_test, stage_seed::DATA_TEST).map_err(|e| e.to_string())?,
                make(*n_aux, stage_seed::DATA_AUX).map_err(|e| e.to_string())?,
            )
        }
        DatasetSection::Directory { root, .. } => (
            data::load_dataset(&root.join("train"), &taxonomy).map_err(|e| e.to_string())?,
            data::load_dataset(&root.join("test"), &taxonomy).map_err(|e| e.to_string())?,
            data::load_dataset(&root.join("aux"), &taxonomy).unwrap_or_default(),
        ),
    };
    let (rate, aux_fraction) = match &config.dataset {
        DatasetSection::Synthetic {
            poison_rate,
            aux_fraction,
            ..
        } => (*poison_rate, *aux_fraction),
        DatasetSection::Directory {
            poison_rate,
            aux_fraction,
            ..
        } => (*poison_rate, *aux_fraction),
    };
    let split = data::split(train, &aux, rate, aux_fraction, config.seed)
        .map_err(|e| e.to_string())?;
    let attack = config.attack.resolve(&taxonomy).map_err(|e| e.to_string())?;
    attack.validate(&taxonomy).map_err(|e| e.to_string())?;
    Ok(PreparedData {
        taxonomy,
        split,
        test,
        attack,
    })
}

/// Train a surrogate on the attacker's surrogate set D_s = D_t ∪ D_aux.
pub fn train_surrogate(
    prepared: &PreparedData,
    config: &ExperimentConfig,
    epochs: usize,
) -> Result<TinySegNet, String> {
    let surrogate_set: Vec<Sample> = prepared.split.surrogate().into_iter().cloned().collect();
    if surrogate_set.is_empty() {
        return Err("surrogate set is empty (no triggered or auxiliary samples)".into());
    }
    let mut net = TinySegNet::new(
        prepared.taxonomy.num_classes(),
        seeding::mix(config.seed, &[stage_seed::SURROGATE]),
    );
    fit(
        &mut net,
        &surrogate_set,
        prepared.taxonomy.ignore_index,
        &TrainConfig {
            epochs,
            step_size: config.training.step_size,
            batch_size: config.training.batch_size,
            seed: seeding::mix(config.seed, &[stage_seed::SURROGATE, 1]),
            hflip: false,
        },
    )
    .map_err(|e| e.to_string())?;
    Ok(net)
}

struct StageTimer<'a> {
    record: &'a mut RunRecord,
    dir: &'a Path,
}

impl StageTimer<'_> {
    fn run<T>(
        &mut self,
        stage: &str,
        f: impl FnOnce(&mut RunRecord) -> Result<T, String>,
    ) -> Result<T, RunError> {
        let start = Instant::now();
        match f(self.record) {
            Ok(v) => {
                self.record
                    .stage_seconds
                    .push((stage.to_string(), start.elapsed().as_secs_f64()));
                Ok(v)
            }
            Err(message) => {
                self.record
                    .stage_seconds
                    .push((stage.to_string(), start.elapsed().as_secs_f64()));
                self.record.error = Some(StageFailure {
                    stage: stage.to_string(),
                    message: message.clone(),
                });
                // Persist the partial record before aborting.
                let _ = self.record.save(self.dir);
                Err(RunError {
                    stage: stage.to_string(),
                    message,
                })
            }
        }
    }
}

fn write_json<T: Serialize>(
    dir: &Path,
    record: &mut RunRecord,
    key: &str,
    file: &str,
    value: &T,
) -> Result<(), String> {
    std::fs::write(
        dir.join(file),
        serde_json::to_vec_pretty(value).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    record.artifacts.insert(key.to_string(), file.to_string());
    Ok(())
}

fn write_scores_csv(
    dir: &Path,
    record: &mut RunRecord,
    kind: &str,
    report: &DetectionReport,
) -> Result<(), String> {
    let mut csv = String::from("label,score\n");
    for (label, score) in report.score_table() {
        csv.push_str(&format!("{label},{score}\n"));
    }
    let file = format!("scores_{kind}.csv");
    std::fs::write(dir.join(&file), csv).map_err(|e| e.to_string())?;
    record
        .artifacts
        .insert(format!("scores_{kind}"), file);
    Ok(())
}

/// Execute a full run into `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord, RunError> {
    let name = config.name.clone().unwrap_or_else(|| "run".to_string());
    std::fs::create_dir_all(out_dir).map_err(|e| RunError {
        stage: "prepare".into(),
        message: e.to_string(),
    })?;
    let mut record = RunRecord::new(config, &name);
    let mut timer = StageTimer {
        record: &mut record,
        dir: out_dir,
    };

    // prepare
    let prepared = timer.run("prepare", |record| {
        let p = prepare(config)?;
        std::fs::write(out_dir.join("taxonomy.toml"), p.taxonomy.to_toml_string())
            .map_err(|e| e.to_string())?;
        record
            .artifacts
            .insert("taxonomy".into(), "taxonomy.toml".into());
        Ok(p)
    })?;

    // optimize (optional)
    let trigger: TriggerSpec = match &config.trigger {
        TriggerSection::Fixed { .. } => {
            let spec = config.trigger.fixed_spec().expect("fixed mode");
            timer.run("optimize", |record| {
                std::fs::write(
                    out_dir.join("trigger.toml"),
                    toml::to_string_pretty(&spec).map_err(|e| e.to_string())?,
                )
                .map_err(|e| e.to_string())?;
                record.artifacts.insert("trigger".into(), "trigger.toml".into());
                Ok(())
            })?;
            spec
        }
        TriggerSection::Optimize { search: scfg } => timer.run("optimize", |record| {
            let surrogate = train_surrogate(&prepared, config, scfg.surrogate_epochs)?;
            let surrogate_set = prepared.split.surrogate();
            let cfg = SearchConfig {
                steps: scfg.steps,
                tau_start: scfg.tau_start,
                tau_end: scfg.tau_end,
                step_size: scfg.step_size,
                seed: seeding::mix(config.seed, &[stage_seed::SEARCH]),
                batch_size: scfg.batch_size,
                init: None,
                color: scfg.color,
            };
            let (spec, state) = search(
                &surrogate,
                &surrogate_set,
                &prepared.attack,
                &prepared.taxonomy,
                &cfg,
            )
            .map_err(|e| e.to_string())?;
            let mut log = String::new();
            for line in &state.log {
                log.push_str(&serde_json::to_string(line).map_err(|e| e.to_string())?);
                log.push('\n');
            }
            std::fs::write(out_dir.join("search_log.jsonl"), log).map_err(|e| e.to_string())?;
            record
                .artifacts
                .insert("search_log".into(), "search_log.jsonl".into());
            std::fs::write(
                out_dir.join("trigger.toml"),
                toml::to_string_pretty(&spec).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            record.artifacts.insert("trigger".into(), "trigger.toml".into());
            Ok(spec)
        })?,
    };

    // poison
    let ctx = AttackContext {
        attack: prepared.attack.clone(),
        trigger: trigger.clone(),
        taxonomy: prepared.taxonomy.clone(),
        seed: seeding::mix(config.seed, &[stage_seed::POISON]),
    };
    let poisoned: PoisonedDataset = timer.run("poison", |record| {
        let p = assemble_poisoned(&prepared.split, &ctx).map_err(|e| e.to_string())?;
        let manifest = serde_json::json!({
            "attack": prepared.attack.vector_name(),
            "victim_class": prepared.attack.victim_class,
            "target_class": prepared.attack.target_class,
            "trigger": trigger,
            "poison_rate": config.dataset.poison_rate(),
            "poisoned_ids": p.poisoned_ids.iter().collect::<Vec<_>>(),
        });
        write_json(out_dir, record, "poison_manifest", "poison_manifest.json", &manifest)?;
        // Persist the triggered pairs for inspection and reporting.
        let poisoned_dir = out_dir.join("poisoned");
        let members: Vec<Sample> = p
            .samples
            .iter()
            .filter(|s| p.poisoned_ids.contains(&s.id))
            .cloned()
            .collect();
        data::save_dataset(&poisoned_dir, &members).map_err(|e| e.to_string())?;
        record
            .artifacts
            .insert("poisoned_dir".into(), "poisoned".into());
        Ok(p)
    })?;

    // train
    let net: TinySegNet = timer.run("train", |record| {
        let mut net = TinySegNet::new(
            prepared.taxonomy.num_classes(),
            seeding::mix(config.seed, &[stage_seed::MODEL]),
        );
        let train_cfg = TrainConfig {
            epochs: config.training.epochs,
            step_size: config.training.step_size,
            batch_size: config.training.batch_size,
            seed: seeding::mix(config.seed, &[stage_seed::TRAIN]),
            hflip: config.training.hflip,
        };
        let stats = fit(
            &mut net,
            &poisoned.samples,
            prepared.taxonomy.ignore_index,
            &train_cfg,
        )
        .map_err(|e| e.to_string())?;
        write_json(out_dir, record, "train_stats", "train_stats.json", &stats)?;
        checkpoint::save(
            &out_dir.join("checkpoint.ckpt"),
            &net,
            &prepared.taxonomy,
            &serde_json::to_string(&train_cfg).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        record
            .artifacts
            .insert("checkpoint".into(), "checkpoint.ckpt".into());
        Ok(net)
    })?;

    // evaluate
    let eval_ctx = AttackContext {
        seed: seeding::mix(config.seed, &[stage_seed::EVAL]),
        ..ctx.clone()
    };
    timer.run("evaluate", |record| {
        let report = evaluate_attack(
            &net,
            &prepared.test,
            &eval_ctx,
            config.evaluation.stealth_samples,
        )
        .map_err(|e| e.to_string())?;
        write_json(out_dir, record, "eval_report", "eval_report.json", &report)?;
        Ok(())
    })?;

    // defend
    if !config.defense.is_empty() {
        timer.run("defend", |record| {
            run_defenses(config, &prepared, &poisoned, &net, &eval_ctx, out_dir, record)
        })?;
    }

    record.save(out_dir).map_err(|e| RunError {
        stage: "record".into(),
        message: e.to_string(),
    })?;
    Ok(record)
}

/// Split the test set into disjoint clean/poisoned detection-evaluation
/// halves of equal size.
fn detection_sets(
    test: &[Sample],
    ctx: &AttackContext,
    want: usize,
) -> Result<(Vec<Sample>, Vec<Sample>), String> {
    let half = test.len() / 2;
    let clean_part = &test[..half];
    let poison_part = &test[half..];
    let poisoned = crate::pipeline::poison_eval_set(poison_part, ctx).map_err(|e| e.to_string())?;
    let n = want.min(half).min(poisoned.len());
    if n == 0 {
        return Err("not enough samples for detection evaluation".into());
    }
    let clean: Vec<Sample> = clean_part[..n].to_vec();
    let pois: Vec<Sample> = poisoned[..n].iter().map(|(_, p)| p.sample.clone()).collect();
    Ok((clean, pois))
}

#[allow(clippy::too_many_arguments)]
fn run_defenses(
    config: &ExperimentConfig,
    prepared: &PreparedData,
    poisoned: &PoisonedDataset,
    net: &TinySegNet,
    eval_ctx: &AttackContext,
    out_dir: &Path,
    record: &mut RunRecord,
) -> Result<(), String> {
    let clean_pool: Vec<Sample> = prepared
        .split
        .clean_idx()
        .iter()
        .map(|&i| prepared.split.target[i].clone())
        .collect();
    let k = prepared.taxonomy.num_classes();
    let ignore = prepared.taxonomy.ignore_index;
    for section in &config.defense {
        let kind = section.kind_name();
        match section {
            DefenseSection::Finetune {
                clean_fraction,
                epochs,
            } => {
                let mut model = net.clone();
                let report = finetune_defense(
                    &mut model,
                    &clean_pool,
                    &prepared.test,
                    eval_ctx,
                    &FinetuneConfig {
                        clean_fraction: *clean_fraction,
                        epochs: *epochs,
                        base_step_size: config.training.step_size,
                        batch_size: config.training.batch_size,
                        seed: seeding::mix(config.seed, &[stage_seed::DEFENSE, 1]),
                    },
                )
                .map_err(|e| e.to_string())?;
                write_mitigation(out_dir, record, kind, &report)?;
            }
            DefenseSection::Prune {
                fraction,
                probe_samples,
            } => {
                let mut model = net.clone();
                let probes: Vec<Sample> =
                    clean_pool.iter().take(*probe_samples).cloned().collect();
                let (report, _) = prune_defense(
                    &mut model,
                    &probes,
                    &prepared.test,
                    eval_ctx,
                    &PruneConfig {
                        fraction: *fraction,
                    },
                )
                .map_err(|e| e.to_string())?;
                write_mitigation(out_dir, record, kind, &report)?;
            }
            DefenseSection::Abl {
                isolation_rate,
                brief_epochs,
            } => {
                let seed_base = seeding::mix(config.seed, &[stage_seed::DEFENSE, 2]);
                let outcome = abl_defense(
                    poisoned,
                    |tag| TinySegNet::new(k, seeding::mix(seed_base, &[tag])),
                    &prepared.test,
                    eval_ctx,
                    &AblConfig {
                        isolation_rate: *isolation_rate,
                        brief_epochs: *brief_epochs,
                        retrain: TrainConfig {
                            epochs: config.training.epochs,
                            step_size: config.training.step_size,
                            batch_size: config.training.batch_size,
                            seed: seeding::mix(seed_base, &[99]),
                            hflip: false,
                        },
                    },
                )
                .map_err(|e| e.to_string())?;
                write_mitigation(out_dir, record, kind, &outcome.report)?;
                // Loss rows feed the density plots.
                let mut csv = String::from("label,score\n");
                for (_, is_poisoned, loss) in &outcome.loss_rows {
                    let label = if *is_poisoned { "poisoned" } else { "clean" };
                    csv.push_str(&format!("{label},{loss}\n"));
                }
                std::fs::write(out_dir.join("scores_abl.csv"), csv).map_err(|e| e.to_string())?;
                record
                    .artifacts
                    .insert("scores_abl".into(), "scores_abl.csv".into());
                write_json(
                    out_dir,
                    record,
                    "abl_isolated",
                    "abl_isolated.json",
                    &outcome.isolated_ids,
                )?;
            }
            DefenseSection::Strip {
                n_perturbations,
                target_fpr,
                eval_samples,
            } => {
                let (clean_eval, poisoned_eval) =
                    detection_sets(&prepared.test, eval_ctx, *eval_samples)?;
                let overlays: Vec<Sample> = clean_pool.iter().take(16).cloned().collect();
                let report = strip_detect(
                    net,
                    &clean_eval,
                    &poisoned_eval,
                    &overlays,
                    &StripConfig {
                        n_perturbations: *n_perturbations,
                        target_fpr: *target_fpr,
                        aggregation: Aggregation::Mean,
                        seed: seeding::mix(config.seed, &[stage_seed::DEFENSE, 3]),
                    },
                )
                .map_err(|e| e.to_string())?;
                write_detection(out_dir, record, kind, &report)?;
            }
            DefenseSection::Teco {
                miou_break_threshold,
                n_std,
                eval_samples,
            } => {
                let (clean_eval, poisoned_eval) =
                    detection_sets(&prepared.test, eval_ctx, *eval_samples)?;
                let report = teco_detect(
                    net,
                    &clean_eval,
                    &poisoned_eval,
                    k,
                    ignore,
                    &TecoConfig {
                        miou_break_threshold: *miou_break_threshold,
                        n_std: *n_std,
                        seed: seeding::mix(config.seed, &[stage_seed::DEFENSE, 4]),
                    },
                )
                .map_err(|e| e.to_string())?;
                write_detection(out_dir, record, kind, &report)?;
            }
            DefenseSection::Beatrix {
                grouping,
                gram_orders,
                n_mad,
                eval_samples,
                reference_samples,
            } => {
                let (clean_eval, poisoned_eval) =
                    detection_sets(&prepared.test, eval_ctx, *eval_samples)?;
                let reference: Vec<Sample> =
                    clean_pool.iter().take(*reference_samples).cloned().collect();
                let grouping = if grouping == "main_class" {
                    Grouping::MainClass
                } else {
                    let id = prepared
                        .taxonomy
                        .id_of(grouping)
                        .ok_or_else(|| format!("unknown beatrix grouping class `{grouping}`"))?;
                    Grouping::SelectedClass(id)
                };
                let report = beatrix_detect(
                    net,
                    &reference,
                    &clean_eval,
                    &poisoned_eval,
                    k,
                    ignore,
                    &BeatrixConfig {
                        grouping,
                        gram_orders: gram_orders.clone(),
                        n_mad: *n_mad,
                    },
                )
                .map_err(|e| e.to_string())?;
                write_detection(out_dir, record, kind, &report)?;
            }
        }
    }
    Ok(())
}

fn write_mitigation(
    dir: &Path,
    record: &mut RunRecord,
    kind: &str,
    report: &MitigationReport,
) -> Result<(), String> {
    write_json(
        dir,
        record,
        &format!("mitigation_{kind}"),
        &format!("mitigation_{kind}.json"),
        report,
    )
}

fn write_detection(
    dir: &Path,
    record: &mut RunRecord,
    kind: &str,
    report: &DetectionReport,
) -> Result<(), String> {
    write_json(
        dir,
        record,
        &format!("detection_{kind}"),
        &format!("detection_{kind}.json"),
        report,
    )?;
    write_scores_csv(dir, record, kind, report)
}

/// Re-execute only the defense stage of a finished run: rebuild the data
/// deterministically from the recorded config, load the checkpoint, and
/// refresh the defense reports in place.
pub fn rerun_defenses(config: &ExperimentConfig, run_dir: &Path) -> Result<RunRecord, RunError> {
    let mut record = RunRecord::load(run_dir)?;
    let fail = |message: String| RunError {
        stage: "defend".into(),
        message,
    };
    let prepared = prepare(config).map_err(fail)?;
    let ckpt_file = record
        .artifacts
        .get("checkpoint")
        .cloned()
        .ok_or_else(|| fail("run has no checkpoint artifact".into()))?;
    let ckpt = checkpoint::load(&run_dir.join(ckpt_file)).map_err(|e| fail(e.to_string()))?;
    let trigger_text = std::fs::read_to_string(run_dir.join("trigger.toml"))
        .map_err(|e| fail(e.to_string()))?;
    let trigger: TriggerSpec =
        toml::from_str(&trigger_text).map_err(|e| fail(format!("trigger.toml: {e}")))?;
    let ctx = AttackContext {
        attack: prepared.attack.clone(),
        trigger: trigger.clone(),
        taxonomy: prepared.taxonomy.clone(),
        seed: seeding::mix(config.seed, &[stage_seed::POISON]),
    };
    let poisoned = assemble_poisoned(&prepared.split, &ctx).map_err(|e| fail(e.to_string()))?;
    let eval_ctx = AttackContext {
        seed: seeding::mix(config.seed, &[stage_seed::EVAL]),
        ..ctx
    };
    let start = Instant::now();
    run_defenses(
        config,
        &prepared,
        &poisoned,
        &ckpt.net,
        &eval_ctx,
        run_dir,
        &mut record,
    )
    .map_err(fail)?;
    record
        .stage_seconds
        .push(("defend".into(), start.elapsed().as_secs_f64()));
    record.save(run_dir).map_err(|e| fail(e.to_string()))?;
    Ok(record)
}

/// Resolve the run directory: explicit path, or `$BADSEG_OUTPUT_ROOT/name`
/// (default root `runs/`).
pub fn resolve_out_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var("BADSEG_OUTPUT_ROOT").unwrap_or_else(|_| "runs".into());
            Path::new(&root).join(name)
        }
    }
}
