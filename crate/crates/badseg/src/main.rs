//! Command-line experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use badseg::analysis::{class_centers, global_centers, global_centers_weighted, rank_pairs, ranking_table};
use badseg::data::{make_synthetic, save_dataset, SyntheticConfig};
use badseg::experiment::{
    self, config::TriggerSection, expand_sweeps, resolve_out_dir, ExperimentConfig,
};
use badseg::model::SegmentationModel;
use badseg::optimize::{search, SearchConfig};
use badseg::pipeline::SummaryRow;
use badseg::seeding;

#[derive(Parser)]
#[command(
    name = "badseg",
    about = "Segmentation backdoor toolkit: poisoning pipeline, metrics, and defense benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a full experiment from a config file.
    Run {
        config: PathBuf,
        /// Output directory (default: $BADSEG_OUTPUT_ROOT/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config for semantic problems without running it.
    Validate { config: PathBuf },
    /// Render summary tables, KDE plots, and overlays for a finished run.
    Report { run_dir: PathBuf },
    /// Expand the config's sweep section and run every child.
    Sweep {
        config: PathBuf,
        /// Root directory for child runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset directory (train/test/aux + taxonomy).
    MakeSynthetic {
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 50)]
        n_test: usize,
        #[arg(long, default_value_t = 60)]
        n_aux: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a surrogate and rank victim-target class pairs by center
    /// distance.
    RankPairs {
        config: PathBuf,
        /// Write the ranking table to this file (TSV).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Weight per-batch centers by pixel counts instead of the
        /// unweighted batch mean.
        #[arg(long, default_value_t = false)]
        weighted: bool,
        /// Mini-batch size for per-batch center aggregation.
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Run only the trigger-optimization stage and print the selected spec.
    OptimizeTrigger {
        config: PathBuf,
        /// Write the spec to this file (TOML).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the config's defense list against a finished run's checkpoint.
    Defend { run_dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| format!("stage `config`: {e}"))?;
    if cfg.name.is_none() {
        cfg.name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.to_string());
    }
    let diags = experiment::validate(&cfg);
    for d in &diags {
        eprintln!("{:?}: {}", d.severity, d.message);
    }
    if !experiment::is_valid(&diags) {
        return Err("stage `validate`: config has errors".into());
    }
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<(), String> {
    match command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let name = cfg.name.clone().unwrap_or_else(|| "run".into());
            let dir = resolve_out_dir(out.as_deref(), &name);
            let record = experiment::run(&cfg, &dir).map_err(|e| e.to_string())?;
            println!("run `{}` complete: {}", record.name, dir.display());
            for (stage, secs) in &record.stage_seconds {
                println!("  {stage:<10} {secs:.2}s");
            }
            Ok(())
        }
        Command::Validate { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| format!("stage `config`: {e}"))?;
            let cfg = ExperimentConfig::from_toml_str(&text)
                .map_err(|e| format!("stage `config`: {e}"))?;
            let diags = experiment::validate(&cfg);
            if diags.is_empty() {
                println!("ok: no diagnostics");
                return Ok(());
            }
            for d in &diags {
                println!("{:?}: {}", d.severity, d.message);
            }
            if experiment::is_valid(&diags) {
                Ok(())
            } else {
                Err("stage `validate`: config has errors".into())
            }
        }
        Command::Report { run_dir } => {
            let summary = experiment::report(&run_dir).map_err(|e| e.to_string())?;
            println!("{summary}");
            Ok(())
        }
        Command::Sweep { config, out } => {
            let text = std::fs::read_to_string(&config).map_err(|e| format!("stage `config`: {e}"))?;
            let children = expand_sweeps(&text).map_err(|e| format!("stage `sweep`: {e}"))?;
            let base = config
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("sweep")
                .to_string();
            let root = resolve_out_dir(out.as_deref(), &base);
            let mut rows: Vec<SummaryRow> = Vec::new();
            for (name, child) in children {
                let dir = root.join(&name);
                let record = experiment::run(&child, &dir).map_err(|e| e.to_string())?;
                let eval_text = std::fs::read_to_string(dir.join("eval_report.json"))
                    .map_err(|e| format!("stage `sweep`: {e}"))?;
                let eval: badseg::metrics::EvalReport = serde_json::from_str(&eval_text)
                    .map_err(|e| format!("stage `sweep`: {e}"))?;
                println!(
                    "{name}: ASR {:.4}  PBA {:.4}  CBA {:.4}",
                    eval.asr, eval.pba, eval.cba
                );
                rows.push(SummaryRow {
                    name: record.name,
                    attack: eval.attack,
                    asr: eval.asr,
                    pba: eval.pba,
                    cba: eval.cba,
                });
            }
            let mut table = String::from("name\tattack\tasr\tpba\tcba\n");
            for r in &rows {
                table.push_str(&format!(
                    "{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
                    r.name, r.attack, r.asr, r.pba, r.cba
                ));
            }
            std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
            std::fs::write(root.join("sweep_summary.tsv"), table).map_err(|e| e.to_string())?;
            println!("aggregate table: {}", root.join("sweep_summary.tsv").display());
            Ok(())
        }
        Command::MakeSynthetic {
            out,
            n_train,
            n_test,
            n_aux,
            height,
            width,
            num_classes,
            seed,
        } => {
            let make = |n: usize, tag: u64| {
                make_synthetic(&SyntheticConfig::new(
                    n,
                    height,
                    width,
                    num_classes,
                    seeding::mix(seed, &[tag]),
                ))
                .map_err(|e| format!("stage `make-synthetic`: {e}"))
            };
            let taxonomy = badseg::data::ClassTaxonomy::synthetic(num_classes)
                .map_err(|e| format!("stage `make-synthetic`: {e}"))?;
            for (sub, n, tag) in [
                ("train", n_train, 0x100u64),
                ("test", n_test, 0x101),
                ("aux", n_aux, 0x102),
            ] {
                let samples = make(n, tag)?;
                save_dataset(&out.join(sub), &samples)
                    .map_err(|e| format!("stage `make-synthetic`: {e}"))?;
            }
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            std::fs::write(out.join("taxonomy.toml"), taxonomy.to_toml_string())
                .map_err(|e| e.to_string())?;
            println!(
                "wrote {n_train}/{n_test}/{n_aux} train/test/aux samples to {}",
                out.display()
            );
            Ok(())
        }
        Command::RankPairs {
            config,
            out,
            weighted,
            batch,
        } => {
            let cfg = load_config(&config)?;
            let prepared =
                experiment::prepare(&cfg).map_err(|e| format!("stage `prepare`: {e}"))?;
            let surrogate_epochs = match &cfg.trigger {
                TriggerSection::Optimize { search } => search.surrogate_epochs,
                TriggerSection::Fixed { .. } => 6,
            };
            let surrogate = experiment::run::train_surrogate(&prepared, &cfg, surrogate_epochs)
                .map_err(|e| format!("stage `surrogate`: {e}"))?;
            let surrogate_set = prepared.split.surrogate();
            let k = prepared.taxonomy.num_classes();
            // Per-batch class centers (pixel-weighted within a batch), then a
            // global average across batches.
            let mut batch_centers = Vec::new();
            for chunk in surrogate_set.chunks(batch.max(1)) {
                let per_image: Vec<_> = chunk
                    .iter()
                    .map(|s| {
                        let features = surrogate.forward(&s.image).features;
                        class_centers(&features, &s.label, k, prepared.taxonomy.ignore_index)
                    })
                    .collect::<Result<_, _>>()
                    .map_err(|e| format!("stage `rank-pairs`: {e}"))?;
                batch_centers.push(
                    global_centers_weighted(&per_image)
                        .map_err(|e| format!("stage `rank-pairs`: {e}"))?,
                );
            }
            let global = if weighted {
                global_centers_weighted(&batch_centers)
            } else {
                global_centers(&batch_centers)
            }
            .map_err(|e| format!("stage `rank-pairs`: {e}"))?;
            let ranking = rank_pairs(&global, &prepared.taxonomy)
                .map_err(|e| format!("stage `rank-pairs`: {e}"))?;
            let table = ranking_table(&ranking, &prepared.taxonomy);
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::OptimizeTrigger { config, out } => {
            let cfg = load_config(&config)?;
            let prepared =
                experiment::prepare(&cfg).map_err(|e| format!("stage `prepare`: {e}"))?;
            let scfg = match &cfg.trigger {
                TriggerSection::Optimize { search } => search.clone(),
                TriggerSection::Fixed { .. } => {
                    return Err(
                        "stage `optimize`: config uses a fixed trigger; set trigger.mode = \"optimize\""
                            .into(),
                    )
                }
            };
            let surrogate =
                experiment::run::train_surrogate(&prepared, &cfg, scfg.surrogate_epochs)
                    .map_err(|e| format!("stage `surrogate`: {e}"))?;
            let surrogate_set = prepared.split.surrogate();
            let (spec, state) = search(
                &surrogate,
                &surrogate_set,
                &prepared.attack,
                &prepared.taxonomy,
                &SearchConfig {
                    steps: scfg.steps,
                    tau_start: scfg.tau_start,
                    tau_end: scfg.tau_end,
                    step_size: scfg.step_size,
                    seed: seeding::mix(cfg.seed, &[0x111]),
                    batch_size: scfg.batch_size,
                    init: None,
                    color: scfg.color,
                },
            )
            .map_err(|e| format!("stage `optimize`: {e}"))?;
            let spec_toml =
                toml::to_string_pretty(&spec).map_err(|e| format!("stage `optimize`: {e}"))?;
            println!("# selected after {} steps (final loss {:.4})", state.step,
                state.loss_history.last().copied().unwrap_or(f64::NAN));
            print!("{spec_toml}");
            if let Some(path) = out {
                std::fs::write(&path, &spec_toml).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Defend { run_dir } => {
            let record = badseg::experiment::RunRecord::load(&run_dir).map_err(|e| e.to_string())?;
            let cfg = ExperimentConfig::from_toml_str(&record.config_toml)
                .map_err(|e| format!("stage `defend`: {e}"))?;
            if cfg.defense.is_empty() {
                return Err("stage `defend`: config has no [[defense]] sections".into());
            }
            // Deterministic re-execution of the defense stage alone: rebuild
            // the run's data and model, then score the defenses.
            experiment::run::rerun_defenses(&cfg, &run_dir).map_err(|e| e.to_string())?;
            println!("defenses re-evaluated under {}", run_dir.display());
            Ok(())
        }
    }
}
