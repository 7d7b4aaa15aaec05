//! Rendered summaries of a finished run: metric tables, score-density
//! plots, and poisoned-input / prediction overlay panels.

use std::path::Path;

use crate::data::Sample;
use crate::defense::{DetectionReport, MitigationReport};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::render;
use crate::experiment::run::{prepare, RunError, RunRecord};
use crate::metrics::EvalReport;
use crate::model::{checkpoint, predict};
use crate::pipeline::{poison_eval_set, AttackContext};
use crate::seeding;

fn fmt_psnr(psnr: Option<f64>) -> String {
    match psnr {
        Some(v) => format!("{v:.2}"),
        None => "inf".into(),
    }
}

/// Render `summary.txt`, KDE images, and overlay panels for a run directory.
/// Returns the human-readable summary.
pub fn report(run_dir: &Path) -> Result<String, RunError> {
    let record = RunRecord::load(run_dir)?;
    let fail = |message: String| RunError {
        stage: "report".into(),
        message,
    };
    let mut out = String::new();
    out.push_str(&format!(
        "run `{}` (toolkit {}, seed {})\n",
        record.name, record.toolkit_version, record.seed
    ));
    if let Some(err) = &record.error {
        out.push_str(&format!(
            "INCOMPLETE: stage `{}` failed: {}\n",
            err.stage, err.message
        ));
    }
    out.push('\n');

    // Attack metrics table.
    if let Some(file) = record.artifacts.get("eval_report") {
        let text = std::fs::read_to_string(run_dir.join(file)).map_err(|e| fail(e.to_string()))?;
        let eval: EvalReport =
            serde_json::from_str(&text).map_err(|e| fail(format!("corrupt eval report: {e}")))?;
        out.push_str("attack      ASR      PBA      CBA      PSNR(dB)  SSIM     perceptual\n");
        out.push_str(&format!(
            "{:<11} {:<8.4} {:<8.4} {:<8.4} {:<9} {:<8.4} {:.6}\n\n",
            eval.attack,
            eval.asr,
            eval.pba,
            eval.cba,
            fmt_psnr(eval.stealth.psnr_db),
            eval.stealth.ssim,
            eval.stealth.perceptual
        ));
    }

    // Mitigation defenses.
    let mitigations: Vec<MitigationReport> = ["finetune", "prune", "abl"]
        .iter()
        .filter_map(|kind| record.artifacts.get(&format!("mitigation_{kind}")))
        .filter_map(|file| std::fs::read_to_string(run_dir.join(file)).ok())
        .filter_map(|text| serde_json::from_str(&text).ok())
        .collect();
    if !mitigations.is_empty() {
        out.push_str("defense     ASR before  ASR after  PBA after  CBA after\n");
        for m in &mitigations {
            out.push_str(&format!(
                "{:<11} {:<11.4} {:<10.4} {:<10.4} {:.4}\n",
                m.defense, m.asr_before, m.asr_after, m.pba_after, m.cba_after
            ));
        }
        out.push('\n');
    }

    // Detection defenses.
    let detections: Vec<DetectionReport> = ["strip", "teco", "beatrix"]
        .iter()
        .filter_map(|kind| record.artifacts.get(&format!("detection_{kind}")))
        .filter_map(|file| std::fs::read_to_string(run_dir.join(file)).ok())
        .filter_map(|text| serde_json::from_str(&text).ok())
        .collect();
    if !detections.is_empty() {
        out.push_str("defense     ACC      Recall   F1       AUC\n");
        for d in &detections {
            out.push_str(&format!(
                "{:<11} {:<8.4} {:<8.4} {:<8.4} {:.4}\n",
                d.defense, d.acc, d.recall, d.f1, d.auc
            ));
        }
        out.push('\n');
    }

    // KDE plots from every exported score table.
    for (key, file) in &record.artifacts {
        if let Some(kind) = key.strip_prefix("scores_") {
            let text =
                std::fs::read_to_string(run_dir.join(file)).map_err(|e| fail(e.to_string()))?;
            let mut clean = Vec::new();
            let mut poisoned = Vec::new();
            for line in text.lines().skip(1) {
                if let Some((label, score)) = line.split_once(',') {
                    if let Ok(v) = score.parse::<f64>() {
                        if label == "poisoned" {
                            poisoned.push(v);
                        } else {
                            clean.push(v);
                        }
                    }
                }
            }
            if !clean.is_empty() && !poisoned.is_empty() {
                let img = render::kde_plot(&clean, &poisoned, 420, 260);
                let name = format!("kde_{kind}.png");
                img.save(run_dir.join(&name)).map_err(|e| fail(e.to_string()))?;
                out.push_str(&format!("wrote {name}\n"));
            }
        }
    }

    // Overlay panels: clean input, poisoned input, prediction overlay.
    if let Some(ckpt_file) = record.artifacts.get("checkpoint") {
        let config = ExperimentConfig::from_toml_str(&record.config_toml)
            .map_err(|e| fail(format!("record config: {e}")))?;
        let prepared = prepare(&config).map_err(fail)?;
        let ckpt =
            checkpoint::load(&run_dir.join(ckpt_file)).map_err(|e| fail(e.to_string()))?;
        let trigger_text = std::fs::read_to_string(run_dir.join("trigger.toml"))
            .map_err(|e| fail(e.to_string()))?;
        let trigger =
            toml::from_str(&trigger_text).map_err(|e| fail(format!("trigger.toml: {e}")))?;
        let eval_ctx = AttackContext {
            attack: prepared.attack.clone(),
            trigger,
            taxonomy: prepared.taxonomy.clone(),
            seed: seeding::mix(config.seed, &[0x140]),
        };
        let poisoned = poison_eval_set(&prepared.test, &eval_ctx).map_err(|e| fail(e.to_string()))?;
        for (panel_idx, (orig_idx, p)) in poisoned.iter().take(3).enumerate() {
            let clean_sample: &Sample = &prepared.test[*orig_idx];
            let (pred, _) = predict(&ckpt.net, &p.sample.image);
            let panels = [
                render::image_to_rgb(&clean_sample.image),
                render::image_to_rgb(&p.sample.image),
                render::overlay_label(&p.sample.image, &pred),
            ];
            let strip = render::side_by_side(&panels);
            let name = format!("overlay_{panel_idx}.png");
            strip
                .save(run_dir.join(&name))
                .map_err(|e| fail(e.to_string()))?;
            out.push_str(&format!("wrote {name}\n"));
        }
    }

    std::fs::write(run_dir.join("summary.txt"), &out).map_err(|e| fail(e.to_string()))?;
    Ok(out)
}
