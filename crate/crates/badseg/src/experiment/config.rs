//! Declarative experiment configs (TOML) and their validation.
//!
//! One file describes a full run: dataset, attack, trigger (fixed or
//! searched), training, evaluation, and an optional list of defenses.
//! Sweeps override any scalar field by dotted path, producing one child run
//! per value combination.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::ClassTaxonomy;
use crate::labelops::{
    AttackSpec, CoarseVector, ConditionPredicate, InstanceLimit, RegionSpec, Refinement,
};
use crate::trigger::{CandidateGrid, PositionStrategy, TriggerShape, TriggerSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse failed: {0}")]
    Parse(String),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("sweep field `{0}` not found")]
    SweepField(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Run name; defaults to the config file stem.
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetSection,
    pub attack: AttackSection,
    pub trigger: TriggerSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub defense: Vec<DefenseSection>,
    #[serde(default)]
    pub sweep: Vec<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSection {
    Synthetic {
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        n_aux: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        poison_rate: f64,
        #[serde(default = "default_aux_fraction")]
        aux_fraction: f64,
    },
    Directory {
        /// Root containing `train/`, `test/`, `aux/` (each `images/` +
        /// `labels/`) and `taxonomy.toml`.
        root: PathBuf,
        poison_rate: f64,
        #[serde(default = "default_aux_fraction")]
        aux_fraction: f64,
    },
}

fn default_aux_fraction() -> f64 {
    0.3
}

impl DatasetSection {
    pub fn poison_rate(&self) -> f64 {
        match self {
            DatasetSection::Synthetic { poison_rate, .. } => *poison_rate,
            DatasetSection::Directory { poison_rate, .. } => *poison_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    /// `O2O`, `O2B`, `B2O`, `B2B`, optionally prefixed `INS-` or `CON-`.
    pub vector: String,
    pub victim: String,
    pub target: String,
    /// INS only: number of instances to trigger, or "all".
    #[serde(default)]
    pub instance_limit: Option<toml::Value>,
    /// CON only.
    #[serde(default)]
    pub condition: Option<ConditionPredicate>,
    /// B2O only.
    #[serde(default)]
    pub b2o_region: Option<RegionSpec>,
}

impl AttackSection {
    /// Resolve class names against the taxonomy into an [`AttackSpec`].
    pub fn resolve(&self, taxonomy: &ClassTaxonomy) -> Result<AttackSpec, ConfigError> {
        let victim = taxonomy
            .id_of(&self.victim)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown victim class `{}`", self.victim)))?;
        let target = taxonomy
            .id_of(&self.target)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown target class `{}`", self.target)))?;
        let (prefix, coarse_name) = match self.vector.split_once('-') {
            Some((p, c)) => (Some(p), c),
            None => (None, self.vector.as_str()),
        };
        let coarse = match coarse_name {
            "O2O" => CoarseVector::O2O,
            "O2B" => CoarseVector::O2B,
            "B2O" => CoarseVector::B2O,
            "B2B" => CoarseVector::B2B,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown attack vector `{other}`"
                )))
            }
        };
        let refinement = match prefix {
            None => Refinement::None,
            Some("INS") => {
                let limit = match &self.instance_limit {
                    None => InstanceLimit::Count(1),
                    Some(toml::Value::String(s)) if s == "all" => InstanceLimit::All,
                    Some(toml::Value::Integer(n)) if *n >= 1 => {
                        InstanceLimit::Count(*n as u32)
                    }
                    Some(v) => {
                        return Err(ConfigError::Invalid(format!(
                            "instance_limit must be a positive integer or \"all\", got {v}"
                        )))
                    }
                };
                Refinement::Instance { limit }
            }
            Some("CON") => Refinement::Conditional {
                predicate: self.condition.clone().unwrap_or_else(ConditionPredicate::red),
            },
            Some(other) => {
                return Err(ConfigError::Invalid(format!(
                    "unknown vector prefix `{other}` (expected INS or CON)"
                )))
            }
        };
        let mut spec = AttackSpec::coarse(coarse, victim, target);
        spec.refinement = refinement;
        if coarse == CoarseVector::B2O {
            spec.b2o_region = Some(self.b2o_region.unwrap_or_default());
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TriggerSection {
    /// An explicit trigger; may leave the candidate grid.
    Fixed {
        shape: TriggerShape,
        size: f64,
        position: PositionStrategy,
        quantity: u32,
        intensity: f64,
        #[serde(default = "default_color")]
        color: [f32; 3],
    },
    /// Search for the trigger with the surrogate.
    Optimize {
        #[serde(default)]
        search: SearchSection,
    },
}

fn default_color() -> [f32; 3] {
    [0.0, 0.0, 0.0]
}

impl TriggerSection {
    pub fn fixed_spec(&self) -> Option<TriggerSpec> {
        match self {
            TriggerSection::Fixed {
                shape,
                size,
                position,
                quantity,
                intensity,
                color,
            } => Some(TriggerSpec {
                shape: *shape,
                size: *size,
                position: *position,
                quantity: *quantity,
                intensity: *intensity,
                color: *color,
            }),
            TriggerSection::Optimize { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_tau_start")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    #[serde(default = "default_search_lr")]
    pub step_size: f64,
    #[serde(default = "default_search_batch")]
    pub batch_size: usize,
    /// Surrogate training epochs before the search.
    #[serde(default = "default_surrogate_epochs")]
    pub surrogate_epochs: usize,
    #[serde(default = "default_color")]
    pub color: [f32; 3],
}

fn default_steps() -> usize {
    300
}
fn default_tau_start() -> f64 {
    1.0
}
fn default_tau_end() -> f64 {
    0.1
}
fn default_search_lr() -> f64 {
    0.05
}
fn default_search_batch() -> usize {
    8
}
fn default_surrogate_epochs() -> usize {
    6
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            tau_start: default_tau_start(),
            tau_end: default_tau_end(),
            step_size: default_search_lr(),
            batch_size: default_search_batch(),
            surrogate_epochs: default_surrogate_epochs(),
            color: default_color(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub hflip: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            step_size: 3e-3,
            batch_size: 16,
            hflip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSection {
    #[serde(default = "default_stealth_samples")]
    pub stealth_samples: usize,
}

fn default_stealth_samples() -> usize {
    16
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            stealth_samples: default_stealth_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseSection {
    Finetune {
        #[serde(default = "default_clean_fraction")]
        clean_fraction: f64,
        #[serde(default = "default_finetune_epochs")]
        epochs: usize,
    },
    Prune {
        #[serde(default = "default_prune_fraction")]
        fraction: f64,
        #[serde(default = "default_probe_samples")]
        probe_samples: usize,
    },
    Abl {
        #[serde(default = "default_isolation_rate")]
        isolation_rate: f64,
        #[serde(default = "default_brief_epochs")]
        brief_epochs: usize,
    },
    Strip {
        #[serde(default = "default_n_perturbations")]
        n_perturbations: usize,
        #[serde(default = "default_fpr")]
        target_fpr: f64,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
    },
    Teco {
        #[serde(default = "default_break_threshold")]
        miou_break_threshold: f64,
        #[serde(default = "default_n_std")]
        n_std: f64,
        #[serde(default = "default_teco_eval_samples")]
        eval_samples: usize,
    },
    Beatrix {
        /// "main_class" or a class name.
        #[serde(default = "default_grouping")]
        grouping: String,
        #[serde(default = "default_orders")]
        gram_orders: Vec<u32>,
        #[serde(default = "default_n_mad")]
        n_mad: f64,
        #[serde(default = "default_eval_samples")]
        eval_samples: usize,
        #[serde(default = "default_reference_samples")]
        reference_samples: usize,
    },
}

fn default_clean_fraction() -> f64 {
    0.10
}
fn default_finetune_epochs() -> usize {
    10
}
fn default_prune_fraction() -> f64 {
    0.05
}
fn default_probe_samples() -> usize {
    32
}
fn default_isolation_rate() -> f64 {
    0.1
}
fn default_brief_epochs() -> usize {
    5
}
fn default_n_perturbations() -> usize {
    8
}
fn default_fpr() -> f64 {
    0.05
}
fn default_eval_samples() -> usize {
    25
}
fn default_teco_eval_samples() -> usize {
    12
}
fn default_break_threshold() -> f64 {
    0.5
}
fn default_n_std() -> f64 {
    2.0
}
fn default_grouping() -> String {
    "main_class".into()
}
fn default_orders() -> Vec<u32> {
    vec![1, 2, 3, 4]
}
fn default_n_mad() -> f64 {
    3.0
}
fn default_reference_samples() -> usize {
    40
}

impl DefenseSection {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DefenseSection::Finetune { .. } => "finetune",
            DefenseSection::Prune { .. } => "prune",
            DefenseSection::Abl { .. } => "abl",
            DefenseSection::Strip { .. } => "strip",
            DefenseSection::Teco { .. } => "teco",
            DefenseSection::Beatrix { .. } => "beatrix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    /// Dotted path into the config, e.g. `dataset.poison_rate`.
    pub field: String,
    pub values: Vec<toml::Value>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The taxonomy this config runs against (synthetic taxonomies are
    /// derived from `num_classes`; directory datasets load their file).
    pub fn taxonomy(&self) -> Result<ClassTaxonomy, ConfigError> {
        match &self.dataset {
            DatasetSection::Synthetic { num_classes, .. } => {
                ClassTaxonomy::synthetic(*num_classes)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            DatasetSection::Directory { root, .. } => {
                let path = root.join("taxonomy.toml");
                let text = std::fs::read_to_string(&path)?;
                ClassTaxonomy::from_toml_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }
}

/// One validation finding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// Semantic validation: vector/kind compatibility, candidate-set membership,
/// class existence. Returns an empty list iff the config is valid (warnings
/// do not invalidate).
pub fn validate(config: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let err = |m: String| Diagnostic {
        severity: Severity::Error,
        message: m,
    };
    let warn = |m: String| Diagnostic {
        severity: Severity::Warning,
        message: m,
    };
    let taxonomy = match config.taxonomy() {
        Ok(t) => t,
        Err(e) => {
            out.push(err(format!("taxonomy: {e}")));
            return out;
        }
    };
    let attack = match config.attack.resolve(&taxonomy) {
        Ok(a) => a,
        Err(e) => {
            out.push(err(e.to_string()));
            return out;
        }
    };
    if let Err(e) = attack.validate(&taxonomy) {
        out.push(err(e.to_string()));
    }
    let rate = config.dataset.poison_rate();
    if !(0.0..=1.0).contains(&rate) {
        out.push(err(format!("poison_rate {rate} outside [0, 1]")));
    }
    if let Some(spec) = config.trigger.fixed_spec() {
        if let Err(e) = spec.validate() {
            out.push(err(e.to_string()));
        }
        let grid = CandidateGrid::for_vector(attack.coarse);
        if !grid.positions.contains(&spec.position) {
            out.push(err(format!(
                "position {:?} is not available for {} (no object anchor)",
                spec.position, attack.coarse
            )));
        } else if !grid.contains(&spec) {
            // Fixed specs may leave the candidate grid.
            out.push(warn(format!(
                "fixed trigger leaves the {} candidate grid (accepted)",
                attack.coarse
            )));
        }
    }
    for d in &config.defense {
        if let DefenseSection::Beatrix { grouping, .. } = d {
            if grouping != "main_class" && taxonomy.id_of(grouping).is_none() {
                out.push(err(format!(
                    "beatrix grouping `{grouping}` is neither main_class nor a class name"
                )));
            }
        }
    }
    for s in &config.sweep {
        if s.values.is_empty() {
            out.push(err(format!("sweep over `{}` has no values", s.field)));
        }
    }
    out
}

/// True when no error-severity diagnostics are present.
pub fn is_valid(diagnostics: &[Diagnostic]) -> bool {
    diagnostics.iter().all(|d| d.severity != Severity::Error)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

fn set_dotted(value: &mut toml::Value, path: &str, new: toml::Value) -> bool {
    let mut cur = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = match cur.as_table_mut() {
            Some(t) => t,
            None => return false,
        };
        if i + 1 == parts.len() {
            if table.contains_key(*part) {
                table.insert(part.to_string(), new);
                return true;
            }
            return false;
        }
        cur = match table.get_mut(*part) {
            Some(v) => v,
            None => return false,
        };
    }
    false
}

fn value_slug(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string().replace('"', ""),
    }
}

/// Expand the sweep sections of a config into child configs. With no sweeps
/// the single original config (minus the sweep table) is returned.
pub fn expand_sweeps(text: &str) -> Result<Vec<(String, ExperimentConfig)>, ConfigError> {
    let base: ExperimentConfig = ExperimentConfig::from_toml_str(text)?;
    let sweeps = base.sweep.clone();
    let mut raw: toml::Value =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(t) = raw.as_table_mut() {
        t.remove("sweep");
    }
    if sweeps.is_empty() {
        let name = base.name.clone().unwrap_or_else(|| "run".into());
        let mut cfg = base;
        cfg.sweep.clear();
        return Ok(vec![(name, cfg)]);
    }
    // Cross product over sweep values.
    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for s in &sweeps {
        let mut next = Vec::new();
        for combo in &combos {
            for vi in 0..s.values.len() {
                let mut c = combo.clone();
                c.push(vi);
                next.push(c);
            }
        }
        combos = next;
    }
    let base_name = base.name.clone().unwrap_or_else(|| "run".into());
    let mut out = Vec::with_capacity(combos.len());
    for combo in combos {
        let mut v = raw.clone();
        let mut name = base_name.clone();
        for (si, &vi) in combo.iter().enumerate() {
            let s = &sweeps[si];
            if !set_dotted(&mut v, &s.field, s.values[vi].clone()) {
                return Err(ConfigError::SweepField(s.field.clone()));
            }
            let leaf = s.field.rsplit('.').next().unwrap_or(&s.field);
            name = format!("{name}-{leaf}_{}", value_slug(&s.values[vi]));
        }
        let text = toml::to_string(&v).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut cfg = ExperimentConfig::from_toml_str(&text)?;
        cfg.name = Some(name.clone());
        out.push((name, cfg));
    }
    Ok(out)
}
