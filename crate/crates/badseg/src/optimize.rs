//! Gradient search over the discrete trigger space against a surrogate.
//!
//! Each step samples one set of Gumbel noises per attribute, builds the
//! relaxed trigger, injects it into a minibatch, scores per-pixel
//! cross-entropy against the manipulated target labels, and backpropagates
//! through the blend and the relaxed rasterization into per-attribute
//! logits. Temperature anneals exponentially; the final spec takes each
//! attribute's most probable candidate.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassTaxonomy, Sample};
use crate::labelops::{self, AttackSpec};
use crate::model::{ModelError, SegmentationModel};
use crate::seeding::{self, stream};
use crate::trigger::{
    discretize, gumbel_softmax, gumbel_softmax_backward, inject, rasterize_relaxed_full,
    CandidateGrid, GumbelNoise, RelaxedTriggerSpec, TriggerError, TriggerGrads, TriggerSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum OptimizeError {
    #[error("search diverged at step {step} (tau {tau:.4}): {reason}")]
    Diverged {
        step: usize,
        tau: f64,
        reason: String,
    },
    #[error("no usable samples for the attack (victim class absent everywhere)")]
    NoUsableSamples,
    #[error("search config invalid: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    LabelOp(#[from] labelops::LabelOpError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub step_size: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Optional concrete spec to start from (one-hot logits); otherwise
    /// uniform.
    #[serde(default)]
    pub init: Option<TriggerSpec>,
    #[serde(default = "default_color")]
    pub color: [f32; 3],
}

fn default_color() -> [f32; 3] {
    [0.0, 0.0, 0.0]
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            tau_start: 1.0,
            tau_end: 0.1,
            step_size: 0.05,
            seed: 0,
            batch_size: 8,
            init: None,
            color: default_color(),
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<(), OptimizeError> {
        if !(self.tau_start >= self.tau_end && self.tau_end > 0.0) {
            return Err(OptimizeError::InvalidConfig(format!(
                "need tau_start >= tau_end > 0, got {} -> {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.batch_size == 0 {
            return Err(OptimizeError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exponential interpolation from `tau_start` at step 0 to `tau_end` at
/// `steps`.
pub fn anneal(tau_start: f64, tau_end: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return tau_start;
    }
    tau_start * (tau_end / tau_start).powf(step as f64 / steps as f64)
}

/// Per-attribute logits parameterizing the categorical probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeLogits {
    pub shape: Vec<f64>,
    pub size: Vec<f64>,
    pub position: Vec<f64>,
    pub quantity: Vec<f64>,
    pub intensity: Vec<f64>,
}

impl AttributeLogits {
    /// All-zero logits (uniform probabilities) over a grid.
    pub fn zeros_like_grid(grid: &CandidateGrid) -> Self {
        Self::zeros(grid)
    }

    fn zeros(grid: &CandidateGrid) -> Self {
        Self {
            shape: vec![0.0; grid.shapes.len()],
            size: vec![0.0; grid.sizes.len()],
            position: vec![0.0; grid.positions.len()],
            quantity: vec![0.0; grid.quantities.len()],
            intensity: vec![0.0; grid.intensities.len()],
        }
    }

    /// One-hot-ish logits (large margin) matching a concrete spec.
    fn from_spec(grid: &CandidateGrid, spec: &TriggerSpec) -> Result<Self, OptimizeError> {
        let relaxed = RelaxedTriggerSpec::one_hot(grid.clone(), spec, 1.0)?;
        let hot = |xi: &[f64]| -> Vec<f64> {
            xi.iter().map(|&p| if p > 0.5 { 6.0 } else { 0.0 }).collect()
        };
        Ok(Self {
            shape: hot(&relaxed.xi_shape),
            size: hot(&relaxed.xi_size),
            position: hot(&relaxed.xi_position),
            quantity: hot(&relaxed.xi_quantity),
            intensity: hot(&relaxed.xi_intensity),
        })
    }

    fn parts(&self) -> [&Vec<f64>; 5] {
        [
            &self.shape,
            &self.size,
            &self.position,
            &self.quantity,
            &self.intensity,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.shape,
            &mut self.size,
            &mut self.position,
            &mut self.quantity,
            &mut self.intensity,
        ]
    }

    /// Softmax each attribute into probability vectors.
    pub fn probabilities(&self, grid: &CandidateGrid, tau: f64, color: [f32; 3]) -> RelaxedTriggerSpec {
        RelaxedTriggerSpec {
            grid: grid.clone(),
            xi_shape: softmax(&self.shape),
            xi_size: softmax(&self.size),
            xi_position: softmax(&self.position),
            xi_quantity: softmax(&self.quantity),
            xi_intensity: softmax(&self.intensity),
            temperature: tau,
            color,
        }
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// One line of the structured run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub tau: f64,
    pub loss: f64,
    pub argmax: ArgmaxSnapshot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArgmaxSnapshot {
    pub shape: String,
    pub size: f64,
    pub position: String,
    pub quantity: u32,
    pub intensity: f64,
}

/// Search state: the optimized variables plus the loss trace.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub logits: AttributeLogits,
    pub temperature: f64,
    pub step: usize,
    pub loss_history: Vec<f64>,
    pub log: Vec<StepLog>,
    pub grid: CandidateGrid,
}

struct AdamVec {
    m: Vec<f64>,
    v: Vec<f64>,
}

struct AdamState {
    t: u64,
    lr: f64,
    parts: Vec<AdamVec>,
}

impl AdamState {
    fn new(logits: &AttributeLogits, lr: f64) -> Self {
        Self {
            t: 0,
            lr,
            parts: logits
                .parts()
                .iter()
                .map(|p| AdamVec {
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect(),
        }
    }

    fn step(&mut self, logits: &mut AttributeLogits, grads: [&[f64]; 5]) {
        self.t += 1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1f64(b1, self.t);
        let bc2 = 1.0 - b1f64(b2, self.t);
        for (pi, part) in logits.parts_mut().into_iter().enumerate() {
            let st = &mut self.parts[pi];
            for i in 0..part.len() {
                let g = grads[pi][i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                part[i] -= self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn b1f64(b: f64, t: u64) -> f64 {
    b.powi(t as i32)
}

/// Mean per-pixel cross-entropy of the surrogate on a relax-triggered
/// sample against the manipulated target label (no gradients).
pub fn surrogate_loss(
    surrogate: &dyn SegmentationModel,
    sample: &Sample,
    relaxed: &RelaxedTriggerSpec,
    noise: &GumbelNoise,
    attack: &AttackSpec,
    taxonomy: &ClassTaxonomy,
    placement_seed: u64,
) -> Result<f64, OptimizeError> {
    let canvas = (sample.height(), sample.width());
    let anchor_data = resolve_anchor(sample, attack, taxonomy)?
        .ok_or(OptimizeError::NoUsableSamples)?;
    let raster = rasterize_relaxed_full(
        relaxed,
        noise,
        canvas,
        &anchor_data.context(),
        placement_seed,
    )?;
    let y_t = labelops::manipulate(
        &sample.label,
        attack,
        &raster.placement,
        &sample.image,
        taxonomy,
    )?;
    let x_t = inject(&sample.image, &raster.placement, relaxed.color)?;
    let out = surrogate.forward(&x_t);
    let k = surrogate.num_classes();
    let mut loss = 0.0f64;
    let mut n = 0usize;
    for ((r, c), &t) in y_t.0.indexed_iter() {
        if t == taxonomy.ignore_index || t as usize >= k {
            continue;
        }
        loss -= (out.confidence[(t as usize, r, c)].max(1e-12) as f64).ln();
        n += 1;
    }
    if n == 0 {
        return Err(OptimizeError::Model(ModelError::NoValidPixels));
    }
    Ok(loss / n as f64)
}

/// Victim anchor for one sample: the largest victim instance for
/// object-anchored vectors, the victim stuff region otherwise.
pub struct ResolvedAnchor {
    pub bbox: Option<(usize, usize, usize, usize)>,
    pub mask: Array2<bool>,
}

impl ResolvedAnchor {
    pub fn context(&self) -> crate::trigger::AnchorContext<'_> {
        match self.bbox {
            Some(bbox) => crate::trigger::AnchorContext::Object {
                bbox,
                mask: &self.mask,
            },
            None => crate::trigger::AnchorContext::Region { mask: &self.mask },
        }
    }
}

/// Returns `None` when the sample has no victim pixels.
pub fn resolve_anchor(
    sample: &Sample,
    attack: &AttackSpec,
    taxonomy: &ClassTaxonomy,
) -> Result<Option<ResolvedAnchor>, OptimizeError> {
    if attack.coarse.object_anchored() {
        let instances = labelops::extract_instances(&sample.label, attack.victim_class, taxonomy)?;
        Ok(instances.into_iter().next().map(|inst| ResolvedAnchor {
            bbox: Some(inst.bbox),
            mask: inst.mask,
        }))
    } else {
        let mask = sample.label.class_mask(attack.victim_class);
        if mask.iter().any(|&v| v) {
            Ok(Some(ResolvedAnchor { bbox: None, mask }))
        } else {
            Ok(None)
        }
    }
}

/// One relaxed evaluation of a batch: mean loss plus gradients on the
/// logits. Exposed so gradient checks can drive it directly.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_batch(
    surrogate: &dyn SegmentationModel,
    samples: &[&Sample],
    attack: &AttackSpec,
    taxonomy: &ClassTaxonomy,
    logits: &AttributeLogits,
    grid: &CandidateGrid,
    noise: &GumbelNoise,
    tau: f64,
    color: [f32; 3],
    placement_seeds: &[u64],
) -> Result<(f64, AttributeLogits), OptimizeError> {
    let relaxed = logits.probabilities(grid, tau, color);
    let results: Vec<Result<Option<(f64, TriggerGrads)>, OptimizeError>> = samples
        .par_iter()
        .zip(placement_seeds.par_iter())
        .map(|(sample, &pseed)| {
            let canvas = (sample.height(), sample.width());
            let anchor = match resolve_anchor(sample, attack, taxonomy)? {
                Some(a) => a,
                None => return Ok(None),
            };
            let raster =
                rasterize_relaxed_full(&relaxed, noise, canvas, &anchor.context(), pseed)?;
            let y_t = labelops::manipulate(
                &sample.label,
                attack,
                &raster.placement,
                &sample.image,
                taxonomy,
            )?;
            let x_t = inject(&sample.image, &raster.placement, color)?;
            let (loss, gx) =
                surrogate.loss_and_input_grad(&x_t, &y_t, taxonomy.ignore_index)?;
            // d(out)/d(stencil) = color - original pixel.
            let (h, w) = canvas;
            let mut d_stencil = Array2::<f32>::zeros((h, w));
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0f32;
                    for ch in 0..3 {
                        acc += gx[(ch, r, c)] * (color[ch] - sample.image[(ch, r, c)]);
                    }
                    d_stencil[(r, c)] = acc;
                }
            }
            Ok(Some((loss, raster.backprop(&d_stencil))))
        })
        .collect();

    let mut total_loss = 0.0f64;
    let mut n = 0usize;
    let mut d_eta = AttributeLogits::zeros(grid);
    for r in results {
        if let Some((loss, grads)) = r? {
            total_loss += loss;
            n += 1;
            add_assign(&mut d_eta.shape, &grads.d_eta_shape);
            add_assign(&mut d_eta.size, &grads.d_eta_size);
            add_assign(&mut d_eta.position, &grads.d_eta_position);
            add_assign(&mut d_eta.quantity, &grads.d_eta_quantity);
            add_assign(&mut d_eta.intensity, &grads.d_eta_intensity);
        }
    }
    if n == 0 {
        return Err(OptimizeError::NoUsableSamples);
    }
    let inv = 1.0 / n as f64;
    let relaxed_xi = [
        &relaxed.xi_shape,
        &relaxed.xi_size,
        &relaxed.xi_position,
        &relaxed.xi_quantity,
        &relaxed.xi_intensity,
    ];
    let noise_parts = [
        &noise.shape,
        &noise.size,
        &noise.position,
        &noise.quantity,
        &noise.intensity,
    ];
    let d_eta_parts = d_eta.parts();
    let mut d_logits = AttributeLogits::zeros(grid);
    for (pi, part) in d_logits.parts_mut().into_iter().enumerate() {
        let xi = relaxed_xi[pi];
        let eta = gumbel_softmax(xi, noise_parts[pi], tau)?;
        let d_eta_mean: Vec<f64> = d_eta_parts[pi].iter().map(|&g| g * inv).collect();
        let d_ln_xi = gumbel_softmax_backward(&eta, &d_eta_mean, tau);
        // ln xi = logits - logsumexp(logits).
        let dot: f64 = d_ln_xi.iter().sum();
        for i in 0..part.len() {
            part[i] = d_ln_xi[i] - xi[i] * dot;
        }
    }
    Ok((total_loss * inv, d_logits))
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Run the trigger search. Returns the discretized spec and the final state.
pub fn search(
    surrogate: &dyn SegmentationModel,
    surrogate_set: &[&Sample],
    attack: &AttackSpec,
    taxonomy: &ClassTaxonomy,
    cfg: &SearchConfig,
) -> Result<(TriggerSpec, SearchState), OptimizeError> {
    cfg.validate()?;
    attack.validate(taxonomy)?;
    let grid = CandidateGrid::for_vector(attack.coarse);
    let mut logits = match &cfg.init {
        Some(spec) => AttributeLogits::from_spec(&grid, spec)?,
        None => AttributeLogits::zeros(&grid),
    };
    // Keep only samples that can anchor the attack.
    let usable: Vec<&Sample> = surrogate_set
        .iter()
        .copied()
        .filter(|s| {
            resolve_anchor(s, attack, taxonomy)
                .map(|a| a.is_some())
                .unwrap_or(false)
        })
        .collect();
    if usable.is_empty() {
        return Err(OptimizeError::NoUsableSamples);
    }
    let mut adam = AdamState::new(&logits, cfg.step_size);
    let mut state = SearchState {
        logits: logits.clone(),
        temperature: cfg.tau_start,
        step: 0,
        loss_history: Vec::new(),
        log: Vec::new(),
        grid: grid.clone(),
    };
    for step in 0..cfg.steps {
        let tau = anneal(cfg.tau_start, cfg.tau_end, step, cfg.steps);
        let mut rng = seeding::rng(cfg.seed, &[stream::GUMBEL, step as u64]);
        let noise = GumbelNoise::sample(&grid, &mut rng);
        let batch: Vec<&Sample> = (0..cfg.batch_size.min(usable.len()))
            .map(|_| usable[rng.gen_range(0..usable.len())])
            .collect();
        let placement_seeds: Vec<u64> = (0..batch.len())
            .map(|i| seeding::mix(cfg.seed, &[stream::PLACEMENT, step as u64, i as u64]))
            .collect();
        let (loss, d_logits) = evaluate_batch(
            surrogate,
            &batch,
            attack,
            taxonomy,
            &logits,
            &grid,
            &noise,
            tau,
            cfg.color,
            &placement_seeds,
        )?;
        if !loss.is_finite() {
            return Err(OptimizeError::Diverged {
                step,
                tau,
                reason: "non-finite loss".into(),
            });
        }
        adam.step(
            &mut logits,
            [
                &d_logits.shape,
                &d_logits.size,
                &d_logits.position,
                &d_logits.quantity,
                &d_logits.intensity,
            ],
        );
        let relaxed = logits.probabilities(&grid, tau, cfg.color);
        let current = discretize(&relaxed);
        state.loss_history.push(loss);
        state.log.push(StepLog {
            step,
            tau,
            loss,
            argmax: ArgmaxSnapshot {
                shape: format!("{:?}", current.shape),
                size: current.size,
                position: format!("{:?}", current.position),
                quantity: current.quantity,
                intensity: current.intensity,
            },
        });
        state.temperature = tau;
        state.step = step + 1;
    }
    state.logits = logits.clone();
    let final_tau = anneal(cfg.tau_start, cfg.tau_end, cfg.steps, cfg.steps);
    let relaxed = logits.probabilities(&grid, final_tau, cfg.color);
    let spec = discretize(&relaxed);
    Ok((spec, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_endpoints_and_midpoint() {
        assert_eq!(anneal(1.0, 0.1, 0, 100), 1.0);
        assert!((anneal(1.0, 0.1, 100, 100) - 0.1).abs() < 1e-12);
        let mid = anneal(1.0, 0.1, 50, 100);
        assert!((mid - 0.1f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn anneal_is_monotone() {
        let mut last = f64::INFINITY;
        for s in 0..=20 {
            let t = anneal(2.0, 0.05, s, 20);
            assert!(t < last);
            last = t;
        }
    }
}
