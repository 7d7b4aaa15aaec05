//! Mini-batch training of the tiny reference net.
//!
//! Per-sample forward/backward passes run in parallel and the gradients
//! reduce in index order, so training is bit-deterministic for a fixed seed
//! on a single machine.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::model::tiny::{ParamGrads, TinySegNet};
use crate::model::ModelError;
use crate::seeding::{self, stream};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Horizontal-flip augmentation.
    #[serde(default)]
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            step_size: 3e-3,
            batch_size: 16,
            seed: 0,
            hflip: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
}

/// Adam state over the net's parameter tensors.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    mw: Vec<Array2<f32>>,
    vw: Vec<Array2<f32>>,
    mb: Vec<Array1<f32>>,
    vb: Vec<Array1<f32>>,
}

impl Adam {
    pub fn new(net: &TinySegNet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            mw: net.convs.iter().map(|c| Array2::zeros(c.w.raw_dim())).collect(),
            vw: net.convs.iter().map(|c| Array2::zeros(c.w.raw_dim())).collect(),
            mb: net.convs.iter().map(|c| Array1::zeros(c.b.raw_dim())).collect(),
            vb: net.convs.iter().map(|c| Array1::zeros(c.b.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, net: &mut TinySegNet, grads: &ParamGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (
            self.beta1 as f32,
            self.beta2 as f32,
            self.eps as f32,
            self.lr as f32,
        );
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        for i in 0..net.convs.len() {
            azip_update(
                net.convs[i].w.as_slice_mut().unwrap(),
                self.mw[i].as_slice_mut().unwrap(),
                self.vw[i].as_slice_mut().unwrap(),
                grads.dw[i].as_slice().unwrap(),
                b1, b2, eps, lr, bc1, bc2,
            );
            azip_update(
                net.convs[i].b.as_slice_mut().unwrap(),
                self.mb[i].as_slice_mut().unwrap(),
                self.vb[i].as_slice_mut().unwrap(),
                grads.db[i].as_slice().unwrap(),
                b1, b2, eps, lr, bc1, bc2,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    p: &mut [f32],
    m: &mut [f32],
    v: &mut [f32],
    g: &[f32],
    b1: f32,
    b2: f32,
    eps: f32,
    lr: f32,
    bc1: f32,
    bc2: f32,
) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

fn hflip_sample(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    let mut image = s.image.clone();
    let mut label = s.label.clone();
    for r in 0..h {
        for c in 0..w / 2 {
            for ch in 0..3 {
                image.swap((ch, r, c), (ch, r, w - 1 - c));
            }
            label.0.swap((r, c), (r, w - 1 - c));
        }
    }
    Sample {
        id: s.id.clone(),
        image,
        label,
    }
}

/// Minimize mean cross-entropy over `samples` (the poisoned union of clean
/// and triggered samples, or a plain clean set).
pub fn fit(
    net: &mut TinySegNet,
    samples: &[Sample],
    ignore_index: u8,
    cfg: &TrainConfig,
) -> Result<TrainStats, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::BadInput("no training samples".into()));
    }
    let mut adam = Adam::new(net, cfg.step_size);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = seeding::rng(cfg.seed, &[stream::TRAIN, epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let flip_mask: Vec<bool> = batch
                .iter()
                .map(|_| cfg.hflip && rand::Rng::gen_bool(&mut rng, 0.5))
                .collect();
            let results: Vec<Result<(f64, ParamGrads), ModelError>> = batch
                .par_iter()
                .zip(flip_mask.par_iter())
                .map(|(&idx, &flip)| {
                    let s = if flip {
                        hflip_sample(&samples[idx])
                    } else {
                        samples[idx].clone()
                    };
                    let (loss, grads, _) = net.loss_grads(&s.image, &s.label, ignore_index, false)?;
                    Ok((loss, grads))
                })
                .collect();
            let mut batch_grads = ParamGrads::zeros_like(net);
            let mut batch_loss = 0.0f64;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(ModelError::Diverged { epoch, step });
                }
                batch_loss += loss;
                batch_grads.add(&grads);
            }
            let n = batch.len() as f64;
            batch_grads.scale(1.0 / n as f32);
            adam.step(net, &batch_grads);
            epoch_loss += batch_loss;
            seen += batch.len();
        }
        epoch_losses.push(epoch_loss / seen as f64);
    }
    Ok(TrainStats { epoch_losses })
}

/// Mean per-sample loss under the current model, in input order.
pub fn per_sample_losses(
    net: &TinySegNet,
    samples: &[Sample],
    ignore_index: u8,
) -> Vec<f64> {
    samples
        .par_iter()
        .map(|s| net.loss(&s.image, &s.label, ignore_index).unwrap_or(f64::NAN))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticConfig};

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let samples = make_synthetic(&SyntheticConfig::new(24, 32, 32, 4, 8)).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            step_size: 3e-3,
            batch_size: 8,
            seed: 1,
            hflip: false,
        };
        let mut net_a = TinySegNet::new(4, 77);
        let stats_a = fit(&mut net_a, &samples, 255, &cfg).unwrap();
        assert!(
            stats_a.epoch_losses.last().unwrap() < &stats_a.epoch_losses[0],
            "loss should decrease: {:?}",
            stats_a.epoch_losses
        );
        let mut net_b = TinySegNet::new(4, 77);
        let stats_b = fit(&mut net_b, &samples, 255, &cfg).unwrap();
        assert_eq!(stats_a.epoch_losses, stats_b.epoch_losses);
        for (ca, cb) in net_a.convs.iter().zip(&net_b.convs) {
            assert_eq!(ca.w, cb.w);
            assert_eq!(ca.b, cb.b);
        }
    }
}
