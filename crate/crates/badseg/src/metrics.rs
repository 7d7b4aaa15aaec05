//! Attack-effectiveness, utility, and stealth metrics.
//!
//! ASR is the fraction of victim pixels predicted as the target class; PBA
//! and CBA are mIoU with and without the victim pixels masked out. Dataset
//! aggregates pool confusion counts over all samples before computing IoU.
//! Stealth is PSNR, single-scale SSIM (11x11 Gaussian window), and a
//! perceptual distance through a pluggable feature extractor.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::model::tensor::Conv;
use crate::seeding::{self, stream};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("no victim pixels")]
    NoVictimPixels,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all pixels excluded")]
    AllExcluded,
    #[error("empty score set")]
    EmptyScores,
}

// ---------------------------------------------------------------------------
// ASR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AsrCounts {
    pub victim_pixels: u64,
    pub success_pixels: u64,
}

impl AsrCounts {
    pub fn rate(&self) -> f64 {
        if self.victim_pixels == 0 {
            return 0.0;
        }
        self.success_pixels as f64 / self.victim_pixels as f64
    }

    pub fn merge(&mut self, other: &AsrCounts) {
        self.victim_pixels += other.victim_pixels;
        self.success_pixels += other.success_pixels;
    }
}

/// Count victim pixels predicted as the target class. The victim mask is the
/// attack-dependent scoped set built by the label stage from ground truth.
pub fn asr_counts(
    pred: &LabelMap,
    target_class: u8,
    victim_mask: &Array2<bool>,
) -> Result<AsrCounts, MetricError> {
    if pred.0.dim() != victim_mask.dim() {
        return Err(MetricError::ShapeMismatch(format!(
            "pred {:?} vs mask {:?}",
            pred.0.dim(),
            victim_mask.dim()
        )));
    }
    let mut victim = 0u64;
    let mut success = 0u64;
    for (&p, &m) in pred.0.iter().zip(victim_mask.iter()) {
        if m {
            victim += 1;
            if p == target_class {
                success += 1;
            }
        }
    }
    if victim == 0 {
        return Err(MetricError::NoVictimPixels);
    }
    Ok(AsrCounts {
        victim_pixels: victim,
        success_pixels: success,
    })
}

pub fn asr(
    pred: &LabelMap,
    target_class: u8,
    victim_mask: &Array2<bool>,
) -> Result<f64, MetricError> {
    Ok(asr_counts(pred, target_class, victim_mask)?.rate())
}

// ---------------------------------------------------------------------------
// mIoU
// ---------------------------------------------------------------------------

/// Pooled confusion counts; rows = ground truth, cols = prediction.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub k: usize,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: Array2::zeros((k, k)),
            k,
        }
    }

    /// Accumulate one sample, skipping ignored and excluded pixels.
    pub fn add(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        ignore_index: u8,
        exclude: Option<&Array2<bool>>,
    ) -> Result<(), MetricError> {
        if pred.0.dim() != gt.0.dim() {
            return Err(MetricError::ShapeMismatch(format!(
                "pred {:?} vs gt {:?}",
                pred.0.dim(),
                gt.0.dim()
            )));
        }
        if let Some(ex) = exclude {
            if ex.dim() != gt.0.dim() {
                return Err(MetricError::ShapeMismatch("exclude mask".into()));
            }
        }
        for ((r, c), &g) in gt.0.indexed_iter() {
            if g == ignore_index {
                continue;
            }
            if let Some(ex) = exclude {
                if ex[(r, c)] {
                    continue;
                }
            }
            let p = pred.get(r, c);
            if (g as usize) < self.k && (p as usize) < self.k {
                self.counts[(g as usize, p as usize)] += 1;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; classes with an empty union are `None` and excluded
    /// from the mean.
    pub fn iou(&self) -> (f64, Vec<Option<f64>>) {
        let mut per_class = Vec::with_capacity(self.k);
        let mut sum = 0.0;
        let mut n = 0usize;
        for k in 0..self.k {
            let tp = self.counts[(k, k)];
            let fp: u64 = (0..self.k).map(|g| self.counts[(g, k)]).sum::<u64>() - tp;
            let fne: u64 = (0..self.k).map(|p| self.counts[(k, p)]).sum::<u64>() - tp;
            let union = tp + fp + fne;
            if union == 0 {
                per_class.push(None);
            } else {
                let v = tp as f64 / union as f64;
                per_class.push(Some(v));
                sum += v;
                n += 1;
            }
        }
        let miou = if n == 0 { 0.0 } else { sum / n as f64 };
        (miou, per_class)
    }
}

/// Single-pair mIoU. PBA passes the victim mask as `exclude`; CBA passes
/// none.
pub fn miou(
    pred: &LabelMap,
    gt: &LabelMap,
    k: usize,
    ignore_index: u8,
    exclude: Option<&Array2<bool>>,
) -> Result<(f64, Vec<Option<f64>>), MetricError> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt, ignore_index, exclude)?;
    if cm.total() == 0 {
        return Err(MetricError::AllExcluded);
    }
    Ok(cm.iou())
}

// ---------------------------------------------------------------------------
// Stealth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StealthReport {
    /// `None` encodes the +inf sentinel for identical images.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub perceptual: f64,
}

pub fn mse(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// `20 * log10(max / sqrt(mse))`; `None` when the images are identical.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>, max_value: f64) -> Option<f64> {
    let m = mse(a, b);
    if m == 0.0 {
        return None;
    }
    Some(20.0 * (max_value / m.sqrt()).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, averaged over channels and valid window positions.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>, max_value: f64) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::ShapeMismatch("ssim inputs".into()));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut win = 11usize.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    if win == 0 {
        return Err(MetricError::ShapeMismatch("image too small".into()));
    }
    let g1 = gaussian_window(win, 1.5);
    let c1 = (0.01 * max_value).powi(2);
    let c2 = (0.03 * max_value).powi(2);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..c {
        for r0 in 0..=(h - win) {
            for c0 in 0..=(w - win) {
                let mut mu_a = 0.0f64;
                let mut mu_b = 0.0f64;
                let mut aa = 0.0f64;
                let mut bb = 0.0f64;
                let mut ab = 0.0f64;
                for i in 0..win {
                    for j in 0..win {
                        let wgt = g1[i] * g1[j];
                        let va = a[(ch, r0 + i, c0 + j)] as f64;
                        let vb = b[(ch, r0 + i, c0 + j)] as f64;
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Feature extractor for the perceptual distance. The default desk-scale
/// extractor is a fixed, seeded, untrained conv stack: rank orderings are
/// meaningful, absolute values are not comparable to trained-network scores.
pub trait PerceptualExtractor: Send + Sync {
    fn features(&self, image: &Array3<f32>) -> Vec<Array3<f32>>;
}

pub struct SeededConvExtractor {
    layers: Vec<Conv>,
    input_scale: f32,
}

impl SeededConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeding::rng(seed, &[stream::PERCEPTUAL]);
        let layers = vec![
            Conv::new(3, 8, 3, 2, 1, &mut rng),
            Conv::new(8, 16, 3, 2, 1, &mut rng),
            Conv::new(16, 16, 3, 2, 1, &mut rng),
        ];
        Self {
            layers,
            input_scale: 255.0,
        }
    }
}

impl PerceptualExtractor for SeededConvExtractor {
    fn features(&self, image: &Array3<f32>) -> Vec<Array3<f32>> {
        let mut x = image.mapv(|v| v / self.input_scale - 0.5);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (pre, _) = layer.forward(&x);
            x = pre.mapv(|v| v.max(0.0));
            out.push(x.clone());
        }
        out
    }
}

/// Normalized feature-space distance: each layer's feature tensor is
/// unit-normalized, and squared differences average over layers. Symmetric
/// and zero on identical inputs.
pub fn perceptual_distance(
    extractor: &dyn PerceptualExtractor,
    a: &Array3<f32>,
    b: &Array3<f32>,
) -> f64 {
    let fa = extractor.features(a);
    let fb = extractor.features(b);
    let mut total = 0.0f64;
    for (xa, xb) in fa.iter().zip(fb.iter()) {
        let na = (xa.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt().max(1e-12);
        let nb = (xb.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt().max(1e-12);
        let mut d = 0.0f64;
        for (&va, &vb) in xa.iter().zip(xb.iter()) {
            let diff = va as f64 / na - vb as f64 / nb;
            d += diff * diff;
        }
        total += d / xa.len() as f64;
    }
    total / fa.len() as f64
}

pub fn stealth(
    clean: &Array3<f32>,
    poisoned: &Array3<f32>,
    max_value: f64,
    extractor: &dyn PerceptualExtractor,
) -> Result<StealthReport, MetricError> {
    if clean.dim() != poisoned.dim() {
        return Err(MetricError::ShapeMismatch("stealth inputs".into()));
    }
    Ok(StealthReport {
        psnr_db: psnr(clean, poisoned, max_value),
        ssim: ssim(clean, poisoned, max_value)?,
        perceptual: perceptual_distance(extractor, clean, poisoned),
    })
}

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

/// Threshold-free AUC with the convention that positives should score
/// higher. Mann-Whitney with average ranks for ties.
pub fn auc(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64, MetricError> {
    if positive_scores.is_empty() || negative_scores.is_empty() {
        return Err(MetricError::EmptyScores);
    }
    let n_pos = positive_scores.len();
    let n_neg = negative_scores.len();
    let mut all: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(negative_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Average rank for the tie group [i, j], 1-based ranks.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// Aggregate attack report over a test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub attack: String,
    pub asr: f64,
    pub pba: f64,
    pub cba: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub stealth: StealthReport,
    pub victim_pixel_count: u64,
    pub success_pixel_count: u64,
    /// Test samples that contained victim pixels and were triggered.
    pub evaluated_samples: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_label(rng: &mut impl Rng, h: usize, w: usize, k: u8) -> LabelMap {
        let mut l = LabelMap::filled(h, w, 0);
        l.0.mapv_inplace(|_| rng.gen_range(0..k));
        l
    }

    #[test]
    fn asr_basic_counts() {
        let mut pred = LabelMap::filled(4, 4, 0);
        let mut mask = Array2::from_elem((4, 4), false);
        // 8 victim pixels, 3 predicted target(=2).
        for i in 0..8 {
            mask[(i / 4, i % 4)] = true;
        }
        for i in 0..3 {
            pred.0[(i / 4, i % 4)] = 2;
        }
        assert!((asr(&pred, 2, &mask).unwrap() - 0.375).abs() < 1e-12);
        let all = LabelMap::filled(4, 4, 2);
        assert_eq!(asr(&all, 2, &mask).unwrap(), 1.0);
    }

    #[test]
    fn asr_empty_mask_errors() {
        let pred = LabelMap::filled(4, 4, 0);
        let mask = Array2::from_elem((4, 4), false);
        assert!(matches!(
            asr(&pred, 2, &mask),
            Err(MetricError::NoVictimPixels)
        ));
    }

    #[test]
    fn asr_matches_bruteforce_oracle() {
        let mut rng = crate::seeding::rng(5, &[1]);
        for _ in 0..500 {
            let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
            let pred = random_label(&mut rng, h, w, 4);
            let mask = Array2::from_shape_fn((h, w), |_| rng.gen_bool(0.4));
            let target = rng.gen_range(0..4u8);
            let oracle = {
                let mut v = 0u64;
                let mut s = 0u64;
                for r in 0..h {
                    for c in 0..w {
                        if mask[(r, c)] {
                            v += 1;
                            if pred.get(r, c) == target {
                                s += 1;
                            }
                        }
                    }
                }
                (v, s)
            };
            match asr_counts(&pred, target, &mask) {
                Ok(counts) => {
                    assert_eq!((counts.victim_pixels, counts.success_pixels), oracle);
                }
                Err(_) => assert_eq!(oracle.0, 0),
            }
        }
    }

    #[test]
    fn miou_perfect_prediction_is_one() {
        let mut rng = crate::seeding::rng(6, &[1]);
        let gt = random_label(&mut rng, 8, 8, 4);
        let (m, _) = miou(&gt.clone(), &gt, 4, 255, None).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn miou_empty_union_class_excluded() {
        // Classes 2..3 absent from both pred and gt: mean over present only.
        let gt = LabelMap::filled(4, 4, 0);
        let mut pred = LabelMap::filled(4, 4, 0);
        pred.0[(0, 0)] = 1;
        let (m, per) = miou(&pred, &gt, 4, 255, None).unwrap();
        assert!(per[2].is_none() && per[3].is_none());
        // class0: 15/16, class1: 0/1.
        assert!((m - (15.0 / 16.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn miou_matches_pixel_loop_oracle() {
        let mut rng = crate::seeding::rng(7, &[1]);
        for _ in 0..300 {
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let k = 4usize;
            let gt = random_label(&mut rng, h, w, k as u8);
            let pred = random_label(&mut rng, h, w, k as u8);
            let exclude = Array2::from_shape_fn((h, w), |_| rng.gen_bool(0.2));
            let got = miou(&pred, &gt, k, 255, Some(&exclude));
            // Pixel-loop oracle.
            let mut inter = vec![0u64; k];
            let mut pc = vec![0u64; k];
            let mut gc = vec![0u64; k];
            let mut any = false;
            for r in 0..h {
                for c in 0..w {
                    if exclude[(r, c)] {
                        continue;
                    }
                    any = true;
                    let (g, p) = (gt.get(r, c) as usize, pred.get(r, c) as usize);
                    gc[g] += 1;
                    pc[p] += 1;
                    if g == p {
                        inter[g] += 1;
                    }
                }
            }
            if !any {
                assert!(got.is_err());
                continue;
            }
            let (m, _) = got.unwrap();
            let mut sum = 0.0;
            let mut n = 0;
            for c in 0..k {
                let union = gc[c] + pc[c] - inter[c];
                if union > 0 {
                    sum += inter[c] as f64 / union as f64;
                    n += 1;
                }
            }
            let oracle = if n == 0 { 0.0 } else { sum / n as f64 };
            assert!((m - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_closed_form_shift() {
        // Uniform +16 shift on the 8-bit range: 20*log10(255/16).
        let a = Array3::from_elem((3, 16, 16), 100.0f32);
        let b = a.mapv(|v| v + 16.0);
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-9);
        assert!((p - 24.05).abs() < 0.01);
    }

    #[test]
    fn psnr_identical_is_sentinel() {
        let a = Array3::from_elem((3, 8, 8), 42.0f32);
        assert!(psnr(&a, &a, 255.0).is_none());
    }

    #[test]
    fn psnr_monotone_in_noise_amplitude() {
        let mut rng = crate::seeding::rng(8, &[1]);
        let a = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0f32..255.0));
        let noise = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(-1.0f32..1.0));
        let mut last = f64::INFINITY;
        for amp in [1.0f32, 2.0, 4.0, 8.0, 16.0] {
            let b = &a + &noise.mapv(|v| v * amp);
            let p = psnr(&a, &b, 255.0).unwrap();
            assert!(p < last, "psnr should fall as noise grows");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = crate::seeding::rng(9, &[1]);
        let a = Array3::from_shape_fn((3, 24, 24), |_| rng.gen_range(0.0f32..255.0));
        let b = Array3::from_shape_fn((3, 24, 24), |_| rng.gen_range(0.0f32..255.0));
        assert_eq!(ssim(&a, &a, 255.0).unwrap(), 1.0);
        let ab = ssim(&a, &b, 255.0).unwrap();
        let ba = ssim(&b, &a, 255.0).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab < 1.0);
    }

    #[test]
    fn perceptual_zero_on_identical_and_symmetric() {
        let ex = SeededConvExtractor::new(3);
        let mut rng = crate::seeding::rng(10, &[1]);
        let a = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0f32..255.0));
        let b = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0f32..255.0));
        assert_eq!(perceptual_distance(&ex, &a, &a), 0.0);
        let ab = perceptual_distance(&ex, &a, &b);
        let ba = perceptual_distance(&ex, &b, &a);
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = crate::seeding::rng(11, &[1]);
        for _ in 0..200 {
            let np = rng.gen_range(1..40);
            let nn = rng.gen_range(1..40);
            // Coarse grid of values forces ties.
            let pos: Vec<f64> = (0..np).map(|_| rng.gen_range(0..10) as f64).collect();
            let neg: Vec<f64> = (0..nn).map(|_| rng.gen_range(0..10) as f64).collect();
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
            let oracle = acc / (np * nn) as f64;
            assert!((fast - oracle).abs() < 1e-9, "fast {fast} oracle {oracle}");
        }
    }

    #[test]
    fn pba_leq_unexcluded_miou_on_constructed_case() {
        // The only erroneous region is the excluded one: excluding it can
        // only raise the score.
        let gt = LabelMap::filled(8, 8, 0);
        let mut pred = LabelMap::filled(8, 8, 0);
        let mut victim = Array2::from_elem((8, 8), false);
        for r in 0..3 {
            for c in 0..3 {
                pred.0[(r, c)] = 1;
                victim[(r, c)] = true;
            }
        }
        let (with_exclusion, _) = miou(&pred, &gt, 2, 255, Some(&victim)).unwrap();
        let (without, _) = miou(&pred, &gt, 2, 255, None).unwrap();
        assert!(without <= with_exclusion);
        assert_eq!(with_exclusion, 1.0);
    }
}
