//! Beatrix adapted to segmentation: Gramian statistics of the
//! pre-classifier feature map, grouped per image by its main class (largest
//! pixel area) or by one fixed selected class.
//!
//! For each order p the Gram matrix of the signed p-th-power feature map is
//! reduced to its upper triangle; deviation from a clean reference group is
//! a median/MAD distance, thresholded by an n-MAD rule over the clean
//! evaluation scores.

use std::collections::BTreeMap;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Sample};
use crate::defense::{DefenseError, DetectionReport};
use crate::model::SegmentationModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Group by the class occupying the largest pixel area in the label.
    MainClass,
    /// Group every sample under one fixed class.
    SelectedClass(u8),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeatrixConfig {
    pub grouping: Grouping,
    pub gram_orders: Vec<u32>,
    /// Flag samples beyond median + n * 1.4826 * MAD of the clean scores.
    pub n_mad: f64,
}

impl Default for BeatrixConfig {
    fn default() -> Self {
        Self {
            grouping: Grouping::MainClass,
            gram_orders: vec![1, 2, 3, 4],
            n_mad: 3.0,
        }
    }
}

/// Largest-area class of a label map (ties to the lowest id).
pub fn main_class(label: &LabelMap, k: usize, ignore_index: u8) -> u8 {
    let mut counts = vec![0u64; k];
    for &v in label.0.iter() {
        if v != ignore_index && (v as usize) < k {
            counts[v as usize] += 1;
        }
    }
    counts
        .iter()
        .enumerate()
        .max_by_key(|(i, &c)| (c, std::cmp::Reverse(*i)))
        .map(|(i, _)| i as u8)
        .unwrap_or(0)
}

fn signed_pow(x: f64, p: u32) -> f64 {
    if p % 2 == 1 {
        x.abs().powi(p as i32) * x.signum()
    } else {
        x.abs().powi(p as i32)
    }
}

fn signed_root(x: f64, p: u32) -> f64 {
    x.abs().powf(1.0 / p as f64) * x.signum()
}

/// Upper triangle (incl. diagonal) of the order-p Gram matrix of a
/// `(C, h, w)` feature map: `G = signed_root((F^p)(F^p)^T / hw, p)`.
pub fn gram_vector(features: &Array3<f32>, order: u32) -> Vec<f64> {
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let hw = (h * w) as f64;
    let powered: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            features
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .map(|&v| signed_pow(v as f64, order))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(c * (c + 1) / 2);
    for i in 0..c {
        for j in i..c {
            let dot: f64 = powered[i]
                .iter()
                .zip(powered[j].iter())
                .map(|(&a, &b)| a * b)
                .sum();
            out.push(signed_root(dot / hw, order));
        }
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-group clean statistics: per-order median and MAD vectors.
pub struct GroupStats {
    per_order: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Clean reference statistics keyed by group.
pub struct BeatrixReference {
    groups: BTreeMap<u8, GroupStats>,
    orders: Vec<u32>,
}

impl BeatrixReference {
    /// Fit reference statistics from clean samples.
    pub fn fit(
        model: &dyn SegmentationModel,
        clean_ref: &[Sample],
        cfg: &BeatrixConfig,
        k: usize,
        ignore_index: u8,
    ) -> Result<Self, DefenseError> {
        if clean_ref.is_empty() {
            return Err(DefenseError::EmptySet("clean reference"));
        }
        let grams: Vec<(u8, Vec<Vec<f64>>)> = clean_ref
            .par_iter()
            .map(|s| {
                let group = match cfg.grouping {
                    Grouping::MainClass => main_class(&s.label, k, ignore_index),
                    Grouping::SelectedClass(c) => c,
                };
                let features = model.forward(&s.image).features;
                let g: Vec<Vec<f64>> = cfg
                    .gram_orders
                    .iter()
                    .map(|&p| gram_vector(&features, p))
                    .collect();
                (group, g)
            })
            .collect();
        let mut by_group: BTreeMap<u8, Vec<&Vec<Vec<f64>>>> = BTreeMap::new();
        for (g, v) in &grams {
            by_group.entry(*g).or_default().push(v);
        }
        let mut groups = BTreeMap::new();
        for (g, members) in by_group {
            let mut per_order = Vec::with_capacity(cfg.gram_orders.len());
            for oi in 0..cfg.gram_orders.len() {
                let dim = members[0][oi].len();
                let mut med = vec![0.0f64; dim];
                let mut mad = vec![0.0f64; dim];
                for d in 0..dim {
                    let mut col: Vec<f64> = members.iter().map(|m| m[oi][d]).collect();
                    med[d] = median(&mut col);
                    let mut dev: Vec<f64> = col.iter().map(|v| (v - med[d]).abs()).collect();
                    mad[d] = median(&mut dev);
                }
                per_order.push((med, mad));
            }
            groups.insert(g, GroupStats { per_order });
        }
        Ok(Self {
            groups,
            orders: cfg.gram_orders.clone(),
        })
    }

    /// Robust deviation of one feature map from its group's statistics, or
    /// `None` when the group has no reference.
    pub fn deviation(&self, features: &Array3<f32>, group: u8) -> Option<f64> {
        let stats = self.groups.get(&group)?;
        let mut per_order_scores = Vec::with_capacity(self.orders.len());
        for (oi, &p) in self.orders.iter().enumerate() {
            let g = gram_vector(features, p);
            let (med, mad) = &stats.per_order[oi];
            let mut normalized: Vec<f64> = g
                .iter()
                .zip(med.iter().zip(mad.iter()))
                .map(|(&v, (&m, &d))| (v - m).abs() / (1.4826 * d + 1e-12))
                .collect();
            per_order_scores.push(median(&mut normalized));
        }
        Some(per_order_scores.iter().sum::<f64>() / per_order_scores.len() as f64)
    }
}

pub fn beatrix_detect(
    model: &dyn SegmentationModel,
    clean_ref: &[Sample],
    clean_eval: &[Sample],
    poisoned_eval: &[Sample],
    k: usize,
    ignore_index: u8,
    cfg: &BeatrixConfig,
) -> Result<DetectionReport, DefenseError> {
    let reference = BeatrixReference::fit(model, clean_ref, cfg, k, ignore_index)?;
    let mut skipped = Vec::new();
    let score_set = |set: &[Sample]| -> (Vec<(String, f64)>, Vec<String>) {
        let scored: Vec<(String, Option<f64>)> = set
            .par_iter()
            .map(|s| {
                let group = match cfg.grouping {
                    Grouping::MainClass => main_class(&s.label, k, ignore_index),
                    Grouping::SelectedClass(c) => c,
                };
                let features = model.forward(&s.image).features;
                (s.id.clone(), reference.deviation(&features, group))
            })
            .collect();
        let mut ok = Vec::new();
        let mut skip = Vec::new();
        for (id, s) in scored {
            match s {
                Some(v) => ok.push((id, v)),
                None => skip.push(id),
            }
        }
        (ok, skip)
    };
    let (clean_scores, skip_c) = score_set(clean_eval);
    let (poisoned_scores, skip_p) = score_set(poisoned_eval);
    skipped.extend(skip_c);
    skipped.extend(skip_p);
    if clean_scores.is_empty() || poisoned_scores.is_empty() {
        return Err(DefenseError::EmptySet("scored evaluation sets"));
    }
    let clean_vals: Vec<f64> = clean_scores.iter().map(|(_, s)| *s).collect();
    let med = median(&mut clean_vals.clone());
    let mut dev: Vec<f64> = clean_vals.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&mut dev);
    let threshold = med + cfg.n_mad * 1.4826 * mad;
    DetectionReport::build(
        "beatrix",
        clean_scores,
        poisoned_scores,
        threshold,
        true,
        skipped,
    )
}
