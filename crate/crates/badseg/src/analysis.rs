//! Class-center computation and victim-target pair ranking.
//!
//! Per-batch class centers are the mean pre-classifier feature vector over
//! each class's pixels; a global matrix averages the per-batch centers.
//! Pairwise Euclidean distances, normalized by the largest off-diagonal
//! entry, rank candidate victim-target pairs; each pair is annotated with
//! the attack vectors its kind combination supports.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{ClassKind, ClassTaxonomy, LabelMap};
use crate::labelops::CoarseVector;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("feature map {fh}x{fw} larger than label {lh}x{lw}")]
    Misaligned {
        fh: usize,
        fw: usize,
        lh: usize,
        lw: usize,
    },
    #[error("need at least {needed} valid classes, found {found}")]
    TooFewClasses { needed: usize, found: usize },
    #[error("no batches")]
    NoBatches,
}

/// Per-class feature centroids with observation counts.
#[derive(Debug, Clone)]
pub struct ClassCenterMatrix {
    /// K x C, row k finite iff `valid[k]`.
    pub centers: Array2<f64>,
    pub counts: Vec<u64>,
    pub valid: Vec<bool>,
}

impl ClassCenterMatrix {
    pub fn num_classes(&self) -> usize {
        self.valid.len()
    }
}

/// Nearest-neighbor downsample of a label map to the feature resolution.
/// Hard class identities are preserved exactly.
pub fn downsample_label(label: &LabelMap, fh: usize, fw: usize) -> LabelMap {
    let (h, w) = (label.height(), label.width());
    let mut out = LabelMap::filled(fh, fw, 0);
    for r in 0..fh {
        for c in 0..fw {
            let sr = ((r as f64 + 0.5) * h as f64 / fh as f64 - 0.5)
                .round()
                .clamp(0.0, h as f64 - 1.0) as usize;
            let sc = ((c as f64 + 0.5) * w as f64 / fw as f64 - 0.5)
                .round()
                .clamp(0.0, w as f64 - 1.0) as usize;
            out.0[(r, c)] = label.get(sr, sc);
        }
    }
    out
}

/// Mean feature vector per class over one image. The label map is
/// nearest-neighbor downsampled when the feature map is coarser.
pub fn class_centers(
    features: &Array3<f32>,
    label: &LabelMap,
    k: usize,
    ignore_index: u8,
) -> Result<ClassCenterMatrix, AnalysisError> {
    let (c, fh, fw) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let (lh, lw) = (label.height(), label.width());
    if fh > lh || fw > lw {
        return Err(AnalysisError::Misaligned {
            fh,
            fw,
            lh,
            lw,
        });
    }
    let label = if (fh, fw) == (lh, lw) {
        label.clone()
    } else {
        downsample_label(label, fh, fw)
    };
    let mut sums = Array2::<f64>::zeros((k, c));
    let mut counts = vec![0u64; k];
    for r in 0..fh {
        for cc in 0..fw {
            let t = label.get(r, cc);
            if t == ignore_index || t as usize >= k {
                continue;
            }
            counts[t as usize] += 1;
            for ch in 0..c {
                sums[(t as usize, ch)] += features[(ch, r, cc)] as f64;
            }
        }
    }
    let mut centers = Array2::<f64>::from_elem((k, c), f64::NAN);
    let mut valid = vec![false; k];
    for cls in 0..k {
        if counts[cls] > 0 {
            valid[cls] = true;
            for ch in 0..c {
                centers[(cls, ch)] = sums[(cls, ch)] / counts[cls] as f64;
            }
        }
    }
    Ok(ClassCenterMatrix {
        centers,
        counts,
        valid,
    })
}

/// Unweighted per-class mean of per-batch centers over the batches where the
/// class was observed.
pub fn global_centers(batches: &[ClassCenterMatrix]) -> Result<ClassCenterMatrix, AnalysisError> {
    let first = batches.first().ok_or(AnalysisError::NoBatches)?;
    let k = first.num_classes();
    let c = first.centers.ncols();
    let mut sums = Array2::<f64>::zeros((k, c));
    let mut batch_counts = vec![0u64; k];
    let mut counts = vec![0u64; k];
    for b in batches {
        for cls in 0..k {
            if b.valid[cls] {
                batch_counts[cls] += 1;
                counts[cls] += b.counts[cls];
                for ch in 0..c {
                    sums[(cls, ch)] += b.centers[(cls, ch)];
                }
            }
        }
    }
    let mut centers = Array2::<f64>::from_elem((k, c), f64::NAN);
    let mut valid = vec![false; k];
    for cls in 0..k {
        if batch_counts[cls] > 0 {
            valid[cls] = true;
            for ch in 0..c {
                centers[(cls, ch)] = sums[(cls, ch)] / batch_counts[cls] as f64;
            }
        }
    }
    Ok(ClassCenterMatrix {
        centers,
        counts,
        valid,
    })
}

/// Pixel-count-weighted alternative to [`global_centers`].
pub fn global_centers_weighted(
    batches: &[ClassCenterMatrix],
) -> Result<ClassCenterMatrix, AnalysisError> {
    let first = batches.first().ok_or(AnalysisError::NoBatches)?;
    let k = first.num_classes();
    let c = first.centers.ncols();
    let mut sums = Array2::<f64>::zeros((k, c));
    let mut counts = vec![0u64; k];
    for b in batches {
        for cls in 0..k {
            if b.valid[cls] {
                counts[cls] += b.counts[cls];
                for ch in 0..c {
                    sums[(cls, ch)] += b.centers[(cls, ch)] * b.counts[cls] as f64;
                }
            }
        }
    }
    let mut centers = Array2::<f64>::from_elem((k, c), f64::NAN);
    let mut valid = vec![false; k];
    for cls in 0..k {
        if counts[cls] > 0 {
            valid[cls] = true;
            for ch in 0..c {
                centers[(cls, ch)] = sums[(cls, ch)] / counts[cls] as f64;
            }
        }
    }
    Ok(ClassCenterMatrix {
        centers,
        counts,
        valid,
    })
}

/// One ranked victim-target candidate pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedPair {
    pub class_a: u8,
    pub class_b: u8,
    /// Distance normalized by the largest off-diagonal distance.
    pub distance: f64,
    pub suitable: Vec<CoarseVector>,
}

#[derive(Debug, Clone)]
pub struct DistanceRanking {
    /// K x K symmetric matrix of normalized distances (NaN for invalid rows).
    pub distance_matrix: Array2<f64>,
    /// Ascending by distance.
    pub ranked_pairs: Vec<RankedPair>,
}

fn suitable_vectors(a: ClassKind, b: ClassKind) -> Vec<CoarseVector> {
    match (a, b) {
        (ClassKind::Object, ClassKind::Object) => vec![CoarseVector::O2O],
        (ClassKind::Stuff, ClassKind::Stuff) => vec![CoarseVector::B2B],
        _ => vec![CoarseVector::O2B, CoarseVector::B2O],
    }
}

/// Rank all valid class pairs by normalized center distance.
pub fn rank_pairs(
    centers: &ClassCenterMatrix,
    taxonomy: &ClassTaxonomy,
) -> Result<DistanceRanking, AnalysisError> {
    let k = centers.num_classes();
    let n_valid = centers.valid.iter().filter(|&&v| v).count();
    if n_valid < 2 {
        return Err(AnalysisError::TooFewClasses {
            needed: 2,
            found: n_valid,
        });
    }
    let mut raw = Array2::<f64>::from_elem((k, k), f64::NAN);
    let mut max_off = 0.0f64;
    for i in 0..k {
        if !centers.valid[i] {
            continue;
        }
        raw[(i, i)] = 0.0;
        for j in (i + 1)..k {
            if !centers.valid[j] {
                continue;
            }
            let mut d2 = 0.0f64;
            for ch in 0..centers.centers.ncols() {
                let diff = centers.centers[(i, ch)] - centers.centers[(j, ch)];
                d2 += diff * diff;
            }
            let d = d2.sqrt();
            raw[(i, j)] = d;
            raw[(j, i)] = d;
            max_off = max_off.max(d);
        }
    }
    let scale = if max_off > 0.0 { max_off } else { 1.0 };
    let distance_matrix = raw.mapv(|v| v / scale);
    let mut ranked_pairs = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            if centers.valid[i] && centers.valid[j] {
                let (ka, kb) = (
                    taxonomy.kind_of(i as u8).expect("taxonomy covers classes"),
                    taxonomy.kind_of(j as u8).expect("taxonomy covers classes"),
                );
                ranked_pairs.push(RankedPair {
                    class_a: i as u8,
                    class_b: j as u8,
                    distance: distance_matrix[(i, j)],
                    suitable: suitable_vectors(ka, kb),
                });
            }
        }
    }
    ranked_pairs.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.class_a, a.class_b).cmp(&(b.class_a, b.class_b)))
    });
    Ok(DistanceRanking {
        distance_matrix,
        ranked_pairs,
    })
}

/// Render the ranking as a tab-separated table:
/// rank, class_i, class_j, distance, suitable_vectors.
pub fn ranking_table(ranking: &DistanceRanking, taxonomy: &ClassTaxonomy) -> String {
    let mut out = String::from("rank\tclass_i\tclass_j\tdistance\tsuitable_vectors\n");
    for (i, p) in ranking.ranked_pairs.iter().enumerate() {
        let vs: Vec<String> = p.suitable.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{}\n",
            i + 1,
            taxonomy.name_of(p.class_a).unwrap_or("?"),
            taxonomy.name_of(p.class_b).unwrap_or("?"),
            p.distance,
            vs.join(",")
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// Average ranks (1-based) with ties sharing their mean rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &id in &idx[i..=j] {
            ranks[id] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Kendall tau-b with tie corrections.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (concordant + discordant + ties_x) as f64;
    let n1 = (concordant + discordant + ties_y) as f64;
    if n0 == 0.0 || n1 == 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / (n0 * n1).sqrt())
}
