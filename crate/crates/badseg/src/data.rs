//! Datasets, class taxonomy, splits, and the synthetic generator.
//!
//! Datasets are directories of paired files: `images/<id>.png` (8-bit RGB)
//! and `labels/<id>.png` (8-bit single-channel, one class index per pixel,
//! Cityscapes-style). The taxonomy is a TOML file listing id/name/kind
//! entries plus the ignore index.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::{self, stream};

/// Default ignore index (Cityscapes convention).
pub const DEFAULT_IGNORE_INDEX: u8 = 255;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("taxonomy invalid: {0}")]
    Taxonomy(String),
    #[error("missing pair for stem `{0}`")]
    MissingPair(String),
    #[error("sample `{sample}`: invalid class index {value}")]
    InvalidClassIndex { sample: String, value: u8 },
    #[error("sample `{sample}`: image is {image_h}x{image_w} but label is {label_h}x{label_w}")]
    DimensionMismatch {
        sample: String,
        image_h: usize,
        image_w: usize,
        label_h: usize,
        label_w: usize,
    },
    #[error("synthetic config invalid: {0}")]
    SyntheticConfig(String),
    #[error("split invalid: {0}")]
    Split(String),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether a class is a countable object or an amorphous stuff region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Object,
    Stuff,
}

impl fmt::Display for ClassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassKind::Object => write!(f, "object"),
            ClassKind::Stuff => write!(f, "stuff"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
    pub kind: ClassKind,
}

/// Ordered class list with dense ids `0..K-1` plus an ignore index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    #[serde(rename = "class")]
    classes: Vec<ClassDef>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
}

fn default_ignore() -> u8 {
    DEFAULT_IGNORE_INDEX
}

impl ClassTaxonomy {
    pub fn new(classes: Vec<ClassDef>, ignore_index: u8) -> Result<Self, DataError> {
        let t = Self {
            classes,
            ignore_index,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<(), DataError> {
        let k = self.classes.len();
        if k == 0 {
            return Err(DataError::Taxonomy("no classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(DataError::Taxonomy(format!(
                    "class ids must be dense 0..K-1; found id {} at position {i}",
                    c.id
                )));
            }
        }
        if (self.ignore_index as usize) < k {
            return Err(DataError::Taxonomy(format!(
                "ignore_index {} collides with a class id",
                self.ignore_index
            )));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != k {
            return Err(DataError::Taxonomy("duplicate class names".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn kind_of(&self, id: u8) -> Option<ClassKind> {
        self.classes.get(id as usize).map(|c| c.kind)
    }

    pub fn name_of(&self, id: u8) -> Option<&str> {
        self.classes.get(id as usize).map(|c| c.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    /// True if `v` is a valid label value (class id or ignore index).
    pub fn is_valid_label(&self, v: u8) -> bool {
        (v as usize) < self.classes.len() || v == self.ignore_index
    }

    pub fn from_toml_str(s: &str) -> Result<Self, DataError> {
        let t: ClassTaxonomy =
            toml::from_str(s).map_err(|e| DataError::Taxonomy(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("taxonomy serializes")
    }

    /// The default four-class synthetic taxonomy: two stuff backgrounds and
    /// two object classes, the minimum covering all four coarse vectors.
    pub fn synthetic_default() -> Self {
        Self::synthetic(4).expect("K=4 is valid")
    }

    /// Synthetic taxonomy with two stuff classes and `k - 2` object classes.
    pub fn synthetic(k: usize) -> Result<Self, DataError> {
        if k < 4 {
            return Err(DataError::Taxonomy(format!(
                "synthetic taxonomy needs K >= 4, got {k}"
            )));
        }
        if k > 200 {
            return Err(DataError::Taxonomy("synthetic taxonomy supports K <= 200".into()));
        }
        let mut classes = vec![
            ClassDef {
                id: 0,
                name: "bg-stuff-a".into(),
                kind: ClassKind::Stuff,
            },
            ClassDef {
                id: 1,
                name: "bg-stuff-b".into(),
                kind: ClassKind::Stuff,
            },
        ];
        for i in 2..k {
            classes.push(ClassDef {
                id: i as u8,
                name: format!("obj-{}", (b'a' + (i - 2) as u8) as char),
                kind: ClassKind::Object,
            });
        }
        Self::new(classes, DEFAULT_IGNORE_INDEX)
    }
}

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap(pub Array2<u8>);

impl LabelMap {
    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        LabelMap(Array2::from_elem((h, w), v))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.0[(r, c)]
    }

    /// Count of pixels labelled `class_id`.
    pub fn class_count(&self, class_id: u8) -> usize {
        self.0.iter().filter(|&&v| v == class_id).count()
    }

    /// Boolean mask of pixels labelled `class_id`.
    pub fn class_mask(&self, class_id: u8) -> Array2<bool> {
        self.0.map(|&v| v == class_id)
    }
}

/// One image/label pair. Images are `(3, H, W)` f32 in `[0, max_value]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub label: LabelMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    fn check_consistent(&self) -> Result<(), DataError> {
        let (ih, iw) = (self.height(), self.width());
        let (lh, lw) = (self.label.height(), self.label.width());
        if (ih, iw) != (lh, lw) {
            return Err(DataError::DimensionMismatch {
                sample: self.id.clone(),
                image_h: ih,
                image_w: iw,
                label_h: lh,
                label_w: lw,
            });
        }
        Ok(())
    }
}

/// A dataset split into poisoning pools.
///
/// `target` is the victim training set D; `triggered_idx` indexes the subset
/// D_t that will carry triggers; the complement is the clean subset D_c.
/// `auxiliary` is attacker-side data disjoint from D; the surrogate set is
/// D_t ∪ D_aux.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub target: Vec<Sample>,
    pub triggered_idx: Vec<usize>,
    pub auxiliary: Vec<Sample>,
}

impl DatasetSplit {
    pub fn clean_idx(&self) -> Vec<usize> {
        let mut flag = vec![false; self.target.len()];
        for &i in &self.triggered_idx {
            flag[i] = true;
        }
        (0..self.target.len()).filter(|&i| !flag[i]).collect()
    }

    pub fn triggered(&self) -> impl Iterator<Item = &Sample> {
        self.triggered_idx.iter().map(|&i| &self.target[i])
    }

    /// Surrogate set D_s = D_t ∪ D_aux.
    pub fn surrogate(&self) -> Vec<&Sample> {
        self.triggered().chain(self.auxiliary.iter()).collect()
    }
}

/// Split a dataset for poisoning. `|D_t| = round(poison_rate * |D|)`;
/// the auxiliary set is drawn from `aux_pool` (held out, never from D),
/// with `|D_aux| = round(aux_fraction * |D|)` capped at the pool size.
pub fn split(
    dataset: Vec<Sample>,
    aux_pool: &[Sample],
    poison_rate: f64,
    aux_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if !(0.0..=1.0).contains(&poison_rate) {
        return Err(DataError::Split(format!(
            "poison_rate {poison_rate} outside [0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&aux_fraction) {
        return Err(DataError::Split(format!(
            "aux_fraction {aux_fraction} outside [0, 1]"
        )));
    }
    if dataset.is_empty() {
        return Err(DataError::Split("dataset is empty".into()));
    }
    let n = dataset.len();
    let n_t = (poison_rate * n as f64).round() as usize;
    let n_aux = ((aux_fraction * n as f64).round() as usize).min(aux_pool.len());

    let mut rng = seeding::rng(seed, &[stream::SPLIT]);
    let triggered_idx = sample_indices(&mut rng, n, n_t);
    let aux_idx = sample_indices(&mut rng, aux_pool.len(), n_aux);
    let auxiliary = aux_idx.iter().map(|&i| aux_pool[i].clone()).collect();

    Ok(DatasetSplit {
        target: dataset,
        triggered_idx,
        auxiliary,
    })
}

/// Choose `k` distinct indices out of `0..n` (partial Fisher-Yates), sorted.
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// File persistence
// ---------------------------------------------------------------------------

/// Decode a label image from PNG bytes, validating values against the taxonomy.
pub fn decode_label_bytes(
    bytes: &[u8],
    taxonomy: &ClassTaxonomy,
    sample: &str,
) -> Result<LabelMap, DataError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| DataError::Decode(e.to_string()))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array2::<u8>::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        let v = p.0[0];
        if !taxonomy.is_valid_label(v) {
            return Err(DataError::InvalidClassIndex {
                sample: sample.to_string(),
                value: v,
            });
        }
        data[(y as usize, x as usize)] = v;
    }
    Ok(LabelMap(data))
}

/// Decode an RGB image from PNG bytes into `(3, H, W)` f32 in `[0, 255]`.
pub fn decode_image_bytes(bytes: &[u8]) -> Result<Array3<f32>, DataError> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| DataError::Decode(e.to_string()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array3::<f32>::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c, y as usize, x as usize)] = p.0[c] as f32;
        }
    }
    Ok(data)
}

fn encode_label_png(label: &LabelMap) -> Vec<u8> {
    let (h, w) = (label.height(), label.width());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            img.put_pixel(c as u32, r as u32, image::Luma([label.get(r, c)]));
        }
    }
    let mut buf = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut buf),
        image::ImageFormat::Png,
    )
    .expect("png encode");
    buf
}

fn encode_image_png(imgdata: &Array3<f32>) -> Vec<u8> {
    let (h, w) = (imgdata.shape()[1], imgdata.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                imgdata[(0, r, c)].round().clamp(0.0, 255.0) as u8,
                imgdata[(1, r, c)].round().clamp(0.0, 255.0) as u8,
                imgdata[(2, r, c)].round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    let mut buf = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut buf),
        image::ImageFormat::Png,
    )
    .expect("png encode");
    buf
}

/// Load all image/label pairs under `root` (`images/*.png`, `labels/*.png`).
///
/// Every stem must appear on both sides; dimensions must match; label values
/// must be valid class ids or the ignore index.
pub fn load_dataset(root: &Path, taxonomy: &ClassTaxonomy) -> Result<Vec<Sample>, DataError> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    let mut stems: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    for (dir, side) in [(&images_dir, 0), (&labels_dir, 1)] {
        if !dir.exists() {
            continue;
        }
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    let e = stems.entry(stem.to_string()).or_insert((false, false));
                    if side == 0 {
                        e.0 = true;
                    } else {
                        e.1 = true;
                    }
                }
            }
        }
    }
    let mut samples = Vec::new();
    for (stem, (has_img, has_lbl)) in &stems {
        if !(*has_img && *has_lbl) {
            return Err(DataError::MissingPair(stem.clone()));
        }
        let image = decode_image_bytes(&std::fs::read(images_dir.join(format!("{stem}.png")))?)?;
        let label = decode_label_bytes(
            &std::fs::read(labels_dir.join(format!("{stem}.png")))?,
            taxonomy,
            stem,
        )?;
        let s = Sample {
            id: stem.clone(),
            image,
            label,
        };
        s.check_consistent()?;
        samples.push(s);
    }
    Ok(samples)
}

/// Write samples under `root` in the paired-directory layout.
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&labels_dir)?;
    for s in samples {
        std::fs::write(
            images_dir.join(format!("{}.png", s.id)),
            encode_image_png(&s.image),
        )?;
        std::fs::write(
            labels_dir.join(format!("{}.png", s.id)),
            encode_label_png(&s.label),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Configuration of the deterministic synthetic dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(n_samples: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            n_samples,
            height,
            width,
            num_classes,
            seed,
        }
    }
}

const STUFF_A_BASE: [f32; 3] = [88.0, 132.0, 90.0];
const STUFF_B_BASE: [f32; 3] = [106.0, 106.0, 112.0];
/// obj-a instances are either "red" or "non-red" (blue); the attribute backs
/// conditional attacks keyed on object color.
const OBJ_A_RED: [f32; 3] = [200.0, 42.0, 42.0];
const OBJ_A_BLUE: [f32; 3] = [46.0, 72.0, 198.0];
/// Base colors for obj-b and any further object classes.
const OBJ_PALETTE: [[f32; 3]; 6] = [
    [222.0, 202.0, 58.0],
    [150.0, 60.0, 170.0],
    [60.0, 180.0, 180.0],
    [230.0, 130.0, 40.0],
    [120.0, 200.0, 90.0],
    [200.0, 120.0, 150.0],
];

#[derive(Clone, Copy)]
enum ObjShape {
    Ellipse,
    Rect,
}

struct PlacedObject {
    class_id: u8,
    shape: ObjShape,
    center: (f64, f64),
    half: (f64, f64),
    color: [f32; 3],
}

impl PlacedObject {
    fn contains(&self, r: usize, c: usize) -> bool {
        let dr = r as f64 - self.center.0;
        let dc = c as f64 - self.center.1;
        match self.shape {
            ObjShape::Ellipse => {
                (dr / self.half.0).powi(2) + (dc / self.half.1).powi(2) <= 1.0
            }
            ObjShape::Rect => dr.abs() <= self.half.0 && dc.abs() <= self.half.1,
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.center.0 - self.half.0,
            self.center.1 - self.half.1,
            self.center.0 + self.half.0,
            self.center.1 + self.half.1,
        )
    }
}

fn bboxes_separated(a: &PlacedObject, b: &PlacedObject, gap: f64) -> bool {
    let (ar0, ac0, ar1, ac1) = a.bbox();
    let (br0, bc0, br1, bc1) = b.bbox();
    ar1 + gap < br0 || br1 + gap < ar0 || ac1 + gap < bc0 || bc1 + gap < ac0
}

/// Generate a deterministic synthetic dataset.
///
/// Each sample is a two-region stuff background (wavy horizontal boundary)
/// with non-overlapping filled objects on top. Obj-a instances carry a
/// red/non-red color attribute. Same config -> bit-identical samples.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Sample>, DataError> {
    if cfg.num_classes < 4 {
        return Err(DataError::SyntheticConfig(format!(
            "need K >= 4 (2 object + 2 stuff classes), got {}",
            cfg.num_classes
        )));
    }
    if cfg.height < 32 || cfg.width < 32 {
        return Err(DataError::SyntheticConfig(format!(
            "need H, W >= 32, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    let taxonomy = ClassTaxonomy::synthetic(cfg.num_classes)
        .map_err(|e| DataError::SyntheticConfig(e.to_string()))?;
    Ok((0..cfg.n_samples)
        .map(|i| generate_sample(cfg, &taxonomy, i))
        .collect())
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let mut out = base;
    for ch in &mut out {
        *ch = (*ch + rng.gen_range(-amount..=amount)).round().clamp(0.0, 255.0);
    }
    out
}

fn generate_sample(cfg: &SyntheticConfig, taxonomy: &ClassTaxonomy, index: usize) -> Sample {
    let mut rng = seeding::rng(cfg.seed, &[stream::SYNTH, index as u64]);
    let (h, w) = (cfg.height, cfg.width);
    let k = cfg.num_classes;

    // Stuff background: wavy split between bg-stuff-a (above) and bg-stuff-b.
    let mid = h as f64 / 2.0;
    let amp = rng.gen_range(0.05..0.15) * h as f64;
    let freq = rng.gen_range(0.8..2.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let flip = rng.gen_bool(0.5);
    let stuff_a = jitter(&mut rng, STUFF_A_BASE, 10.0);
    let stuff_b = jitter(&mut rng, STUFF_B_BASE, 10.0);

    // Objects: one guaranteed instance of each object class, plus extras.
    let n_extra = rng.gen_range(0..=3usize);
    let mut want: Vec<u8> = (2..k as u8).collect();
    for _ in 0..n_extra {
        want.push(rng.gen_range(2..k as u8));
    }
    let min_half = (h.min(w) as f64 * 0.07).max(3.5);
    let max_half = h.min(w) as f64 * 0.14;
    let mut objects: Vec<PlacedObject> = Vec::new();
    for class_id in want {
        // Rejection-sample a placement separated from existing objects.
        for _attempt in 0..40 {
            let hr = rng.gen_range(min_half..max_half);
            let hc = rng.gen_range(min_half..max_half);
            let margin_r = hr + 2.0;
            let margin_c = hc + 2.0;
            let center = (
                rng.gen_range(margin_r..(h as f64 - margin_r)),
                rng.gen_range(margin_c..(w as f64 - margin_c)),
            );
            let shape = if rng.gen_bool(0.5) {
                ObjShape::Ellipse
            } else {
                ObjShape::Rect
            };
            let color = if class_id == 2 {
                if rng.gen_bool(0.5) {
                    jitter(&mut rng, OBJ_A_RED, 14.0)
                } else {
                    jitter(&mut rng, OBJ_A_BLUE, 14.0)
                }
            } else {
                let palette_idx = (class_id as usize - 3) % OBJ_PALETTE.len();
                jitter(&mut rng, OBJ_PALETTE[palette_idx], 14.0)
            };
            let candidate = PlacedObject {
                class_id,
                shape,
                center,
                half: (hr, hc),
                color,
            };
            if objects.iter().all(|o| bboxes_separated(o, &candidate, 3.0)) {
                objects.push(candidate);
                break;
            }
        }
    }

    let mut image = Array3::<f32>::zeros((3, h, w));
    let mut label = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let boundary = mid
                + amp * (freq * std::f64::consts::TAU * c as f64 / w as f64 + phase).sin();
            let above = (r as f64) < boundary;
            let is_a = above != flip;
            let (cls, color) = if is_a { (0u8, stuff_a) } else { (1u8, stuff_b) };
            label[(r, c)] = cls;
            for ch in 0..3 {
                image[(ch, r, c)] = color[ch];
            }
        }
    }
    for obj in &objects {
        let (r0, c0, r1, c1) = obj.bbox();
        for r in (r0.floor().max(0.0) as usize)..=(r1.ceil().min(h as f64 - 1.0) as usize) {
            for c in (c0.floor().max(0.0) as usize)..=(c1.ceil().min(w as f64 - 1.0) as usize) {
                if obj.contains(r, c) {
                    label[(r, c)] = obj.class_id;
                    for ch in 0..3 {
                        image[(ch, r, c)] = obj.color[ch];
                    }
                }
            }
        }
    }
    // Per-pixel integer noise keeps the task non-degenerate while preserving
    // lossless u8 persistence.
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let noise = rng.gen_range(-6i32..=6) as f32;
                image[(ch, r, c)] = (image[(ch, r, c)] + noise).clamp(0.0, 255.0);
            }
        }
    }

    debug_assert!(label.iter().all(|&v| taxonomy.is_valid_label(v)));
    Sample {
        id: format!("synth-{:05}", index),
        image,
        label: LabelMap(label),
    }
}
