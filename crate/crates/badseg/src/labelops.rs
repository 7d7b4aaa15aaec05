//! Target-label construction for every attack vector.
//!
//! The four coarse vectors relabel victim pixels to the target class; the
//! fine-grained variants narrow the scope to triggered instances (INS) or to
//! instances satisfying a contextual predicate (CON). For B2O the relabelled
//! area is a configurable region stencil centered at the trigger, which also
//! serves as the "intended appearing region" when scoring the attack.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{ClassKind, ClassTaxonomy, LabelMap};
use crate::trigger::TriggerPlacement;

#[derive(Debug, thiserror::Error)]
pub enum LabelOpError {
    #[error("instances undefined for stuff class {0}")]
    StuffInstances(u8),
    #[error("unknown class id {0}")]
    UnknownClass(u8),
    #[error("no victim pixels")]
    NoVictimPixels,
    #[error("empty instance mask")]
    EmptyMask,
    #[error("attack spec invalid: {0}")]
    InvalidSpec(String),
    #[error("label is {label_h}x{label_w} but stencil is {stencil_h}x{stencil_w}")]
    ShapeMismatch {
        label_h: usize,
        label_w: usize,
        stencil_h: usize,
        stencil_w: usize,
    },
}

/// The four coarse attack vectors, keyed by (victim kind, target kind).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoarseVector {
    O2O,
    O2B,
    B2O,
    B2B,
}

impl CoarseVector {
    pub fn victim_kind(self) -> ClassKind {
        match self {
            CoarseVector::O2O | CoarseVector::O2B => ClassKind::Object,
            CoarseVector::B2O | CoarseVector::B2B => ClassKind::Stuff,
        }
    }

    pub fn target_kind(self) -> ClassKind {
        match self {
            CoarseVector::O2O | CoarseVector::B2O => ClassKind::Object,
            CoarseVector::O2B | CoarseVector::B2B => ClassKind::Stuff,
        }
    }

    /// True for vectors whose trigger is anchored on a victim object instance.
    pub fn object_anchored(self) -> bool {
        matches!(self, CoarseVector::O2O | CoarseVector::O2B)
    }
}

impl std::fmt::Display for CoarseVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CoarseVector::O2O => "O2O",
            CoarseVector::O2B => "O2B",
            CoarseVector::B2O => "B2O",
            CoarseVector::B2B => "B2B",
        };
        write!(f, "{s}")
    }
}

/// Fine-grained refinement of a coarse vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Refinement {
    /// Plain coarse attack.
    None,
    /// Scope to individual instances carrying the trigger.
    Instance { limit: InstanceLimit },
    /// Activate only when the contextual predicate holds on the instance.
    Conditional { predicate: ConditionPredicate },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceLimit {
    All,
    Count(u32),
}

/// HSV box predicate over an instance's pixels. The hue interval may wrap
/// through 0 degrees (e.g. red: 340..20).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPredicate {
    pub hue_min_deg: f32,
    pub hue_max_deg: f32,
    pub sat_min: f32,
    pub val_min: f32,
    pub min_fraction: f32,
}

impl ConditionPredicate {
    /// Red-hue predicate matching the synthetic generator's red attribute.
    pub fn red() -> Self {
        Self {
            hue_min_deg: 335.0,
            hue_max_deg: 25.0,
            sat_min: 0.35,
            val_min: 0.25,
            min_fraction: 0.5,
        }
    }

    fn validate(&self) -> Result<(), LabelOpError> {
        for h in [self.hue_min_deg, self.hue_max_deg] {
            if !(0.0..360.0).contains(&h) {
                return Err(LabelOpError::InvalidSpec(format!(
                    "hue {h} outside [0, 360)"
                )));
            }
        }
        if !(self.min_fraction > 0.0 && self.min_fraction <= 1.0) {
            return Err(LabelOpError::InvalidSpec(format!(
                "min_fraction {} outside (0, 1]",
                self.min_fraction
            )));
        }
        Ok(())
    }

    fn hue_matches(&self, hue: f32) -> bool {
        if self.hue_min_deg <= self.hue_max_deg {
            (self.hue_min_deg..=self.hue_max_deg).contains(&hue)
        } else {
            hue >= self.hue_min_deg || hue <= self.hue_max_deg
        }
    }
}

/// Stencil descriptor for the B2O appearing region: a filled rectangle of
/// `width_fraction * image_width` pixels, aspect w:h = `aspect`:1, centered
/// at each trigger position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub width_fraction: f32,
    pub aspect: f32,
}

impl Default for RegionSpec {
    fn default() -> Self {
        Self {
            width_fraction: 0.25,
            aspect: 2.0,
        }
    }
}

/// Full attack specification: vector, victim/target classes, and any
/// fine-grained constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub coarse: CoarseVector,
    pub refinement: Refinement,
    pub victim_class: u8,
    pub target_class: u8,
    /// Only meaningful for B2O.
    pub b2o_region: Option<RegionSpec>,
}

impl AttackSpec {
    pub fn coarse(vector: CoarseVector, victim: u8, target: u8) -> Self {
        let b2o_region = (vector == CoarseVector::B2O).then(RegionSpec::default);
        Self {
            coarse: vector,
            refinement: Refinement::None,
            victim_class: victim,
            target_class: target,
            b2o_region,
        }
    }

    pub fn instance(vector: CoarseVector, victim: u8, target: u8, limit: InstanceLimit) -> Self {
        let mut s = Self::coarse(vector, victim, target);
        s.refinement = Refinement::Instance { limit };
        s
    }

    pub fn conditional(
        vector: CoarseVector,
        victim: u8,
        target: u8,
        predicate: ConditionPredicate,
    ) -> Self {
        let mut s = Self::coarse(vector, victim, target);
        s.refinement = Refinement::Conditional { predicate };
        s
    }

    /// Display name such as `O2B`, `INS-O2O`, `CON-B2B`.
    pub fn vector_name(&self) -> String {
        match &self.refinement {
            Refinement::None => self.coarse.to_string(),
            Refinement::Instance { .. } => format!("INS-{}", self.coarse),
            Refinement::Conditional { .. } => format!("CON-{}", self.coarse),
        }
    }

    /// Check kind compatibility against the taxonomy (victim/target kinds
    /// must match the vector; instance scoping needs an object victim).
    pub fn validate(&self, taxonomy: &ClassTaxonomy) -> Result<(), LabelOpError> {
        let vk = taxonomy
            .kind_of(self.victim_class)
            .ok_or(LabelOpError::UnknownClass(self.victim_class))?;
        let tk = taxonomy
            .kind_of(self.target_class)
            .ok_or(LabelOpError::UnknownClass(self.target_class))?;
        if vk != self.coarse.victim_kind() {
            return Err(LabelOpError::InvalidSpec(format!(
                "{} requires a {} victim; `{}` is {}",
                self.coarse,
                self.coarse.victim_kind(),
                taxonomy.name_of(self.victim_class).unwrap_or("?"),
                vk
            )));
        }
        if tk != self.coarse.target_kind() {
            return Err(LabelOpError::InvalidSpec(format!(
                "{} requires a {} target; `{}` is {}",
                self.coarse,
                self.coarse.target_kind(),
                taxonomy.name_of(self.target_class).unwrap_or("?"),
                tk
            )));
        }
        if self.victim_class == self.target_class {
            return Err(LabelOpError::InvalidSpec(
                "victim and target classes must differ".into(),
            ));
        }
        if matches!(self.refinement, Refinement::Instance { .. })
            && vk != ClassKind::Object
        {
            return Err(LabelOpError::InvalidSpec(
                "Instance-Level not applicable to stuff victims".into(),
            ));
        }
        if let Refinement::Conditional { predicate } = &self.refinement {
            predicate.validate()?;
        }
        if let Refinement::Instance { limit: InstanceLimit::Count(0) } = self.refinement {
            return Err(LabelOpError::InvalidSpec(
                "instance_limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One connected component of an object class.
#[derive(Debug, Clone)]
pub struct InstanceMask {
    pub mask: Array2<bool>,
    pub area: usize,
    /// (row_min, col_min, row_max, col_max), inclusive.
    pub bbox: (usize, usize, usize, usize),
    /// Row-major first pixel, used as the deterministic tie-breaker.
    pub first_pixel: (usize, usize),
}

impl InstanceMask {
    pub fn bbox_width(&self) -> usize {
        self.bbox.3 - self.bbox.1 + 1
    }

    pub fn bbox_height(&self) -> usize {
        self.bbox.2 - self.bbox.0 + 1
    }

    pub fn bbox_center(&self) -> (f64, f64) {
        (
            (self.bbox.0 + self.bbox.2) as f64 / 2.0,
            (self.bbox.1 + self.bbox.3) as f64 / 2.0,
        )
    }
}

/// Extract 8-connected components of `class_id`, sorted by area descending,
/// ties broken by the top-left (row-major) first pixel.
pub fn extract_instances(
    label: &LabelMap,
    class_id: u8,
    taxonomy: &ClassTaxonomy,
) -> Result<Vec<InstanceMask>, LabelOpError> {
    match taxonomy.kind_of(class_id) {
        None => return Err(LabelOpError::UnknownClass(class_id)),
        Some(ClassKind::Stuff) => return Err(LabelOpError::StuffInstances(class_id)),
        Some(ClassKind::Object) => {}
    }
    let (h, w) = (label.height(), label.width());
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if label.get(r0, c0) != class_id || seen[(r0, c0)] {
                continue;
            }
            let mut mask = Array2::<bool>::from_elem((h, w), false);
            let mut stack = vec![(r0, c0)];
            seen[(r0, c0)] = true;
            let mut area = 0usize;
            let (mut rmin, mut rmax, mut cmin, mut cmax) = (r0, r0, c0, c0);
            while let Some((r, c)) = stack.pop() {
                mask[(r, c)] = true;
                area += 1;
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr as usize >= h || nc as usize >= w {
                            continue;
                        }
                        let p = (nr as usize, nc as usize);
                        if label.get(p.0, p.1) == class_id && !seen[p] {
                            seen[p] = true;
                            stack.push(p);
                        }
                    }
                }
            }
            out.push(InstanceMask {
                mask,
                area,
                bbox: (rmin, cmin, rmax, cmax),
                first_pixel: (r0, c0),
            });
        }
    }
    out.sort_by(|a, b| {
        b.area
            .cmp(&a.area)
            .then(a.first_pixel.cmp(&b.first_pixel))
    });
    Ok(out)
}

/// True iff at least `min_fraction` of the instance's pixels fall inside the
/// predicate's HSV box.
pub fn eval_condition(
    image: &Array3<f32>,
    instance_mask: &Array2<bool>,
    predicate: &ConditionPredicate,
) -> Result<bool, LabelOpError> {
    predicate.validate()?;
    let mut total = 0usize;
    let mut hits = 0usize;
    let (h, w) = (instance_mask.nrows(), instance_mask.ncols());
    for r in 0..h {
        for c in 0..w {
            if !instance_mask[(r, c)] {
                continue;
            }
            total += 1;
            let (hue, sat, val) = rgb_to_hsv(
                image[(0, r, c)] / 255.0,
                image[(1, r, c)] / 255.0,
                image[(2, r, c)] / 255.0,
            );
            if predicate.hue_matches(hue) && sat >= predicate.sat_min && val >= predicate.val_min {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(LabelOpError::EmptyMask);
    }
    Ok(hits as f32 / total as f32 >= predicate.min_fraction)
}

/// Standard RGB (each in [0,1]) to HSV; hue in degrees [0, 360).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue.rem_euclid(360.0), sat, max)
}

/// The scoped victim-pixel set for an attack: exactly the pixels that
/// `manipulate` relabels, and the denominator set when scoring ASR
/// (for B2O this is the intended appearing region).
pub fn scoped_victim_mask(
    label: &LabelMap,
    spec: &AttackSpec,
    placement: &TriggerPlacement,
    image: &Array3<f32>,
    taxonomy: &ClassTaxonomy,
) -> Result<Array2<bool>, LabelOpError> {
    let (h, w) = (label.height(), label.width());
    if placement.stencil.nrows() != h || placement.stencil.ncols() != w {
        return Err(LabelOpError::ShapeMismatch {
            label_h: h,
            label_w: w,
            stencil_h: placement.stencil.nrows(),
            stencil_w: placement.stencil.ncols(),
        });
    }
    if spec.coarse == CoarseVector::B2O {
        let region = spec.b2o_region.unwrap_or_default();
        return Ok(b2o_region_mask(h, w, &placement.centers, &region));
    }
    let class_mask = label.class_mask(spec.victim_class);
    match &spec.refinement {
        Refinement::None => Ok(class_mask),
        Refinement::Instance { .. } | Refinement::Conditional { .. } => {
            let instances = extract_instances(label, spec.victim_class, taxonomy)?;
            let mut out = Array2::<bool>::from_elem((h, w), false);
            for inst in &instances {
                let selected = match &spec.refinement {
                    Refinement::Instance { .. } => overlaps_footprint(&inst.mask, placement),
                    Refinement::Conditional { predicate } => {
                        overlaps_footprint(&inst.mask, placement)
                            && eval_condition(image, &inst.mask, predicate)?
                    }
                    Refinement::None => unreachable!(),
                };
                if selected {
                    out.zip_mut_with(&inst.mask, |o, &m| *o = *o || m);
                }
            }
            Ok(out)
        }
    }
}

fn overlaps_footprint(mask: &Array2<bool>, placement: &TriggerPlacement) -> bool {
    mask.iter()
        .zip(placement.stencil.iter())
        .any(|(&m, &s)| m && s > 0.0)
}

/// Union of B2O appearing-region rectangles centered at each trigger.
pub fn b2o_region_mask(
    h: usize,
    w: usize,
    centers: &[(f32, f32)],
    region: &RegionSpec,
) -> Array2<bool> {
    let mut out = Array2::<bool>::from_elem((h, w), false);
    let rw = (region.width_fraction as f64 * w as f64).max(1.0);
    let rh = (rw / region.aspect as f64).max(1.0);
    for &(cr, cc) in centers {
        let r0 = ((cr as f64 - rh / 2.0).round().max(0.0)) as usize;
        let r1 = ((cr as f64 + rh / 2.0).round().min(h as f64 - 1.0)) as usize;
        let c0 = ((cc as f64 - rw / 2.0).round().max(0.0)) as usize;
        let c1 = ((cc as f64 + rw / 2.0).round().min(w as f64 - 1.0)) as usize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                out[(r, c)] = true;
            }
        }
    }
    out
}

/// Construct the target label map y^t.
///
/// Relabels the scoped victim set to the target class and leaves all other
/// pixels untouched. The map is idempotent: re-applying it with the same
/// placement is a no-op. A label without victim pixels yields an unchanged
/// copy; victim presence is enforced upstream (trigger placement and the
/// poisoning pipeline) where an anchor is genuinely required.
pub fn manipulate(
    label: &LabelMap,
    spec: &AttackSpec,
    placement: &TriggerPlacement,
    image: &Array3<f32>,
    taxonomy: &ClassTaxonomy,
) -> Result<LabelMap, LabelOpError> {
    spec.validate(taxonomy)?;
    let scoped = scoped_victim_mask(label, spec, placement, image, taxonomy)?;
    let mut out = label.clone();
    for ((r, c), &m) in scoped.indexed_iter() {
        if m {
            out.0[(r, c)] = spec.target_class;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticConfig};
    use crate::trigger::TriggerPlacement;

    fn taxonomy() -> ClassTaxonomy {
        ClassTaxonomy::synthetic_default()
    }

    fn blank_placement(h: usize, w: usize) -> TriggerPlacement {
        TriggerPlacement {
            centers: vec![],
            stencil: Array2::zeros((h, w)),
        }
    }

    fn placement_at(h: usize, w: usize, r: usize, c: usize) -> TriggerPlacement {
        let mut stencil = Array2::zeros((h, w));
        stencil[(r, c)] = 1.0f32;
        TriggerPlacement {
            centers: vec![(r as f32, c as f32)],
            stencil,
        }
    }

    fn two_blob_label() -> LabelMap {
        let mut l = LabelMap::filled(16, 16, 0);
        for r in 2..5 {
            for c in 2..5 {
                l.0[(r, c)] = 2;
            }
        }
        for r in 10..15 {
            for c in 10..14 {
                l.0[(r, c)] = 2;
            }
        }
        l
    }

    #[test]
    fn extract_two_disjoint_blobs() {
        let l = two_blob_label();
        let inst = extract_instances(&l, 2, &taxonomy()).unwrap();
        assert_eq!(inst.len(), 2);
        // Sorted by area descending: the 5x4 blob first.
        assert_eq!(inst[0].area, 20);
        assert_eq!(inst[1].area, 9);
        // Disjoint and union = class pixels.
        let mut union = 0;
        for (a, b) in inst[0].mask.iter().zip(inst[1].mask.iter()) {
            assert!(!(a & b));
            union += (*a as usize) + (*b as usize);
        }
        assert_eq!(union, l.class_count(2));
    }

    #[test]
    fn extract_none_is_empty() {
        let l = LabelMap::filled(8, 8, 0);
        assert!(extract_instances(&l, 2, &taxonomy()).unwrap().is_empty());
    }

    #[test]
    fn extract_stuff_errors() {
        let l = LabelMap::filled(8, 8, 0);
        assert!(matches!(
            extract_instances(&l, 0, &taxonomy()),
            Err(LabelOpError::StuffInstances(0))
        ));
    }

    #[test]
    fn diagonal_chain_is_one_component() {
        // 8-connectivity oracle: a diagonal chain stays a single instance.
        let mut l = LabelMap::filled(8, 8, 0);
        for i in 0..6 {
            l.0[(i, i)] = 2;
        }
        let inst = extract_instances(&l, 2, &taxonomy()).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].area, 6);
    }

    #[test]
    fn o2b_relabels_all_victim_pixels() {
        let l = two_blob_label();
        let spec = AttackSpec::coarse(CoarseVector::O2B, 2, 0);
        let img = Array3::zeros((3, 16, 16));
        let out = manipulate(&l, &spec, &blank_placement(16, 16), &img, &taxonomy()).unwrap();
        for ((r, c), &v) in l.0.indexed_iter() {
            if v == 2 {
                assert_eq!(out.get(r, c), 0);
            } else {
                assert_eq!(out.get(r, c), v);
            }
        }
    }

    #[test]
    fn manipulation_is_idempotent() {
        let l = two_blob_label();
        let img = Array3::zeros((3, 16, 16));
        let tax = taxonomy();
        let placement = placement_at(16, 16, 3, 3);
        for spec in [
            AttackSpec::coarse(CoarseVector::O2B, 2, 0),
            AttackSpec::coarse(CoarseVector::O2O, 2, 3),
            AttackSpec::instance(CoarseVector::O2B, 2, 0, InstanceLimit::Count(1)),
        ] {
            let once = manipulate(&l, &spec, &placement, &img, &tax).unwrap();
            let twice = manipulate(&once, &spec, &placement, &img, &tax).unwrap();
            assert_eq!(once.0, twice.0, "{}", spec.vector_name());
        }
    }

    #[test]
    fn ins_scopes_to_triggered_instance() {
        let l = two_blob_label();
        let img = Array3::zeros((3, 16, 16));
        // Trigger footprint on the small blob only.
        let placement = placement_at(16, 16, 3, 3);
        let spec = AttackSpec::instance(CoarseVector::O2B, 2, 0, InstanceLimit::Count(1));
        let out = manipulate(&l, &spec, &placement, &img, &taxonomy()).unwrap();
        // Small blob relabeled, large blob untouched.
        assert_eq!(out.get(3, 3), 0);
        assert_eq!(out.get(12, 12), 2);
    }

    #[test]
    fn con_predicate_false_leaves_label_unchanged() {
        let l = two_blob_label();
        // Paint both blobs blue; a red predicate must not fire.
        let mut img = Array3::zeros((3, 16, 16));
        for ((r, c), &v) in l.0.indexed_iter() {
            if v == 2 {
                img[(0, r, c)] = 40.0;
                img[(1, r, c)] = 60.0;
                img[(2, r, c)] = 200.0;
            }
        }
        let placement = placement_at(16, 16, 3, 3);
        let spec = AttackSpec::conditional(CoarseVector::O2B, 2, 0, ConditionPredicate::red());
        let out = manipulate(&l, &spec, &placement, &img, &taxonomy()).unwrap();
        assert_eq!(out.0, l.0);
    }

    #[test]
    fn con_predicate_true_relabels_red_instance() {
        let l = two_blob_label();
        let mut img = Array3::zeros((3, 16, 16));
        for ((r, c), &v) in l.0.indexed_iter() {
            if v == 2 {
                img[(0, r, c)] = 210.0;
                img[(1, r, c)] = 40.0;
                img[(2, r, c)] = 40.0;
            }
        }
        let placement = placement_at(16, 16, 3, 3);
        let spec = AttackSpec::conditional(CoarseVector::O2B, 2, 0, ConditionPredicate::red());
        let out = manipulate(&l, &spec, &placement, &img, &taxonomy()).unwrap();
        assert_eq!(out.get(3, 3), 0);
        // Untriggered red instance stays: predicate alone is not enough.
        assert_eq!(out.get(12, 12), 2);
    }

    #[test]
    fn b2o_relabels_region_only() {
        let l = LabelMap::filled(32, 32, 1);
        let img = Array3::zeros((3, 32, 32));
        let mut spec = AttackSpec::coarse(CoarseVector::B2O, 1, 2);
        spec.b2o_region = Some(RegionSpec {
            width_fraction: 0.25,
            aspect: 2.0,
        });
        let placement = placement_at(32, 32, 16, 16);
        let out = manipulate(&l, &spec, &placement, &img, &taxonomy()).unwrap();
        let region = b2o_region_mask(32, 32, &placement.centers, &spec.b2o_region.unwrap());
        for ((r, c), &m) in region.indexed_iter() {
            assert_eq!(out.get(r, c), if m { 2 } else { 1 });
        }
        // 8 px wide, 4 px tall rectangle (plus boundary rounding).
        let area = region.iter().filter(|&&m| m).count();
        assert!(area >= 8 * 4 && area <= 10 * 6, "area {area}");
    }

    #[test]
    fn pixel_change_set_matches_scoped_victims() {
        // Property over random synthetic samples and coarse vectors.
        let samples = make_synthetic(&SyntheticConfig::new(6, 64, 64, 4, 42)).unwrap();
        let tax = taxonomy();
        for s in &samples {
            for (vector, victim, target) in [
                (CoarseVector::O2B, 2u8, 0u8),
                (CoarseVector::O2O, 2, 3),
                (CoarseVector::B2B, 0, 1),
            ] {
                let spec = AttackSpec::coarse(vector, victim, target);
                let placement = blank_placement(64, 64);
                let out = manipulate(&s.label, &spec, &placement, &s.image, &tax).unwrap();
                for ((r, c), &v) in s.label.0.indexed_iter() {
                    if v == victim {
                        assert_eq!(out.get(r, c), target);
                    } else {
                        assert_eq!(out.get(r, c), v, "non-victim pixel changed");
                    }
                }
            }
        }
    }

    #[test]
    fn ins_all_equals_coarse_when_all_triggered() {
        let l = two_blob_label();
        let img = Array3::zeros((3, 16, 16));
        let tax = taxonomy();
        // Footprints on both instances.
        let mut stencil = Array2::zeros((16, 16));
        stencil[(3, 3)] = 1.0f32;
        stencil[(12, 12)] = 1.0;
        let placement = TriggerPlacement {
            centers: vec![(3.0, 3.0), (12.0, 12.0)],
            stencil,
        };
        let ins = AttackSpec::instance(CoarseVector::O2B, 2, 0, InstanceLimit::All);
        let coarse = AttackSpec::coarse(CoarseVector::O2B, 2, 0);
        let a = manipulate(&l, &ins, &placement, &img, &tax).unwrap();
        let b = manipulate(&l, &coarse, &placement, &img, &tax).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn eval_condition_thresholds() {
        // Half the mask red, half blue: min_fraction decides.
        let mut img = Array3::zeros((3, 4, 4));
        let mut mask = Array2::from_elem((4, 4), false);
        for c in 0..4 {
            mask[(0, c)] = true;
            mask[(1, c)] = true;
            let red = c < 2;
            for r in 0..2 {
                img[(0, r, c)] = if red { 220.0 } else { 30.0 };
                img[(1, r, c)] = 30.0;
                img[(2, r, c)] = if red { 30.0 } else { 220.0 };
            }
        }
        let mut pred = ConditionPredicate::red();
        pred.min_fraction = 0.6;
        assert!(!eval_condition(&img, &mask, &pred).unwrap());
        pred.min_fraction = 0.4;
        assert!(eval_condition(&img, &mask, &pred).unwrap());
    }

    #[test]
    fn eval_condition_empty_mask_errors() {
        let img = Array3::zeros((3, 4, 4));
        let mask = Array2::from_elem((4, 4), false);
        assert!(matches!(
            eval_condition(&img, &mask, &ConditionPredicate::red()),
            Err(LabelOpError::EmptyMask)
        ));
    }

    #[test]
    fn spec_validation_rules() {
        let tax = taxonomy();
        // O2B with stuff victim rejected.
        assert!(AttackSpec::coarse(CoarseVector::O2B, 0, 1).validate(&tax).is_err());
        // INS-B2B rejected (stuff victim).
        assert!(
            AttackSpec::instance(CoarseVector::B2B, 0, 1, InstanceLimit::All)
                .validate(&tax)
                .is_err()
        );
        // CON-B2B accepted.
        assert!(AttackSpec::conditional(
            CoarseVector::B2B,
            0,
            1,
            ConditionPredicate::red()
        )
        .validate(&tax)
        .is_ok());
        assert!(AttackSpec::coarse(CoarseVector::O2B, 2, 0).validate(&tax).is_ok());
    }
}
