//! Trigger representation, rasterization, and injection.
//!
//! A trigger is described by five attributes — shape, size, position
//! strategy, quantity, intensity — each drawn from a per-vector candidate
//! grid. Shapes render through signed-distance fields with a one-pixel
//! anti-aliasing ramp, which keeps the stencil differentiable in the size
//! attribute. The relaxed form carries per-attribute probability vectors:
//! numeric attributes (size, intensity) relax to probability-weighted
//! values, structural attributes (shape, position, quantity) to a weighted
//! superposition of the rendered candidate stencils.

use std::sync::OnceLock;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::labelops::CoarseVector;

#[derive(Debug, thiserror::Error)]
pub enum TriggerError {
    #[error("temperature must be positive, got {0}")]
    TauNonPositive(f64),
    #[error("no victim instance")]
    NoVictimInstance,
    #[error("empty position pool for strategy {0:?}")]
    EmptyPositionPool(PositionStrategy),
    #[error("trigger spec invalid: {0}")]
    InvalidSpec(String),
    #[error("image is {image_h}x{image_w} but stencil is {stencil_h}x{stencil_w}")]
    ShapeMismatch {
        image_h: usize,
        image_w: usize,
        stencil_h: usize,
        stencil_w: usize,
    },
    #[error("probability vector invalid: {0}")]
    BadProbabilities(String),
    #[error("logo stencil invalid: {0}")]
    BadStencil(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerShape {
    Circle,
    Square,
    Triangle,
    Logo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionStrategy {
    ObjectCenter,
    RandomOnObject,
    RandomOutsideObject,
    /// Uniform over the victim stuff region (B2O/B2B).
    BackgroundRegion,
}

impl PositionStrategy {
    pub fn needs_object(self) -> bool {
        !matches!(self, PositionStrategy::BackgroundRegion)
    }

    fn stream_tag(self) -> u64 {
        match self {
            PositionStrategy::ObjectCenter => 0,
            PositionStrategy::RandomOnObject => 1,
            PositionStrategy::RandomOutsideObject => 2,
            PositionStrategy::BackgroundRegion => 3,
        }
    }
}

/// A concrete (discrete) trigger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub shape: TriggerShape,
    /// Footprint diameter as a fraction of the anchor width (object bbox for
    /// object-anchored strategies, image width otherwise).
    pub size: f64,
    pub position: PositionStrategy,
    pub quantity: u32,
    /// Blend opacity in [0, 1].
    pub intensity: f64,
    /// Fill color in image value units (default black).
    pub color: [f32; 3],
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<(), TriggerError> {
        if self.size <= 0.0 || self.size.is_nan() {
            return Err(TriggerError::InvalidSpec(format!("size {} <= 0", self.size)));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(TriggerError::InvalidSpec(format!(
                "intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        if self.quantity < 1 {
            return Err(TriggerError::InvalidSpec("quantity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Appendix-style candidate grid for one attack vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub shapes: Vec<TriggerShape>,
    pub sizes: Vec<f64>,
    pub positions: Vec<PositionStrategy>,
    pub quantities: Vec<u32>,
    pub intensities: Vec<f64>,
}

impl CandidateGrid {
    /// The candidate option table for a coarse vector. Background-oriented
    /// vectors have no object-relative positions: placement collapses to
    /// region-uniform.
    pub fn for_vector(vector: CoarseVector) -> Self {
        let shapes = vec![
            TriggerShape::Circle,
            TriggerShape::Square,
            TriggerShape::Triangle,
            TriggerShape::Logo,
        ];
        let intensities = vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        match vector {
            CoarseVector::O2O | CoarseVector::O2B => Self {
                shapes,
                sizes: vec![1.0 / 12.0, 1.0 / 10.0, 1.0 / 8.0, 1.0 / 6.0, 1.0 / 4.0, 1.0 / 2.0],
                positions: vec![
                    PositionStrategy::ObjectCenter,
                    PositionStrategy::RandomOnObject,
                    PositionStrategy::RandomOutsideObject,
                ],
                quantities: vec![1, 2, 3, 4, 5],
                intensities,
            },
            CoarseVector::B2O => Self {
                shapes,
                sizes: vec![1.0 / 12.0, 1.0 / 10.0, 1.0 / 8.0, 1.0 / 6.0, 1.0 / 4.0, 1.0 / 2.0],
                positions: vec![PositionStrategy::BackgroundRegion],
                quantities: vec![1, 2, 3, 4, 5],
                intensities,
            },
            CoarseVector::B2B => Self {
                shapes,
                sizes: vec![0.005, 0.010, 0.015, 0.020, 0.025],
                positions: vec![PositionStrategy::BackgroundRegion],
                quantities: vec![1, 3, 5, 7, 10],
                intensities,
            },
        }
    }

    pub fn contains(&self, spec: &TriggerSpec) -> bool {
        self.shapes.contains(&spec.shape)
            && self.sizes.iter().any(|&s| (s - spec.size).abs() < 1e-9)
            && self.positions.contains(&spec.position)
            && self.quantities.contains(&spec.quantity)
            && self
                .intensities
                .iter()
                .any(|&i| (i - spec.intensity).abs() < 1e-9)
    }

    pub fn max_quantity(&self) -> u32 {
        self.quantities.iter().copied().max().unwrap_or(1)
    }
}

/// Per-attribute probability vectors over a candidate grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxedTriggerSpec {
    pub grid: CandidateGrid,
    pub xi_shape: Vec<f64>,
    pub xi_size: Vec<f64>,
    pub xi_position: Vec<f64>,
    pub xi_quantity: Vec<f64>,
    pub xi_intensity: Vec<f64>,
    pub temperature: f64,
    pub color: [f32; 3],
}

const XI_SUM_TOL: f64 = 1e-6;

fn check_probs(name: &str, xi: &[f64], len: usize) -> Result<(), TriggerError> {
    if xi.len() != len {
        return Err(TriggerError::BadProbabilities(format!(
            "{name}: expected {len} entries, got {}",
            xi.len()
        )));
    }
    if xi.iter().any(|&p| p.is_nan() || p < 0.0 || !p.is_finite()) {
        return Err(TriggerError::BadProbabilities(format!(
            "{name}: negative or non-finite entry"
        )));
    }
    let sum: f64 = xi.iter().sum();
    if (sum - 1.0).abs() > XI_SUM_TOL {
        return Err(TriggerError::BadProbabilities(format!(
            "{name}: sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

impl RelaxedTriggerSpec {
    /// Uniform probabilities over the grid.
    pub fn uniform(grid: CandidateGrid, temperature: f64, color: [f32; 3]) -> Self {
        fn unif(n: usize) -> Vec<f64> {
            vec![1.0 / n as f64; n]
        }
        Self {
            xi_shape: unif(grid.shapes.len()),
            xi_size: unif(grid.sizes.len()),
            xi_position: unif(grid.positions.len()),
            xi_quantity: unif(grid.quantities.len()),
            xi_intensity: unif(grid.intensities.len()),
            grid,
            temperature,
            color,
        }
    }

    /// One-hot probabilities matching a concrete spec (which must lie on the
    /// grid).
    pub fn one_hot(
        grid: CandidateGrid,
        spec: &TriggerSpec,
        temperature: f64,
    ) -> Result<Self, TriggerError> {
        fn hot(n: usize, i: usize) -> Vec<f64> {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        }
        let find = |err: &str, idx: Option<usize>| {
            idx.ok_or_else(|| TriggerError::InvalidSpec(format!("{err} not in candidate grid")))
        };
        let si = find("shape", grid.shapes.iter().position(|&s| s == spec.shape))?;
        let zi = find(
            "size",
            grid.sizes.iter().position(|&s| (s - spec.size).abs() < 1e-9),
        )?;
        let pi = find(
            "position",
            grid.positions.iter().position(|&p| p == spec.position),
        )?;
        let qi = find(
            "quantity",
            grid.quantities.iter().position(|&q| q == spec.quantity),
        )?;
        let ii = find(
            "intensity",
            grid.intensities
                .iter()
                .position(|&i| (i - spec.intensity).abs() < 1e-9),
        )?;
        Ok(Self {
            xi_shape: hot(grid.shapes.len(), si),
            xi_size: hot(grid.sizes.len(), zi),
            xi_position: hot(grid.positions.len(), pi),
            xi_quantity: hot(grid.quantities.len(), qi),
            xi_intensity: hot(grid.intensities.len(), ii),
            grid,
            temperature,
            color: spec.color,
        })
    }

    pub fn validate(&self) -> Result<(), TriggerError> {
        if self.temperature <= 0.0 || self.temperature.is_nan() {
            return Err(TriggerError::TauNonPositive(self.temperature));
        }
        check_probs("xi_shape", &self.xi_shape, self.grid.shapes.len())?;
        check_probs("xi_size", &self.xi_size, self.grid.sizes.len())?;
        check_probs("xi_position", &self.xi_position, self.grid.positions.len())?;
        check_probs("xi_quantity", &self.xi_quantity, self.grid.quantities.len())?;
        check_probs("xi_intensity", &self.xi_intensity, self.grid.intensities.len())?;
        Ok(())
    }
}

/// Discretize by taking each attribute's most probable candidate; exact ties
/// resolve to the lowest candidate index.
pub fn discretize(relaxed: &RelaxedTriggerSpec) -> TriggerSpec {
    fn argmax(xs: &[f64]) -> usize {
        let mut best = 0;
        for (i, &x) in xs.iter().enumerate() {
            if x > xs[best] {
                best = i;
            }
        }
        best
    }
    let g = &relaxed.grid;
    TriggerSpec {
        shape: g.shapes[argmax(&relaxed.xi_shape)],
        size: g.sizes[argmax(&relaxed.xi_size)],
        position: g.positions[argmax(&relaxed.xi_position)],
        quantity: g.quantities[argmax(&relaxed.xi_quantity)],
        intensity: g.intensities[argmax(&relaxed.xi_intensity)],
        color: relaxed.color,
    }
}

// ---------------------------------------------------------------------------
// Gumbel-Softmax
// ---------------------------------------------------------------------------

/// One i.i.d. Gumbel noise vector per attribute.
#[derive(Debug, Clone)]
pub struct GumbelNoise {
    pub shape: Vec<f64>,
    pub size: Vec<f64>,
    pub position: Vec<f64>,
    pub quantity: Vec<f64>,
    pub intensity: Vec<f64>,
}

impl GumbelNoise {
    pub fn sample(grid: &CandidateGrid, rng: &mut ChaCha8Rng) -> Self {
        fn draw(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                    -(-u.ln()).ln()
                })
                .collect()
        }
        Self {
            shape: draw(grid.shapes.len(), rng),
            size: draw(grid.sizes.len(), rng),
            position: draw(grid.positions.len(), rng),
            quantity: draw(grid.quantities.len(), rng),
            intensity: draw(grid.intensities.len(), rng),
        }
    }

    pub fn zeros(grid: &CandidateGrid) -> Self {
        Self {
            shape: vec![0.0; grid.shapes.len()],
            size: vec![0.0; grid.sizes.len()],
            position: vec![0.0; grid.positions.len()],
            quantity: vec![0.0; grid.quantities.len()],
            intensity: vec![0.0; grid.intensities.len()],
        }
    }
}

/// Soft one-hot selection: `eta_i = softmax_i((G_i + ln xi_i) / tau)`.
pub fn gumbel_softmax(xi: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>, TriggerError> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(TriggerError::TauNonPositive(tau));
    }
    if xi.len() != noise.len() {
        return Err(TriggerError::BadProbabilities(
            "noise length mismatch".into(),
        ));
    }
    let logits: Vec<f64> = xi
        .iter()
        .zip(noise)
        .map(|(&p, &g)| (g + p.ln()) / tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(TriggerError::BadProbabilities(
            "all probabilities are zero".into(),
        ));
    }
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

/// Backward through the Gumbel-Softmax: given dL/d(eta), return dL/d(ln xi).
pub fn gumbel_softmax_backward(eta: &[f64], d_eta: &[f64], tau: f64) -> Vec<f64> {
    let dot: f64 = eta.iter().zip(d_eta).map(|(&e, &d)| e * d).sum();
    eta.iter()
        .zip(d_eta)
        .map(|(&e, &d)| e * (d - dot) / tau)
        .collect()
}

/// Analytic Jacobian-vector product for the relaxed scalar path
/// `lambda = sum_i eta_i * v_i`: returns dL/d(xi) given upstream d_lambda.
pub fn d_lambda_d_xi(
    xi: &[f64],
    noise: &[f64],
    tau: f64,
    values: &[f64],
    d_lambda: f64,
) -> Result<Vec<f64>, TriggerError> {
    let eta = gumbel_softmax(xi, noise, tau)?;
    let d_eta: Vec<f64> = values.iter().map(|&v| v * d_lambda).collect();
    let d_ln_xi = gumbel_softmax_backward(&eta, &d_eta, tau);
    Ok(d_ln_xi.iter().zip(xi).map(|(&d, &p)| d / p).collect())
}

// ---------------------------------------------------------------------------
// Shape SDFs
// ---------------------------------------------------------------------------

const SQRT5: f64 = 2.236_067_977_499_79;

/// Signed distance (negative inside) and its derivative w.r.t. the radius.
fn sdf_and_dr(shape: TriggerShape, dr: f64, dc: f64, r: f64) -> (f64, f64) {
    match shape {
        TriggerShape::Circle => ((dr * dr + dc * dc).sqrt() - r, -1.0),
        TriggerShape::Square => (dr.abs().max(dc.abs()) - r, -1.0),
        TriggerShape::Triangle => {
            // Upright isoceles: apex (-r, 0), base corners (r, +-r).
            let base = dr - r;
            let left = (-dr - r - 2.0 * dc) / SQRT5;
            let right = (-dr - r + 2.0 * dc) / SQRT5;
            let (mut sdf, mut d) = (base, -1.0);
            if left > sdf {
                sdf = left;
                d = -1.0 / SQRT5;
            }
            if right > sdf {
                sdf = right;
                d = -1.0 / SQRT5;
            }
            (sdf, d)
        }
        TriggerShape::Logo => logo().sdf_and_dr(dr, dc, r),
    }
}

/// Anti-aliased coverage of one footprint: 1 inside, 0 outside, a one-pixel
/// linear ramp across the boundary. Returns (coverage, d coverage / d r).
fn coverage(shape: TriggerShape, dr: f64, dc: f64, r: f64) -> (f64, f64) {
    let (sdf, dsdf) = sdf_and_dr(shape, dr, dc, r);
    let t = 0.5 - sdf;
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        (t, -dsdf)
    }
}

/// Bundled 1-bit glyph rendered through a precomputed signed-distance grid.
pub struct LogoStencil {
    /// Signed distance at grid samples, in units where the glyph box spans
    /// [-1, 1].
    grid: Array2<f64>,
}

static LOGO: OnceLock<LogoStencil> = OnceLock::new();

fn logo() -> &'static LogoStencil {
    LOGO.get_or_init(|| {
        LogoStencil::from_text(include_str!("../assets/logo_stencil.txt"))
            .expect("bundled stencil is valid")
    })
}

impl LogoStencil {
    /// Parse a `#`/`.` bitmap. Rows must be non-empty and equal length. The
    /// bitmap is padded with a two-cell empty margin before the distance
    /// transform so the glyph never touches the grid edge.
    pub fn from_text(text: &str) -> Result<Self, TriggerError> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(TriggerError::BadStencil("empty bitmap".into()));
        }
        let w = rows[0].chars().count();
        if w == 0 || rows.iter().any(|r| r.chars().count() != w) {
            return Err(TriggerError::BadStencil("ragged rows".into()));
        }
        let h = rows.len();
        let pad = 2usize;
        let (gh, gw) = (h + 2 * pad, w + 2 * pad);
        let mut inside = Array2::<bool>::from_elem((gh, gw), false);
        let mut any = false;
        for (i, row) in rows.iter().enumerate() {
            for (j, ch) in row.chars().enumerate() {
                match ch {
                    '#' => {
                        inside[(i + pad, j + pad)] = true;
                        any = true;
                    }
                    '.' => {}
                    other => {
                        return Err(TriggerError::BadStencil(format!(
                            "unexpected character {other:?}"
                        )))
                    }
                }
            }
        }
        if !any {
            return Err(TriggerError::BadStencil("no `#` cells".into()));
        }
        // Brute-force signed Euclidean distance in cell units, then rescale
        // so the grid spans [-1, 1] on its longer axis.
        let mut grid = Array2::<f64>::zeros((gh, gw));
        let ins: Vec<(usize, usize)> = inside
            .indexed_iter()
            .filter(|(_, &v)| v)
            .map(|(p, _)| p)
            .collect();
        let outs: Vec<(usize, usize)> = inside
            .indexed_iter()
            .filter(|(_, &v)| !v)
            .map(|(p, _)| p)
            .collect();
        let half_extent = (gh.max(gw) - 1) as f64 / 2.0;
        for ((i, j), v) in inside.indexed_iter() {
            let opposite = if *v { &outs } else { &ins };
            let mut best = f64::INFINITY;
            for &(oi, oj) in opposite {
                let d2 = (i as f64 - oi as f64).powi(2) + (j as f64 - oj as f64).powi(2);
                if d2 < best {
                    best = d2;
                }
            }
            let d = best.sqrt() - 0.5;
            grid[(i, j)] = if *v { -d } else { d } / half_extent;
        }
        Ok(Self { grid })
    }

    /// Bilinear SDF sample at unit coordinates plus its unit-space gradient.
    fn sample(&self, qr: f64, qc: f64) -> (f64, f64, f64) {
        let (gh, gw) = (self.grid.nrows(), self.grid.ncols());
        let x = (qr + 1.0) / 2.0 * (gh - 1) as f64;
        let y = (qc + 1.0) / 2.0 * (gw - 1) as f64;
        let i0 = (x.floor() as isize).clamp(0, gh as isize - 2) as usize;
        let j0 = (y.floor() as isize).clamp(0, gw as isize - 2) as usize;
        let fx = (x - i0 as f64).clamp(0.0, 1.0);
        let fy = (y - j0 as f64).clamp(0.0, 1.0);
        let g = |i: usize, j: usize| self.grid[(i, j)];
        let v00 = g(i0, j0);
        let v01 = g(i0, j0 + 1);
        let v10 = g(i0 + 1, j0);
        let v11 = g(i0 + 1, j0 + 1);
        let value = v00 * (1.0 - fx) * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v10 * fx * (1.0 - fy)
            + v11 * fx * fy;
        let dvdx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
        let dvdy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
        let scale_r = (gh - 1) as f64 / 2.0;
        let scale_c = (gw - 1) as f64 / 2.0;
        (value, dvdx * scale_r, dvdy * scale_c)
    }

    fn sdf_and_dr(&self, dr: f64, dc: f64, r: f64) -> (f64, f64) {
        let (qr, qc) = (dr / r, dc / r);
        if qr.abs() <= 1.0 && qc.abs() <= 1.0 {
            let (s, gr, gc) = self.sample(qr, qc);
            (r * s, s - (qr * gr + qc * gc))
        } else {
            // Outside the glyph box: clamp into the box and add the residual
            // Euclidean distance, scaled back to pixel units.
            let cr = qr.clamp(-1.0, 1.0);
            let cc = qc.clamp(-1.0, 1.0);
            let (s, _, _) = self.sample(cr, cc);
            let ex = dr - r * cr;
            let ey = dc - r * cc;
            let extra = (ex * ex + ey * ey).sqrt().max(1e-12);
            let sdf = r * s + extra;
            let d_extra = -(cr * ex + cc * ey) / extra;
            (sdf, s + d_extra)
        }
    }
}

// ---------------------------------------------------------------------------
// Placement
// ---------------------------------------------------------------------------

/// Rendered trigger geometry: copy centers plus an H x W opacity stencil.
#[derive(Debug, Clone)]
pub struct TriggerPlacement {
    pub centers: Vec<(f32, f32)>,
    pub stencil: Array2<f32>,
}

/// What the position strategies anchor against.
pub enum AnchorContext<'a> {
    /// A victim object instance (bbox inclusive, plus its pixel mask).
    Object {
        bbox: (usize, usize, usize, usize),
        mask: &'a Array2<bool>,
    },
    /// The victim stuff region (B2O/B2B).
    Region { mask: &'a Array2<bool> },
    /// Whole-image placement with no victim anchor.
    Image,
}

impl AnchorContext<'_> {
    /// Width in pixels that the size fraction multiplies.
    fn anchor_width(&self, canvas_w: usize) -> f64 {
        match self {
            AnchorContext::Object { bbox, .. } => (bbox.3 - bbox.1 + 1) as f64,
            _ => canvas_w as f64,
        }
    }
}

fn mask_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    mask.indexed_iter()
        .filter(|(_, &v)| v)
        .map(|(p, _)| p)
        .collect()
}

/// Resolve `count` trigger centers for a strategy.
///
/// `object_center` puts the first copy at the bbox center and any further
/// copies at random on-object positions; the random strategies draw uniform
/// positions from their candidate pools. The RNG stream is derived from
/// `(seed, strategy)`, so position lists are prefix-stable in the count and
/// identical between concrete and relaxed rasterization.
pub fn resolve_positions(
    strategy: PositionStrategy,
    count: usize,
    canvas: (usize, usize),
    anchor: &AnchorContext,
    seed: u64,
) -> Result<Vec<(f32, f32)>, TriggerError> {
    let rng = &mut crate::seeding::rng(
        seed,
        &[crate::seeding::stream::PLACEMENT, strategy.stream_tag()],
    );
    let (h, w) = canvas;
    let pick = |pool: &[(usize, usize)], rng: &mut ChaCha8Rng| {
        let (r, c) = pool[rng.gen_range(0..pool.len())];
        (r as f32, c as f32)
    };
    match (strategy, anchor) {
        (PositionStrategy::ObjectCenter, AnchorContext::Object { bbox, mask }) => {
            let mut out = vec![(
                (bbox.0 + bbox.2) as f32 / 2.0,
                (bbox.1 + bbox.3) as f32 / 2.0,
            )];
            if count > 1 {
                let pool = mask_pixels(mask);
                if pool.is_empty() {
                    return Err(TriggerError::NoVictimInstance);
                }
                for _ in 1..count {
                    out.push(pick(&pool, rng));
                }
            }
            Ok(out)
        }
        (PositionStrategy::RandomOnObject, AnchorContext::Object { mask, .. }) => {
            let pool = mask_pixels(mask);
            if pool.is_empty() {
                return Err(TriggerError::NoVictimInstance);
            }
            Ok((0..count).map(|_| pick(&pool, rng)).collect())
        }
        (PositionStrategy::RandomOutsideObject, AnchorContext::Object { bbox, mask }) => {
            // Band of off-object pixels within 2x the bbox diagonal of the box.
            let (r0, c0, r1, c1) = *bbox;
            let diag = (((r1 - r0 + 1).pow(2) + (c1 - c0 + 1).pow(2)) as f64).sqrt();
            let reach = (2.0 * diag).ceil() as i64;
            let rr0 = (r0 as i64 - reach).max(0) as usize;
            let rr1 = ((r1 as i64 + reach) as usize).min(h - 1);
            let cc0 = (c0 as i64 - reach).max(0) as usize;
            let cc1 = ((c1 as i64 + reach) as usize).min(w - 1);
            let mut pool = Vec::new();
            for r in rr0..=rr1 {
                for c in cc0..=cc1 {
                    if !mask[(r, c)] {
                        pool.push((r, c));
                    }
                }
            }
            if pool.is_empty() {
                return Err(TriggerError::EmptyPositionPool(strategy));
            }
            Ok((0..count).map(|_| pick(&pool, rng)).collect())
        }
        (PositionStrategy::BackgroundRegion, AnchorContext::Region { mask }) => {
            let pool = mask_pixels(mask);
            if pool.is_empty() {
                return Err(TriggerError::EmptyPositionPool(strategy));
            }
            Ok((0..count).map(|_| pick(&pool, rng)).collect())
        }
        (PositionStrategy::BackgroundRegion, AnchorContext::Image) => {
            Ok((0..count)
                .map(|_| {
                    (
                        rng.gen_range(0..h) as f32,
                        rng.gen_range(0..w) as f32,
                    )
                })
                .collect())
        }
        (s, _) if s.needs_object() => Err(TriggerError::NoVictimInstance),
        (s, _) => Err(TriggerError::EmptyPositionPool(s)),
    }
}

/// A footprint field over a clipped rectangle: coverage values plus their
/// derivative w.r.t. the radius.
struct Field {
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    dvalues: Vec<f32>,
}

impl Field {
    fn render(
        shape: TriggerShape,
        centers: &[(f32, f32)],
        radius: f64,
        canvas: (usize, usize),
    ) -> Field {
        let (h, w) = canvas;
        let pad = radius + 2.0;
        let mut rmin = f64::INFINITY;
        let mut rmax = f64::NEG_INFINITY;
        let mut cmin = f64::INFINITY;
        let mut cmax = f64::NEG_INFINITY;
        for &(cr, cc) in centers {
            rmin = rmin.min(cr as f64 - pad);
            rmax = rmax.max(cr as f64 + pad);
            cmin = cmin.min(cc as f64 - pad);
            cmax = cmax.max(cc as f64 + pad);
        }
        let r0 = rmin.floor().max(0.0) as usize;
        let c0 = cmin.floor().max(0.0) as usize;
        let r1 = (rmax.ceil() as usize).min(h.saturating_sub(1));
        let c1 = (cmax.ceil() as usize).min(w.saturating_sub(1));
        if centers.is_empty() || r0 > r1 || c0 > c1 {
            return Field {
                r0: 0,
                c0: 0,
                rows: 0,
                cols: 0,
                values: Vec::new(),
                dvalues: Vec::new(),
            };
        }
        let (rows, cols) = (r1 - r0 + 1, c1 - c0 + 1);
        let mut values = vec![0f32; rows * cols];
        let mut dvalues = vec![0f32; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let (pr, pc) = ((r0 + i) as f64, (c0 + j) as f64);
                let mut sum = 0.0f64;
                let mut dsum = 0.0f64;
                for &(cr, cc) in centers {
                    let (cov, dcov) = coverage(shape, pr - cr as f64, pc - cc as f64, radius);
                    sum += cov;
                    dsum += dcov;
                }
                // Overlapping copies saturate at full opacity.
                if sum >= 1.0 {
                    values[i * cols + j] = 1.0;
                    dvalues[i * cols + j] = 0.0;
                } else {
                    values[i * cols + j] = sum as f32;
                    dvalues[i * cols + j] = dsum as f32;
                }
            }
        }
        Field {
            r0,
            c0,
            rows,
            cols,
            values,
            dvalues,
        }
    }

    fn add_scaled_to(&self, out: &mut Array2<f32>, weight: f64) {
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(self.r0 + i, self.c0 + j)] += weight as f32 * self.values[i * self.cols + j];
            }
        }
    }

    /// Returns (sum_p g(p) * value(p), sum_p g(p) * dvalue(p)).
    fn contract(&self, g: &Array2<f32>) -> (f64, f64) {
        let mut a = 0.0f64;
        let mut b = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let gv = g[(self.r0 + i, self.c0 + j)] as f64;
                a += gv * self.values[i * self.cols + j] as f64;
                b += gv * self.dvalues[i * self.cols + j] as f64;
            }
        }
        (a, b)
    }
}

/// Render a concrete trigger onto a canvas.
///
/// Stencil values equal the intensity inside each footprint (with a one-pixel
/// anti-aliased rim) and zero elsewhere. Deterministic given the seed.
pub fn rasterize(
    spec: &TriggerSpec,
    canvas: (usize, usize),
    anchor: &AnchorContext,
    seed: u64,
) -> Result<TriggerPlacement, TriggerError> {
    spec.validate()?;
    let centers = resolve_positions(spec.position, spec.quantity as usize, canvas, anchor, seed)?;
    let radius = spec.size * anchor.anchor_width(canvas.1) / 2.0;
    let field = Field::render(spec.shape, &centers, radius, canvas);
    let mut stencil = Array2::<f32>::zeros(canvas);
    field.add_scaled_to(&mut stencil, spec.intensity);
    Ok(TriggerPlacement { centers, stencil })
}

/// Selection weights (eta) per attribute, in grid order.
#[derive(Debug, Clone)]
pub struct SelectionWeights {
    pub shape: Vec<f64>,
    pub size: Vec<f64>,
    pub position: Vec<f64>,
    pub quantity: Vec<f64>,
    pub intensity: Vec<f64>,
}

/// Gradients w.r.t. the selection weights and relaxed scalars, produced by
/// [`RelaxedRaster::backprop`].
#[derive(Debug, Clone)]
pub struct TriggerGrads {
    pub d_eta_shape: Vec<f64>,
    pub d_eta_size: Vec<f64>,
    pub d_eta_position: Vec<f64>,
    pub d_eta_quantity: Vec<f64>,
    pub d_eta_intensity: Vec<f64>,
}

/// A relaxed rasterization with everything needed to backpropagate a
/// stencil-space gradient into the attribute probabilities.
pub struct RelaxedRaster {
    pub placement: TriggerPlacement,
    pub eta: SelectionWeights,
    pub lambda_size: f64,
    pub lambda_intensity: f64,
    /// Pre-intensity superposition of candidate footprints.
    pub union: Array2<f32>,
    combos: Vec<(usize, usize, usize, Field)>,
    radius_scale: f64,
    size_values: Vec<f64>,
    intensity_values: Vec<f64>,
}

impl RelaxedRaster {
    /// Contract an upstream dL/d(stencil) into per-attribute eta gradients.
    pub fn backprop(&self, d_stencil: &Array2<f32>) -> TriggerGrads {
        let ns = self.eta.shape.len();
        let np = self.eta.position.len();
        let nq = self.eta.quantity.len();
        // dL/d(union) = dL/d(stencil) * intensity; dL/d(intensity) via union.
        let mut d_int_scalar = 0.0f64;
        for (ds, u) in d_stencil.iter().zip(self.union.iter()) {
            d_int_scalar += *ds as f64 * *u as f64;
        }
        let mut d_eta_shape = vec![0.0f64; ns];
        let mut d_eta_position = vec![0.0f64; np];
        let mut d_eta_quantity = vec![0.0f64; nq];
        let mut d_radius = 0.0f64;
        let lam_i = self.lambda_intensity;
        for (j, k, l, field) in &self.combos {
            let (a, b) = field.contract(d_stencil);
            let (a, b) = (a * lam_i, b * lam_i);
            let (es, ep, eq) = (
                self.eta.shape[*j],
                self.eta.position[*k],
                self.eta.quantity[*l],
            );
            d_eta_shape[*j] += ep * eq * a;
            d_eta_position[*k] += es * eq * a;
            d_eta_quantity[*l] += es * ep * a;
            d_radius += es * ep * eq * b;
        }
        let d_lambda_size = d_radius * self.radius_scale;
        let d_eta_size = self
            .size_values
            .iter()
            .map(|&v| v * d_lambda_size)
            .collect();
        let d_eta_intensity = self
            .intensity_values
            .iter()
            .map(|&v| v * d_int_scalar)
            .collect();
        TriggerGrads {
            d_eta_shape,
            d_eta_size,
            d_eta_position,
            d_eta_quantity,
            d_eta_intensity,
        }
    }
}

/// Render the relaxed trigger: numeric attributes become eta-weighted values,
/// structural attributes an eta-weighted superposition of candidate stencils.
///
/// Position candidates share a single pool of `max(quantities)` resolved
/// centers per strategy, so quantity candidates are nested prefixes.
pub fn rasterize_relaxed(
    relaxed: &RelaxedTriggerSpec,
    noise: &GumbelNoise,
    canvas: (usize, usize),
    anchor: &AnchorContext,
    seed: u64,
) -> Result<(TriggerPlacement, SelectionWeights), TriggerError> {
    let raster = rasterize_relaxed_full(relaxed, noise, canvas, anchor, seed)?;
    Ok((raster.placement, raster.eta))
}

/// Full relaxed rasterization retaining gradient fields.
pub fn rasterize_relaxed_full(
    relaxed: &RelaxedTriggerSpec,
    noise: &GumbelNoise,
    canvas: (usize, usize),
    anchor: &AnchorContext,
    seed: u64,
) -> Result<RelaxedRaster, TriggerError> {
    relaxed.validate()?;
    let g = &relaxed.grid;
    let tau = relaxed.temperature;
    let eta = SelectionWeights {
        shape: gumbel_softmax(&relaxed.xi_shape, &noise.shape, tau)?,
        size: gumbel_softmax(&relaxed.xi_size, &noise.size, tau)?,
        position: gumbel_softmax(&relaxed.xi_position, &noise.position, tau)?,
        quantity: gumbel_softmax(&relaxed.xi_quantity, &noise.quantity, tau)?,
        intensity: gumbel_softmax(&relaxed.xi_intensity, &noise.intensity, tau)?,
    };
    let lambda_size: f64 = eta.size.iter().zip(&g.sizes).map(|(&e, &v)| e * v).sum();
    let lambda_intensity: f64 = eta
        .intensity
        .iter()
        .zip(&g.intensities)
        .map(|(&e, &v)| e * v)
        .sum();
    let radius_scale = anchor.anchor_width(canvas.1) / 2.0;
    let radius = lambda_size * radius_scale;
    let max_q = g.max_quantity() as usize;

    // One center pool per position strategy; quantity candidates take
    // prefixes so larger quantities strictly extend smaller ones.
    let mut pools: Vec<Vec<(f32, f32)>> = Vec::with_capacity(g.positions.len());
    for &strategy in &g.positions {
        pools.push(resolve_positions(strategy, max_q, canvas, anchor, seed)?);
    }

    let mut combos = Vec::with_capacity(g.shapes.len() * g.positions.len() * g.quantities.len());
    let mut union = Array2::<f32>::zeros(canvas);
    for (j, &shape) in g.shapes.iter().enumerate() {
        for (k, pool) in pools.iter().enumerate() {
            for (l, &q) in g.quantities.iter().enumerate() {
                let field = Field::render(shape, &pool[..q as usize], radius, canvas);
                let weight = eta.shape[j] * eta.position[k] * eta.quantity[l];
                field.add_scaled_to(&mut union, weight);
                combos.push((j, k, l, field));
            }
        }
    }
    // Convex combination of [0,1] masks; clamp float overshoot only.
    union.mapv_inplace(|v| v.min(1.0));
    let stencil = union.mapv(|v| v * lambda_intensity as f32);

    // Report the most probable strategy's centers; B2O region construction
    // uses them during search.
    let best_pos = eta
        .position
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let centers = pools[best_pos].clone();

    Ok(RelaxedRaster {
        placement: TriggerPlacement { centers, stencil },
        eta,
        lambda_size,
        lambda_intensity,
        union,
        combos,
        radius_scale,
        size_values: g.sizes.clone(),
        intensity_values: g.intensities.clone(),
    })
}

/// Per-pixel alpha blend: `out = (1 - m) * image + m * color` with `m` the
/// stencil. Pixels with `m = 0` are bit-identical to the input.
pub fn inject(
    image: &Array3<f32>,
    placement: &TriggerPlacement,
    color: [f32; 3],
) -> Result<Array3<f32>, TriggerError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if placement.stencil.nrows() != h || placement.stencil.ncols() != w {
        return Err(TriggerError::ShapeMismatch {
            image_h: h,
            image_w: w,
            stencil_h: placement.stencil.nrows(),
            stencil_w: placement.stencil.ncols(),
        });
    }
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            let m = placement.stencil[(r, c)];
            if m != 0.0 {
                for ch in 0..3 {
                    let x = out[(ch, r, c)];
                    out[(ch, r, c)] = x + m * (color[ch] - x);
                }
            }
        }
    }
    Ok(out)
}
