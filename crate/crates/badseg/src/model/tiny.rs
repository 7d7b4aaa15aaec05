//! The tiny reference encoder-decoder.
//!
//! Three encoder stages down to 1/4 resolution, a pooled global-context
//! injection at the bottleneck (the desk-scale analogue of the pyramid /
//! atrous context modules in full segmentation backbones — without it,
//! image-wide label flips triggered by one local patch are not learnable),
//! then a 1/2-resolution decode stage ending in the pre-classifier feature
//! map. The context pools both the mean and a smooth maximum (log-sum-exp)
//! per channel: the soft-max path lets a single small pattern anywhere in
//! the image steer every position while staying differentiable. Logits upsample bilinearly back to input resolution. The feature
//! map carries a per-channel mask so defenses can zero channels.

use ndarray::{Array1, Array2, Array3};

use crate::data::LabelMap;
use crate::model::tensor::{
    bilinear_upsample, bilinear_upsample_backward, relu, relu_backward, softmax_channels,
    softmax_cross_entropy, upsample_nearest, upsample_nearest_backward, Conv,
};
use crate::model::{ModelError, ModelOutput, SegmentationModel};
use crate::seeding::{self, stream};

/// Layer indices inside `convs`.
const ENC1: usize = 0;
const ENC2: usize = 1;
const ENC3: usize = 2;
const CTX: usize = 3;
const MID: usize = 4;
const DEC: usize = 5;
const CLS: usize = 6;

/// Classifier runs at 1/2 input resolution.
const CLS_UPSCALE: usize = 2;

#[derive(Debug, Clone)]
pub struct TinySegNet {
    pub convs: Vec<Conv>,
    pub num_classes: usize,
    pub feature_channels: usize,
    /// Multiplicative mask over pre-classifier feature channels (pruning).
    pub feature_mask: Array1<f32>,
    /// Input values are divided by this before the first layer.
    pub input_scale: f32,
}

/// Per-layer tape retained for the backward pass.
pub struct Tape {
    cols: Vec<Array2<f32>>,
    pre_acts: Vec<Array3<f32>>,
    in_dims: Vec<(usize, usize)>,
    pool_alphas: Array3<f32>,
    pub features: Array3<f32>,
    pub logits: Array3<f32>,
}

/// Gradients for every conv layer, in layer order.
pub struct ParamGrads {
    pub dw: Vec<Array2<f32>>,
    pub db: Vec<Array1<f32>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &TinySegNet) -> Self {
        Self {
            dw: net.convs.iter().map(|c| Array2::zeros(c.w.raw_dim())).collect(),
            db: net.convs.iter().map(|c| Array1::zeros(c.b.raw_dim())).collect(),
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for a in self.dw.iter_mut() {
            a.mapv_inplace(|v| v * s);
        }
        for a in self.db.iter_mut() {
            a.mapv_inplace(|v| v * s);
        }
    }
}

fn spatial_mean(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv = 1.0 / (h * w) as f32;
    let mut out = Array3::<f32>::zeros((c, 1, 1));
    for ci in 0..c {
        out[(ci, 0, 0)] = x.index_axis(ndarray::Axis(0), ci).iter().sum::<f32>() * inv;
    }
    out
}

/// Sharpness of the soft spatial maximum.
const POOL_BETA: f32 = 8.0;

/// Per-channel log-sum-exp pool and its softmax weights (for backward).
fn spatial_softmax_pool(x: &Array3<f32>) -> (Array3<f32>, Array3<f32>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Array3::<f32>::zeros((c, 1, 1));
    let mut alphas = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        let m = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for r in 0..h {
            for cc in 0..w {
                let e = ((x[(ci, r, cc)] - m) * POOL_BETA).exp();
                alphas[(ci, r, cc)] = e;
                sum += e;
            }
        }
        for r in 0..h {
            for cc in 0..w {
                alphas[(ci, r, cc)] /= sum;
            }
        }
        out[(ci, 0, 0)] = m + sum.ln() / POOL_BETA;
    }
    (out, alphas)
}

impl TinySegNet {
    /// Build with the default width; `seed` fixes the initialization.
    pub fn new(num_classes: usize, seed: u64) -> Self {
        Self::with_width(num_classes, 12, seed)
    }

    /// `width` scales the encoder; the bottleneck uses `width * 8 / 3`
    /// channels and the feature map `width * 2`.
    pub fn with_width(num_classes: usize, width: usize, seed: u64) -> Self {
        let mut rng = seeding::rng(seed, &[stream::MODEL_INIT]);
        let w1 = width;
        let w2 = width * 2;
        let wb = width * 8 / 3;
        let feat = width * 2;
        let convs = vec![
            Conv::new(3, w1, 3, 1, 1, &mut rng),
            Conv::new(w1, w2, 3, 2, 1, &mut rng),
            Conv::new(w2, wb, 3, 2, 1, &mut rng),
            // Global-context projection over the [mean; max] pooled
            // bottleneck.
            Conv::new(2 * wb, wb, 1, 1, 0, &mut rng),
            Conv::new(wb, wb, 3, 1, 1, &mut rng),
            Conv::new(wb, feat, 3, 1, 1, &mut rng),
            Conv::new(feat, num_classes, 1, 1, 0, &mut rng),
        ];
        Self {
            convs,
            num_classes,
            feature_channels: feat,
            feature_mask: Array1::ones(feat),
            input_scale: 255.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    /// Zero out pre-classifier feature channels (used by pruning).
    pub fn zero_feature_channels(&mut self, channels: &[usize]) {
        for &c in channels {
            if c < self.feature_mask.len() {
                self.feature_mask[c] = 0.0;
            }
        }
    }

    fn check_input(&self, image: &Array3<f32>) -> Result<(), ModelError> {
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        if c != 3 {
            return Err(ModelError::BadInput(format!("expected 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(ModelError::BadInput(format!(
                "input dims {h}x{w} must be >= 8 and divisible by 4"
            )));
        }
        Ok(())
    }

    fn apply_feature_mask(&self, x: &mut Array3<f32>) {
        for (ch, &m) in self.feature_mask.iter().enumerate() {
            if m != 1.0 {
                x.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| v * m);
            }
        }
    }

    /// Forward pass retaining the tape for backward.
    pub fn forward_train(&self, image: &Array3<f32>) -> Result<Tape, ModelError> {
        self.check_input(image)?;
        let x0 = image.mapv(|v| v / self.input_scale - 0.5);
        let mut cols: Vec<Array2<f32>> = Vec::with_capacity(self.convs.len());
        let mut pre_acts: Vec<Array3<f32>> = Vec::with_capacity(self.convs.len());
        let mut in_dims: Vec<(usize, usize)> = Vec::with_capacity(self.convs.len());
        let push = |cols: &mut Vec<Array2<f32>>,
                        in_dims: &mut Vec<(usize, usize)>,
                        conv: &Conv,
                        x: &Array3<f32>|
         -> (Array3<f32>, ()) {
            in_dims.push((x.shape()[1], x.shape()[2]));
            let (out, col) = conv.forward(x);
            cols.push(col);
            (out, ())
        };

        let (p1, _) = push(&mut cols, &mut in_dims, &self.convs[ENC1], &x0);
        let a1 = relu(&p1);
        pre_acts.push(p1);
        let (p2, _) = push(&mut cols, &mut in_dims, &self.convs[ENC2], &a1);
        let a2 = relu(&p2);
        pre_acts.push(p2);
        let (p3, _) = push(&mut cols, &mut in_dims, &self.convs[ENC3], &a2);
        let a3 = relu(&p3);
        pre_acts.push(p3);

        // Pooled global context, injected additively at every position.
        let mean = spatial_mean(&a3);
        let (soft_max, pool_alphas) = spatial_softmax_pool(&a3);
        let mut pooled = Array3::<f32>::zeros((2 * a3.shape()[0], 1, 1));
        for ci in 0..a3.shape()[0] {
            pooled[(ci, 0, 0)] = mean[(ci, 0, 0)];
            pooled[(a3.shape()[0] + ci, 0, 0)] = soft_max[(ci, 0, 0)];
        }
        let (ctx, _) = push(&mut cols, &mut in_dims, &self.convs[CTX], &pooled);
        pre_acts.push(ctx.clone());
        let mut a3c = a3;
        for ci in 0..ctx.shape()[0] {
            let add = ctx[(ci, 0, 0)];
            a3c.index_axis_mut(ndarray::Axis(0), ci).mapv_inplace(|v| v + add);
        }

        let (p4, _) = push(&mut cols, &mut in_dims, &self.convs[MID], &a3c);
        let a4 = relu(&p4);
        pre_acts.push(p4);
        let a4up = upsample_nearest(&a4, 2);
        let (p5, _) = push(&mut cols, &mut in_dims, &self.convs[DEC], &a4up);
        let mut a5 = relu(&p5);
        pre_acts.push(p5);
        self.apply_feature_mask(&mut a5);
        let features = a5.clone();
        let (logits, _) = push(&mut cols, &mut in_dims, &self.convs[CLS], &a5);
        pre_acts.push(logits.clone());

        Ok(Tape {
            cols,
            pre_acts,
            in_dims,
            pool_alphas,
            features,
            logits,
        })
    }

    /// Backward from a gradient on the (1/2-resolution) logits.
    /// Returns parameter gradients and, if requested, the input gradient in
    /// original pixel units.
    pub fn backward(
        &self,
        tape: &Tape,
        d_logits: &Array3<f32>,
        want_input_grad: bool,
    ) -> (ParamGrads, Option<Array3<f32>>) {
        let bw = |idx: usize, d: &Array3<f32>| {
            let (h, w) = tape.in_dims[idx];
            self.convs[idx].backward(&tape.cols[idx], h, w, d)
        };
        let (dw6, db6, mut d_a5) = bw(CLS, d_logits);
        // Classifier saw masked features; chain the mask then the relu.
        for (ch, &m) in self.feature_mask.iter().enumerate() {
            if m != 1.0 {
                d_a5.index_axis_mut(ndarray::Axis(0), ch).mapv_inplace(|v| v * m);
            }
        }
        let d_p5 = relu_backward(&tape.pre_acts[DEC], &d_a5);
        let (dw5, db5, d_a4up) = bw(DEC, &d_p5);
        let d_a4 = upsample_nearest_backward(&d_a4up, 2);
        let d_p4 = relu_backward(&tape.pre_acts[MID], &d_a4);
        let (dw4, db4, d_a3c) = bw(MID, &d_p4);

        // Context: a3c = a3 + broadcast(ctx([mean(a3); softmaxpool(a3)])).
        let d_ctx = spatial_sum(&d_a3c);
        let (dwc, dbc, d_pooled) = bw(CTX, &d_ctx);
        let (h3, w3) = (d_a3c.shape()[1], d_a3c.shape()[2]);
        let nb = d_a3c.shape()[0];
        let inv = 1.0 / (h3 * w3) as f32;
        let mut d_a3 = d_a3c;
        for ci in 0..nb {
            // Mean path distributes uniformly; the soft-max path follows its
            // softmax weights.
            let add = d_pooled[(ci, 0, 0)] * inv;
            let g_max = d_pooled[(nb + ci, 0, 0)];
            for r in 0..h3 {
                for cc in 0..w3 {
                    d_a3[(ci, r, cc)] += add + g_max * tape.pool_alphas[(ci, r, cc)];
                }
            }
        }

        let d_p3 = relu_backward(&tape.pre_acts[ENC3], &d_a3);
        let (dw3, db3, d_a2) = bw(ENC3, &d_p3);
        let d_p2 = relu_backward(&tape.pre_acts[ENC2], &d_a2);
        let (dw2, db2, d_a1) = bw(ENC2, &d_p2);
        let d_p1 = relu_backward(&tape.pre_acts[ENC1], &d_a1);
        let (dw1, db1, d_x0) = bw(ENC1, &d_p1);

        let grads = ParamGrads {
            dw: vec![dw1, dw2, dw3, dwc, dw4, dw5, dw6],
            db: vec![db1, db2, db3, dbc, db4, db5, db6],
        };
        let input_grad = want_input_grad.then(|| d_x0.mapv(|v| v / self.input_scale));
        (grads, input_grad)
    }

    /// Cross-entropy loss against a full-resolution target, with the logits
    /// gradient mapped back through the bilinear upsampling.
    pub fn loss_grads(
        &self,
        image: &Array3<f32>,
        target: &LabelMap,
        ignore_index: u8,
        want_input_grad: bool,
    ) -> Result<(f64, ParamGrads, Option<Array3<f32>>), ModelError> {
        let tape = self.forward_train(image)?;
        let logits_full = bilinear_upsample(&tape.logits, CLS_UPSCALE);
        let (loss, d_full) = softmax_cross_entropy(&logits_full, &target.0, ignore_index)
            .ok_or(ModelError::NoValidPixels)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        let d_logits = bilinear_upsample_backward(&d_full, CLS_UPSCALE);
        let (grads, input_grad) = self.backward(&tape, &d_logits, want_input_grad);
        Ok((loss, grads, input_grad))
    }

    /// Loss only (no gradients), for per-sample scoring.
    pub fn loss(
        &self,
        image: &Array3<f32>,
        target: &LabelMap,
        ignore_index: u8,
    ) -> Result<f64, ModelError> {
        let out = self.forward(image);
        let (k, h, w) = (
            out.confidence.shape()[0],
            out.confidence.shape()[1],
            out.confidence.shape()[2],
        );
        let mut loss = 0.0f64;
        let mut n = 0usize;
        for r in 0..h {
            for c in 0..w {
                let t = target.0[(r, c)];
                if t == ignore_index || t as usize >= k {
                    continue;
                }
                loss -= (out.confidence[(t as usize, r, c)].max(1e-12) as f64).ln();
                n += 1;
            }
        }
        if n == 0 {
            return Err(ModelError::NoValidPixels);
        }
        Ok(loss / n as f64)
    }
}

fn spatial_sum(x: &Array3<f32>) -> Array3<f32> {
    let c = x.shape()[0];
    let mut out = Array3::<f32>::zeros((c, 1, 1));
    for ci in 0..c {
        out[(ci, 0, 0)] = x.index_axis(ndarray::Axis(0), ci).iter().sum::<f32>();
    }
    out
}

impl SegmentationModel for TinySegNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn forward(&self, image: &Array3<f32>) -> ModelOutput {
        let tape = self
            .forward_train(image)
            .expect("contract: image dims validated by caller");
        let logits_full = bilinear_upsample(&tape.logits, CLS_UPSCALE);
        ModelOutput {
            confidence: softmax_channels(&logits_full),
            features: tape.features,
        }
    }

    fn loss_and_input_grad(
        &self,
        image: &Array3<f32>,
        target: &LabelMap,
        ignore_index: u8,
    ) -> Result<(f64, Array3<f32>), ModelError> {
        let (loss, _, input_grad) = self.loss_grads(image, target, ignore_index, true)?;
        Ok((loss, input_grad.expect("requested")))
    }
}

/// Desk-scale stand-in for a full segmentation backbone.
pub fn reference_tiny_model(num_classes: usize, seed: u64) -> TinySegNet {
    TinySegNet::new(num_classes, seed)
}
