//! The fifteen image corruptions used by corruption-robustness detection.
//!
//! Operators follow the common-corruptions families (noise, blur, weather,
//! digital) with parameter ladders rescaled for small desk-scale images;
//! severity runs 1..=5. Every operator is deterministic given its seed.
//! Per-operator kernels are documented in `docs/corruptions.md`.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    ElasticTransform,
    Pixelate,
    JpegCompression,
}

/// All fifteen corruption operators, in benchmark order.
pub const ALL_CORRUPTIONS: [Corruption; 15] = [
    Corruption::GaussianNoise,
    Corruption::ShotNoise,
    Corruption::ImpulseNoise,
    Corruption::DefocusBlur,
    Corruption::GlassBlur,
    Corruption::MotionBlur,
    Corruption::ZoomBlur,
    Corruption::Snow,
    Corruption::Frost,
    Corruption::Fog,
    Corruption::Brightness,
    Corruption::Contrast,
    Corruption::ElasticTransform,
    Corruption::Pixelate,
    Corruption::JpegCompression,
];

fn sev_idx(severity: u8) -> usize {
    (severity.clamp(1, 5) - 1) as usize
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u32 {
    // Knuth's method; lambdas here stay small (< 100).
    let l = (-lambda).exp();
    let mut k = 0u32;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen_range(0.0f64..1.0);
        if p <= l || k > 4000 {
            return k;
        }
        k += 1;
    }
}

fn clamp_px(v: f32) -> f32 {
    v.clamp(0.0, 255.0)
}

/// Smooth value noise in [0, 1]: a coarse random grid upsampled bilinearly.
fn smooth_noise(h: usize, w: usize, cells: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let gh = cells.max(2);
    let gw = cells.max(2);
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.gen_range(0.0f32..1.0));
    Array2::from_shape_fn((h, w), |(r, c)| {
        let x = r as f32 / (h - 1).max(1) as f32 * (gh - 1) as f32;
        let y = c as f32 / (w - 1).max(1) as f32 * (gw - 1) as f32;
        let (i, j) = (x.floor() as usize, y.floor() as usize);
        let (fx, fy) = (x - i as f32, y - j as f32);
        let i1 = (i + 1).min(gh - 1);
        let j1 = (j + 1).min(gw - 1);
        grid[(i, j)] * (1.0 - fx) * (1.0 - fy)
            + grid[(i1, j)] * fx * (1.0 - fy)
            + grid[(i, j1)] * (1.0 - fx) * fy
            + grid[(i1, j1)] * fx * fy
    })
}

fn convolve_kernel(image: &Array3<f32>, kernel: &[(i64, i64, f32)]) -> Array3<f32> {
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for c in 0..ch {
        for r in 0..h {
            for cc in 0..w {
                let mut acc = 0.0f32;
                for &(dr, dc, k) in kernel {
                    let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                    let c2 = (cc as i64 + dc).clamp(0, w as i64 - 1) as usize;
                    acc += k * image[(c, rr, c2)];
                }
                out[(c, r, cc)] = acc;
            }
        }
    }
    out
}

fn disk_kernel(radius: i64) -> Vec<(i64, i64, f32)> {
    let mut k = Vec::new();
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            if dr * dr + dc * dc <= radius * radius {
                k.push((dr, dc, 1.0));
            }
        }
    }
    let n = k.len() as f32;
    for e in &mut k {
        e.2 /= n;
    }
    k
}

fn bilinear_sample(image: &Array3<f32>, ch: usize, r: f32, c: f32) -> f32 {
    let (h, w) = (image.shape()[1] as f32, image.shape()[2] as f32);
    let r = r.clamp(0.0, h - 1.0);
    let c = c.clamp(0.0, w - 1.0);
    let (i, j) = (r.floor() as usize, c.floor() as usize);
    let (fr, fc) = (r - i as f32, c - j as f32);
    let i1 = (i + 1).min(image.shape()[1] - 1);
    let j1 = (j + 1).min(image.shape()[2] - 1);
    image[(ch, i, j)] * (1.0 - fr) * (1.0 - fc)
        + image[(ch, i1, j)] * fr * (1.0 - fc)
        + image[(ch, i, j1)] * (1.0 - fr) * fc
        + image[(ch, i1, j1)] * fr * fc
}

/// Apply one corruption at the given severity. Deterministic per seed.
pub fn apply(image: &Array3<f32>, corruption: Corruption, severity: u8, seed: u64) -> Array3<f32> {
    let s = sev_idx(severity);
    let mut rng = seeding::rng(seed, &[stream::DEFENSE, corruption as u64, severity as u64]);
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    match corruption {
        Corruption::GaussianNoise => {
            let sigma = [8.0, 12.0, 18.0, 26.0, 38.0][s];
            let mut out = image.clone();
            out.mapv_inplace(|v| clamp_px(v + (gauss(&mut rng) * sigma) as f32));
            out
        }
        Corruption::ShotNoise => {
            let c = [60.0, 25.0, 12.0, 5.0, 3.0][s];
            let mut out = image.clone();
            out.mapv_inplace(|v| {
                let lambda = (v as f64 / 255.0 * c).max(0.0);
                clamp_px((poisson(&mut rng, lambda) as f64 / c * 255.0) as f32)
            });
            out
        }
        Corruption::ImpulseNoise => {
            let amount = [0.03, 0.06, 0.09, 0.17, 0.27][s];
            let mut out = image.clone();
            for r in 0..h {
                for c in 0..w {
                    if rng.gen_range(0.0f64..1.0) < amount {
                        let v = if rng.gen_bool(0.5) { 255.0 } else { 0.0 };
                        for k in 0..ch {
                            out[(k, r, c)] = v;
                        }
                    }
                }
            }
            out
        }
        Corruption::DefocusBlur => {
            let radius = [1i64, 2, 3, 4, 6][s];
            convolve_kernel(image, &disk_kernel(radius))
        }
        Corruption::GlassBlur => {
            let (max_shift, iters) = [(1i64, 1usize), (1, 2), (2, 1), (2, 2), (3, 2)][s];
            let mut out = image.clone();
            for _ in 0..iters {
                for r in 0..h {
                    for c in 0..w {
                        let dr = rng.gen_range(-max_shift..=max_shift);
                        let dc = rng.gen_range(-max_shift..=max_shift);
                        let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                        let c2 = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                        for k in 0..ch {
                            let t = out[(k, r, c)];
                            out[(k, r, c)] = out[(k, rr, c2)];
                            out[(k, rr, c2)] = t;
                        }
                    }
                }
            }
            out
        }
        Corruption::MotionBlur => {
            let len = [3i64, 5, 7, 9, 11][s];
            // Diagonal line kernel.
            let mut kernel = Vec::new();
            for t in -(len / 2)..=(len / 2) {
                kernel.push((t, t, 1.0 / len as f32));
            }
            convolve_kernel(image, &kernel)
        }
        Corruption::ZoomBlur => {
            let max_zoom = [1.06f32, 1.11, 1.16, 1.21, 1.26][s];
            let steps = 6;
            let (cr, cc) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
            let mut out = Array3::<f32>::zeros((ch, h, w));
            for i in 0..steps {
                let z = 1.0 + (max_zoom - 1.0) * i as f32 / (steps - 1) as f32;
                for k in 0..ch {
                    for r in 0..h {
                        for c in 0..w {
                            let sr = cr + (r as f32 - cr) / z;
                            let sc = cc + (c as f32 - cc) / z;
                            out[(k, r, c)] += bilinear_sample(image, k, sr, sc);
                        }
                    }
                }
            }
            out.mapv_inplace(|v| v / steps as f32);
            out
        }
        Corruption::Snow => {
            let (density, bright) = [(0.008, 6.0f32), (0.016, 10.0), (0.028, 14.0), (0.045, 18.0), (0.07, 24.0)][s];
            let mut out = image.mapv(|v| clamp_px(v + bright));
            let flakes = (h as f64 * w as f64 * density) as usize;
            for _ in 0..flakes {
                let r = rng.gen_range(0..h);
                let c = rng.gen_range(0..w);
                for k in 0..ch {
                    out[(k, r, c)] = 250.0;
                    if c + 1 < w {
                        out[(k, r, c + 1)] = 235.0;
                    }
                }
            }
            out
        }
        Corruption::Frost => {
            let blend = [0.18f32, 0.26, 0.34, 0.42, 0.5][s];
            let noise = smooth_noise(h, w, 9, &mut rng);
            let mut out = image.clone();
            for r in 0..h {
                for c in 0..w {
                    // Icy patches where the smooth field exceeds its midpoint.
                    let m = ((noise[(r, c)] - 0.45) * 3.0).clamp(0.0, 1.0) * blend;
                    for k in 0..ch {
                        let v = out[(k, r, c)];
                        out[(k, r, c)] = v + m * (235.0 - v);
                    }
                }
            }
            out
        }
        Corruption::Fog => {
            let amount = [0.18f32, 0.28, 0.38, 0.48, 0.58][s];
            let noise = smooth_noise(h, w, 5, &mut rng);
            let mut out = image.clone();
            for r in 0..h {
                for c in 0..w {
                    let m = amount * (0.5 + 0.5 * noise[(r, c)]);
                    for k in 0..ch {
                        let v = out[(k, r, c)];
                        out[(k, r, c)] = v + m * (255.0 - v);
                    }
                }
            }
            out
        }
        Corruption::Brightness => {
            let add = [13.0f32, 26.0, 38.0, 51.0, 64.0][s];
            image.mapv(|v| clamp_px(v + add))
        }
        Corruption::Contrast => {
            let factor = [0.85f32, 0.7, 0.55, 0.4, 0.3][s];
            let mean = image.iter().sum::<f32>() / image.len() as f32;
            image.mapv(|v| clamp_px((v - mean) * factor + mean))
        }
        Corruption::ElasticTransform => {
            let amp = [1.5f32, 2.5, 3.5, 5.0, 7.0][s];
            let dr_field = smooth_noise(h, w, 7, &mut rng).mapv(|v| (v - 0.5) * 2.0 * amp);
            let dc_field = smooth_noise(h, w, 7, &mut rng).mapv(|v| (v - 0.5) * 2.0 * amp);
            let mut out = Array3::<f32>::zeros((ch, h, w));
            for k in 0..ch {
                for r in 0..h {
                    for c in 0..w {
                        out[(k, r, c)] = bilinear_sample(
                            image,
                            k,
                            r as f32 + dr_field[(r, c)],
                            c as f32 + dc_field[(r, c)],
                        );
                    }
                }
            }
            out
        }
        Corruption::Pixelate => {
            let block = [2usize, 3, 4, 6, 8][s];
            let mut out = Array3::<f32>::zeros((ch, h, w));
            for k in 0..ch {
                for r0 in (0..h).step_by(block) {
                    for c0 in (0..w).step_by(block) {
                        let r1 = (r0 + block).min(h);
                        let c1 = (c0 + block).min(w);
                        let mut acc = 0.0f32;
                        for r in r0..r1 {
                            for c in c0..c1 {
                                acc += image[(k, r, c)];
                            }
                        }
                        let mean = acc / ((r1 - r0) * (c1 - c0)) as f32;
                        for r in r0..r1 {
                            for c in c0..c1 {
                                out[(k, r, c)] = mean;
                            }
                        }
                    }
                }
            }
            out
        }
        Corruption::JpegCompression => {
            let quality = [25u8, 18, 15, 10, 7][s];
            jpeg_roundtrip(image, quality)
        }
    }
}

fn jpeg_roundtrip(image: &Array3<f32>, quality: u8) -> Array3<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            rgb.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([
                    clamp_px(image[(0, r, c)]).round() as u8,
                    clamp_px(image[(1, r, c)]).round() as u8,
                    clamp_px(image[(2, r, c)]).round() as u8,
                ]),
            );
        }
    }
    let mut buf = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    enc.encode_image(&rgb).expect("jpeg encode");
    let back = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .expect("jpeg decode")
        .into_rgb8();
    let mut out = Array3::<f32>::zeros(image.raw_dim());
    for (x, y, p) in back.enumerate_pixels() {
        for k in 0..3 {
            out[(k, y as usize, x as usize)] = p.0[k] as f32;
        }
    }
    out
}
