//! Static image rendering: label colorization, before/after panels, and
//! score-density (KDE) plots.

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::data::LabelMap;

/// Fixed palette; class id indexes into it (wrapping).
pub const PALETTE: [[u8; 3]; 12] = [
    [90, 140, 90],
    [110, 110, 120],
    [200, 60, 60],
    [230, 205, 60],
    [80, 90, 200],
    [170, 80, 180],
    [70, 190, 190],
    [240, 140, 50],
    [130, 210, 100],
    [210, 120, 160],
    [150, 150, 60],
    [60, 60, 60],
];

pub fn class_color(id: u8) -> [u8; 3] {
    if id == 255 {
        return [0, 0, 0];
    }
    PALETTE[id as usize % PALETTE.len()]
}

pub fn image_to_rgb(image: &Array3<f32>) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            out.put_pixel(
                c as u32,
                r as u32,
                Rgb([
                    image[(0, r, c)].round().clamp(0.0, 255.0) as u8,
                    image[(1, r, c)].round().clamp(0.0, 255.0) as u8,
                    image[(2, r, c)].round().clamp(0.0, 255.0) as u8,
                ]),
            );
        }
    }
    out
}

pub fn colorize_label(label: &LabelMap) -> RgbImage {
    let (h, w) = (label.height(), label.width());
    let mut out = RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            out.put_pixel(c as u32, r as u32, Rgb(class_color(label.get(r, c))));
        }
    }
    out
}

/// Blend a colorized label over an image (alpha 0.45).
pub fn overlay_label(image: &Array3<f32>, label: &LabelMap) -> RgbImage {
    let base = image_to_rgb(image);
    let mask = colorize_label(label);
    let mut out = base.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let m = mask.get_pixel(x, y);
        for k in 0..3 {
            p.0[k] = (0.55 * p.0[k] as f32 + 0.45 * m.0[k] as f32) as u8;
        }
    }
    out
}

/// Horizontal strip of equally-sized panels with 2 px separators.
pub fn side_by_side(panels: &[RgbImage]) -> RgbImage {
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(1);
    let sep = 2u32;
    let w: u32 = panels.iter().map(|p| p.width() + sep).sum::<u32>().saturating_sub(sep);
    let mut out = RgbImage::from_pixel(w.max(1), h.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0u32;
    for p in panels {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width() + sep;
    }
    out
}

/// Gaussian-kernel density estimate rendered as two curves (clean green,
/// poisoned red) with a light axis frame.
pub fn kde_plot(clean: &[f64], poisoned: &[f64], width: u32, height: u32) -> RgbImage {
    let mut out = RgbImage::from_pixel(width, height, Rgb([252, 252, 252]));
    let all: Vec<f64> = clean.iter().chain(poisoned.iter()).copied().collect();
    if all.is_empty() {
        return out;
    }
    let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-9);
    let (lo, hi) = (min - 0.15 * span, max + 0.15 * span);
    let bandwidth = |xs: &[f64]| -> f64 {
        // Silverman's rule with a floor to survive near-constant scores.
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / n;
        (1.06 * var.sqrt() * n.powf(-0.2)).max(span * 0.02)
    };
    let density = |xs: &[f64], at: f64| -> f64 {
        let h = bandwidth(xs);
        xs.iter()
            .map(|&x| (-0.5 * ((at - x) / h).powi(2)).exp())
            .sum::<f64>()
            / (xs.len() as f64 * h * (std::f64::consts::TAU).sqrt())
    };
    let margin = 24u32;
    let plot_w = width - 2 * margin;
    let plot_h = height - 2 * margin;
    let mut curves: Vec<(Vec<f64>, [u8; 3])> = Vec::new();
    for (xs, color) in [(clean, [60u8, 150, 60]), (poisoned, [200, 60, 60])] {
        if xs.is_empty() {
            continue;
        }
        let vals: Vec<f64> = (0..plot_w)
            .map(|i| density(xs, lo + (hi - lo) * i as f64 / (plot_w - 1) as f64))
            .collect();
        curves.push((vals, color));
    }
    let peak = curves
        .iter()
        .flat_map(|(v, _)| v.iter())
        .cloned()
        .fold(1e-12, f64::max);
    // Frame.
    for x in margin..(width - margin) {
        out.put_pixel(x, height - margin, Rgb([120, 120, 120]));
    }
    for y in margin..(height - margin) {
        out.put_pixel(margin, y, Rgb([120, 120, 120]));
    }
    for (vals, color) in &curves {
        for i in 0..plot_w {
            let v = (vals[i as usize] / peak * (plot_h - 2) as f64) as u32;
            let y = height - margin - 1 - v.min(plot_h - 1);
            let x = margin + i;
            // Thicken vertically for visibility.
            for dy in 0..2 {
                let yy = y.saturating_add(dy).min(height - 1);
                out.put_pixel(x, yy, Rgb(*color));
            }
        }
    }
    // Legend swatches (top-left): clean then poisoned.
    for (i, (_, color)) in curves.iter().enumerate() {
        for dx in 0..12u32 {
            for dy in 0..4u32 {
                out.put_pixel(margin + 4 + dx, margin / 2 + (i as u32) * 8 + dy, Rgb(*color));
            }
        }
    }
    out
}
