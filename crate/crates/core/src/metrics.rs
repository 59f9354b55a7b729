//! Image comparison metrics over pixel subsets.

use crate::image::{FisheyeFrame, Image, CHANNELS};
use crate::projection::coordinate_grid;

/// Pixels at least `band` pixels inside the rim of the unit image circle.
pub fn interior_mask(width: usize, band: f64) -> Vec<bool> {
    let limit = 1.0 - 2.0 * band / width as f64;
    coordinate_grid(width)
        .iter()
        .map(|c| c.radius() <= limit)
        .collect()
}

/// Mean absolute difference over masked pixels and all channels.
pub fn mae(a: &Image, b: &Image, mask: &[bool]) -> f64 {
    let n = a.pixels();
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..CHANNELS {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for k in 0..n {
            if mask[k] {
                sum += (pa[k] as f64 - pb[k] as f64).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn mse(a: &Image, b: &Image, mask: &[bool]) -> (f64, usize) {
    let n = a.pixels();
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..CHANNELS {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for k in 0..n {
            if mask[k] {
                let d = pa[k] as f64 - pb[k] as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    (sum, count)
}

fn gaussian_kernel() -> [f64; 11] {
    let mut k = [0.0; 11];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur, weights renormalized at the image border.
fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let (mut acc, mut ws) = (0.0, 0.0);
                for (t, kv) in k.iter().enumerate() {
                    let off = t as isize - 5;
                    let (rr, cc) = if horizontal {
                        (r as isize, c as isize + off)
                    } else {
                        (r as isize + off, c as isize)
                    };
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    acc += kv * src[rr as usize * w + cc as usize];
                    ws += kv;
                }
                out[r * w + c] = acc / ws;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, unit dynamic range) over
/// masked pixels, averaged across channels.
pub fn ssim(a: &Image, b: &Image, mask: &[bool]) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (w, h) = (a.width(), a.height());
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..CHANNELS {
        let x: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h), blur(&y, w, h));
        let (sxx, syy, sxy) = (blur(&xx, w, h), blur(&yy, w, h), blur(&xy, w, h));
        for k in 0..w * h {
            if !mask[k] {
                continue;
            }
            let (vx, vy) = (sxx[k] - mx[k] * mx[k], syy[k] - my[k] * my[k]);
            let cov = sxy[k] - mx[k] * my[k];
            let s = ((2.0 * mx[k] * my[k] + C1) * (2.0 * cov + C2))
                / ((mx[k] * mx[k] + my[k] * my[k] + C1) * (vx + vy + C2));
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

/// Front and back compared over the same per-lens mask.
pub fn frame_mae(a: &FisheyeFrame, b: &FisheyeFrame, mask: &[bool]) -> f64 {
    0.5 * (mae(&a.front, &b.front, mask) + mae(&a.back, &b.back, mask))
}

pub fn frame_ssim(a: &FisheyeFrame, b: &FisheyeFrame, mask: &[bool]) -> f64 {
    0.5 * (ssim(&a.front, &b.front, mask) + ssim(&a.back, &b.back, mask))
}

/// PSNR in dB for unit-range images over both lenses.
pub fn frame_psnr(a: &FisheyeFrame, b: &FisheyeFrame, mask: &[bool]) -> f64 {
    let (s1, n1) = mse(&a.front, &b.front, mask);
    let (s2, n2) = mse(&a.back, &b.back, mask);
    let m = (s1 + s2) / (n1 + n2).max(1) as f64;
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}
