//! Procedural fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufa_fuse::dataset::{synthesize, ImageTriplet, DEFAULT_THRESHOLD};
use ufa_fuse::image::{GrayImage, RgbImage};
use ufa_fuse::train::TrainingTriplet;

/// Sum of random plane waves per channel plus a few flat rectangles.
pub fn texture(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut planes = vec![vec![0.0f64; size * size]; 3];
    for plane in &mut planes {
        let waves: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| (rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                plane[y * size + x] = waves
                    .iter()
                    .map(|(fx, fy, ph)| (2.0 * std::f64::consts::PI * (fx * u + fy * v) + ph).sin())
                    .sum();
            }
        }
    }
    let lo = planes.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = planes.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut data: Vec<u8> = (0..size * size)
        .flat_map(|i| planes.iter().map(move |p| ((p[i] - lo) / (hi - lo) * 255.0).round() as u8))
        .collect();
    for _ in 0..6 {
        let (x0, y0) = (rng.gen_range(0..size - 8), rng.gen_range(0..size - 8));
        let (w, h) = (rng.gen_range(4..16), rng.gen_range(4..16));
        let color: [u8; 3] = rng.gen();
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                data[(y * size + x) * 3..][..3].copy_from_slice(&color);
            }
        }
    }
    RgbImage::new(size, size, data).unwrap()
}

/// Filled ellipse mask: 255 inside, 0 outside.
pub fn ellipse_mask(size: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let s = size as f64;
    let (cx, cy) = (rng.gen_range(0.25 * s..0.75 * s), rng.gen_range(0.25 * s..0.75 * s));
    let (rx, ry) = (rng.gen_range(0.15 * s..0.375 * s), rng.gen_range(0.15 * s..0.375 * s));
    GrayImage::from_fn(size, size, |x, y| {
        let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
        if dx * dx + dy * dy <= 1.0 { 255 } else { 0 }
    })
}

/// `count` synthetic triplets, one blur group each in turn.
pub fn synthetic_triplets(count: usize, size: usize, seed: u64) -> Vec<ImageTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let src = texture(size, &mut rng);
            let mask = ellipse_mask(size, &mut rng);
            synthesize(&src, &mask, i % 4, seed ^ i as u64, DEFAULT_THRESHOLD).unwrap()
        })
        .collect()
}

pub fn training_set(triplets: &[ImageTriplet]) -> Vec<TrainingTriplet> {
    triplets
        .iter()
        .map(|t| TrainingTriplet {
            near: t.near.clone(),
            far: t.far.clone(),
            gt: t.gt.clone(),
        })
        .collect()
}

pub fn random_rgb(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| rng.gen())
}

pub fn random_gray(w: usize, h: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.gen())
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Direct nested-loop cross-correlation with zero padding `pad`.
pub fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    kernel: &[f64],
    (o, k): (usize, usize),
    bias: &[f64],
    pad: usize,
) -> Vec<f64> {
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += kernel[((oc * c + ic) * k + ky) * k + kx]
                                    * x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Box filter straight from the definition: average the k×k window
/// `[x - (k-1)/2, x + k/2]` with clamped coordinates, round half up.
pub fn mean_blur_oracle(img: &RgbImage, k: usize) -> RgbImage {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let before = ((k - 1) / 2) as isize;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        std::array::from_fn(|c| {
            let mut sum = 0u32;
            for dy in 0..k as isize {
                for dx in 0..k as isize {
                    let sx = (x as isize + dx - before).clamp(0, w - 1) as usize;
                    let sy = (y as isize + dy - before).clamp(0, h - 1) as usize;
                    sum += u32::from(img.pixel(sx, sy)[c]);
                }
            }
            (f64::from(sum) / (k * k) as f64 + 0.5).floor() as u8
        })
    })
}

pub fn luma_values(img: &RgbImage) -> Vec<f64> {
    (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
        .map(|(x, y)| {
            let p = img.pixel(x, y);
            0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
        })
        .collect()
}

pub fn avg_oracle(v: &[f64], w: usize, h: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let dx = v[y * w + x + 1] - v[y * w + x];
            let dy = v[(y + 1) * w + x] - v[y * w + x];
            total += (0.5 * (dx * dx + dy * dy)).sqrt();
            count += 1;
        }
    }
    total / count as f64
}

pub fn std_oracle(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mut mean = 0.0;
    for &x in v {
        mean += x;
    }
    mean /= n;
    let mut var = 0.0;
    for &x in v {
        var += (x - mean) * (x - mean);
    }
    (var / n).sqrt()
}

pub fn entropy_oracle(v: &[f64]) -> f64 {
    let mut counts = std::collections::HashMap::new();
    for &x in v {
        *counts.entry(x.round() as i64).or_insert(0usize) += 1;
    }
    let n = v.len() as f64;
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln() / std::f64::consts::LN_2).sum()
}

/// Xydeas–Petrović edge preservation, written out per pixel.
pub fn qabf_oracle(a: &[f64], b: &[f64], f: &[f64], w: usize, h: usize) -> f64 {
    const SX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const SY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let grad = |img: &[f64], x: usize, y: usize| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for j in 0..3 {
            for i in 0..3 {
                let sx = (x as isize + i as isize - 1).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + j as isize - 1).clamp(0, h as isize - 1) as usize;
                gx += SX[j][i] * img[sy * w + sx];
                gy += SY[j][i] * img[sy * w + sx];
            }
        }
        let strength = (gx * gx + gy * gy).sqrt();
        let angle = if gx == 0.0 && gy == 0.0 { 0.0 } else { (gy / gx).atan() };
        (strength, angle)
    };
    let keep = |(gs, as_): (f64, f64), (gf, af): (f64, f64)| {
        let g = if gs == gf { 1.0 } else { gs.min(gf) / gs.max(gf) };
        let a = 1.0 - (as_ - af).abs() / (std::f64::consts::PI / 2.0);
        let qg = 0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp());
        let qa = 0.9879 / (1.0 + (-22.0 * (a - 0.8)).exp());
        qg * qa
    };
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (ea, eb, ef) = (grad(a, x, y), grad(b, x, y), grad(f, x, y));
            num += keep(ea, ef) * ea.0 + keep(eb, ef) * eb.0;
            den += ea.0 + eb.0;
        }
    }
    if den == 0.0 { 0.0 } else { num / den }
}

/// A triplet's identity checks: `near + far == gt + blur(gt)` per byte and
/// the focused half of each image equal to the ground truth.
pub fn check_triplet(t: &ImageTriplet) -> Result<(), String> {
    let blurred = mean_blur_oracle(&t.gt, t.kernel_size);
    if blurred != t.blurred {
        return Err(format!("blurred image differs from the box-filter oracle (k = {})", t.kernel_size));
    }
    for y in 0..t.gt.height() {
        for x in 0..t.gt.width() {
            let (n, f, g, b) = (t.near.pixel(x, y), t.far.pixel(x, y), t.gt.pixel(x, y), blurred.pixel(x, y));
            for c in 0..3 {
                if u16::from(n[c]) + u16::from(f[c]) != u16::from(g[c]) + u16::from(b[c]) {
                    return Err(format!("sum identity broken at ({x}, {y}) channel {c}"));
                }
            }
            let focused = if t.focus_map.get(x, y) == 1 { n } else { f };
            if focused != g {
                return Err(format!("focused pixel ({x}, {y}) differs from ground truth"));
            }
        }
    }
    Ok(())
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5), per plane, by
/// direct summation. `planes` holds equally sized `h × w` planes in [0, 1].
pub fn ssim_oracle(x: &[Vec<f64>], y: &[Vec<f64>], w: usize, h: usize) -> f64 {
    const WIN: usize = 11;
    let g: Vec<f64> = (0..WIN).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0usize;
    for (px, py) in x.iter().zip(y) {
        for oy in 0..=h - WIN {
            for ox in 0..=w - WIN {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..WIN {
                    for i in 0..WIN {
                        let wt = g[j] * g[i] / norm;
                        let (a, b) = (px[(oy + j) * w + ox + i], py[(oy + j) * w + ox + i]);
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}
