//! Fusion quality metrics on the 0–255 luma scale.
//!
//! Color inputs are reduced to unrounded BT.601 luma first; the entropy
//! histogram uses the luma rounded to 8 bits.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, LumaPlane, RgbImage};
use crate::imageio;
use crate::loss::{ssim, SsimConfig};

/// Edge-preservation sigmoid constants of Q^AB/F.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct QabfConstants {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    /// Exponent applied to source edge strength in the weights.
    pub weight_exponent: f64,
}

impl Default for QabfConstants {
    fn default() -> Self {
        QabfConstants {
            gamma_g: 0.9994,
            kappa_g: -15.0,
            sigma_g: 0.5,
            gamma_a: 0.9879,
            kappa_a: -22.0,
            sigma_a: 0.8,
            weight_exponent: 1.0,
        }
    }
}

impl QabfConstants {
    /// Q^AF for a pixel with perfectly preserved strength and orientation:
    /// the largest value the metric can take.
    pub fn ceiling(&self) -> f64 {
        self.gamma_g / (1.0 + (self.kappa_g * (1.0 - self.sigma_g)).exp())
            * (self.gamma_a / (1.0 + (self.kappa_a * (1.0 - self.sigma_a)).exp()))
    }
}

/// Mean of `sqrt((gx² + gy²) / 2)` over the `(H−1)·(W−1)` pixels that have
/// both forward differences.
pub fn avg_gradient(img: &LumaPlane) -> Result<f64> {
    let (w, h) = (img.width, img.height);
    if w < 2 || h < 2 {
        return Err(Error::invalid(format!("average gradient needs at least 2x2, got {w}x{h}")));
    }
    let mut sum = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let v = img.get(x, y);
            let gx = img.get(x + 1, y) - v;
            let gy = img.get(x, y + 1) - v;
            sum += ((gx * gx + gy * gy) / 2.0).sqrt();
        }
    }
    Ok(sum / ((w - 1) * (h - 1)) as f64)
}

/// Population standard deviation.
pub fn std_dev(img: &LumaPlane) -> f64 {
    let n = img.values.len() as f64;
    let mean = img.values.iter().sum::<f64>() / n;
    (img.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn histogram(img: &LumaPlane) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in &img.values {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    hist
}

/// Shannon entropy in bits of the 256-bin histogram.
pub fn entropy(img: &LumaPlane) -> f64 {
    let hist = histogram(img);
    let n = img.values.len() as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Sobel responses with replicated borders: `(horizontal, vertical)`.
pub fn sobel(img: &LumaPlane) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width as isize, img.height as isize);
    let at = |x: isize, y: isize| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let mut sx = Vec::with_capacity(img.values.len());
    let mut sy = Vec::with_capacity(img.values.len());
    for y in 0..h {
        for x in 0..w {
            sx.push(
                (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1)),
            );
            sy.push(
                (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1)),
            );
        }
    }
    (sx, sy)
}

struct Edges {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn edges(img: &LumaPlane) -> Edges {
    let (sx, sy) = sobel(img);
    Edges {
        strength: sx.iter().zip(&sy).map(|(x, y)| x.hypot(*y)).collect(),
        // atan of the ratio, so orientation lives in [−π/2, π/2]; a zero
        // horizontal response maps to ±π/2 (or 0 on flat pixels).
        orientation: sx
            .iter()
            .zip(&sy)
            .map(|(&x, &y)| if x == 0.0 && y == 0.0 { 0.0 } else { (y / x).atan() })
            .collect(),
    }
}

/// Per-pixel preservation of a source's edges in the fused image.
fn preservation(src: &Edges, fused: &Edges, k: &QabfConstants) -> Vec<f64> {
    (0..src.strength.len())
        .map(|i| {
            let (ga, gf) = (src.strength[i], fused.strength[i]);
            let g = if ga == gf {
                1.0
            } else if ga > gf {
                gf / ga
            } else {
                ga / gf
            };
            let a = 1.0 - (src.orientation[i] - fused.orientation[i]).abs() / FRAC_PI_2;
            let qg = k.gamma_g / (1.0 + (k.kappa_g * (g - k.sigma_g)).exp());
            let qa = k.gamma_a / (1.0 + (k.kappa_a * (a - k.sigma_a)).exp());
            qg * qa
        })
        .collect()
}

/// Edge-preservation score of `f` against sources `a` and `b`, in `[0, 1]`.
/// Returns 0 when neither source has any edge.
pub fn q_abf_with(a: &LumaPlane, b: &LumaPlane, f: &LumaPlane, k: &QabfConstants) -> Result<f64> {
    let dims = (a.width, a.height);
    if (b.width, b.height) != dims || (f.width, f.height) != dims {
        return Err(Error::shape(format!(
            "Q^AB/F inputs differ in size: {}x{}, {}x{}, {}x{}",
            a.width, a.height, b.width, b.height, f.width, f.height
        )));
    }
    let (ea, eb, ef) = (edges(a), edges(b), edges(f));
    let (qa, qb) = (preservation(&ea, &ef, k), preservation(&eb, &ef, k));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..qa.len() {
        let wa = ea.strength[i].powf(k.weight_exponent);
        let wb = eb.strength[i].powf(k.weight_exponent);
        num += qa[i] * wa + qb[i] * wb;
        den += wa + wb;
    }
    Ok(if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 })
}

pub fn q_abf(a: &LumaPlane, b: &LumaPlane, f: &LumaPlane) -> Result<f64> {
    q_abf_with(a, b, f, &QabfConstants::default())
}

/// SSIM of two RGB images on the `[0, 1]` scale, in double precision.
pub fn ssim_rgb(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    let tx = images_to_tensor::<f64>(&[x])?;
    let ty = images_to_tensor::<f64>(&[y])?;
    ssim(&tx, &ty, &SsimConfig::default())?.item()
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub avg: f64,
    pub std: f64,
    pub sen: f64,
    pub q_abf: f64,
    pub ssim_to_gt: Option<f64>,
}

pub fn evaluate(fused: &RgbImage, a: &RgbImage, b: &RgbImage, gt: Option<&RgbImage>) -> Result<MetricReport> {
    let dims = (fused.width(), fused.height());
    for (what, img) in [("source A", a), ("source B", b)].into_iter().chain(gt.map(|g| ("ground truth", g))) {
        if (img.width(), img.height()) != dims {
            return Err(Error::shape(format!(
                "{what} is {}x{}, fused image is {}x{}",
                img.width(),
                img.height(),
                dims.0,
                dims.1
            )));
        }
    }
    let lf = fused.luma_plane();
    Ok(MetricReport {
        avg: avg_gradient(&lf)?,
        std: std_dev(&lf),
        sen: entropy(&lf),
        q_abf: q_abf(&a.luma_plane(), &b.luma_plane(), &lf)?,
        ssim_to_gt: gt.map(|g| ssim_rgb(fused, g)).transpose()?,
    })
}

/// Field-wise arithmetic mean. `ssim_to_gt` averages over the reports that
/// have it and is `None` if none do.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let with_gt: Vec<f64> = reports.iter().filter_map(|r| r.ssim_to_gt).collect();
    Some(MetricReport {
        avg: mean(|r| r.avg),
        std: mean(|r| r.std),
        sen: mean(|r| r.sen),
        q_abf: mean(|r| r.q_abf),
        ssim_to_gt: (!with_gt.is_empty()).then(|| with_gt.iter().sum::<f64>() / with_gt.len() as f64),
    })
}

pub const CSV_HEADER: &str = "image,avg,std,sen,qabf,ssim_gt";

fn csv_row(name: &str, r: &MetricReport) -> String {
    let gt = r.ssim_to_gt.map(|v| v.to_string()).unwrap_or_default();
    format!("{name},{},{},{},{},{gt}", r.avg, r.std, r.sen, r.q_abf)
}

/// Per-image rows followed by a `mean` row.
pub fn write_csv(out: &mut impl Write, rows: &[(String, MetricReport)]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for (name, r) in rows {
        writeln!(out, "{}", csv_row(name, r))?;
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = mean_report(&reports) {
        writeln!(out, "{}", csv_row("mean", &mean))?;
    }
    Ok(())
}

fn by_stem(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = BTreeMap::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && imageio::is_image_path(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                found.entry(stem.to_string()).or_insert(path);
            }
        }
    }
    Ok(found)
}

/// Evaluates every fused image that has same-stem counterparts in the
/// source directories (and in `gt_dir`, when given).
pub fn evaluate_dirs(
    fused_dir: &Path,
    a_dir: &Path,
    b_dir: &Path,
    gt_dir: Option<&Path>,
) -> Result<Vec<(String, MetricReport)>> {
    let fused = by_stem(fused_dir)?;
    let (a, b) = (by_stem(a_dir)?, by_stem(b_dir)?);
    let gt = gt_dir.map(by_stem).transpose()?;
    let mut rows = Vec::new();
    for (stem, fpath) in &fused {
        let (Some(apath), Some(bpath)) = (a.get(stem), b.get(stem)) else {
            log::warn!("no sources for {}, skipping", fpath.display());
            continue;
        };
        let gt_img = match gt.as_ref().map(|g| g.get(stem)) {
            Some(Some(p)) => Some(imageio::read_rgb(p)?),
            Some(None) => {
                log::warn!("no ground truth for {}", fpath.display());
                None
            }
            None => None,
        };
        let report = evaluate(
            &imageio::read_rgb(fpath)?,
            &imageio::read_rgb(apath)?,
            &imageio::read_rgb(bpath)?,
            gt_img.as_ref(),
        )?;
        rows.push((stem.clone(), report));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "no fused image in {} has matching sources",
            fused_dir.display()
        )));
    }
    Ok(rows)
}
