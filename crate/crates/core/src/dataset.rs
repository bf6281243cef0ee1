//! Synthetic multi-focus triplets.
//!
//! Each source image is blurred with a mean filter whose size comes from
//! one of four blur groups. A binarized saliency mask selects which region
//! stays sharp in the "near" image; the "far" image is its complement. The
//! untouched source is the ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::imageio;

/// Mean-filter sizes per blur group, inclusive. Groups 1 and 2 share k = 5.
pub const BLUR_GROUPS: [RangeInclusive<usize>; 4] = [2..=3, 4..=5, 5..=7, 8..=10];
pub const DEFAULT_THRESHOLD: u8 = 128;
pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn sample_kernel<R: Rng + ?Sized>(group: usize, rng: &mut R) -> Result<usize> {
    let range = BLUR_GROUPS
        .get(group)
        .ok_or_else(|| Error::invalid(format!("blur group {group} (expected 0..=3)")))?;
    Ok(rng.gen_range(range.clone()))
}

/// Box filter of size `k`, per channel, rounded half up.
///
/// Borders replicate the edge pixel. For even `k` the window spans
/// `[x - (k-1)/2, x + k/2]`, i.e. the extra column/row falls after the pixel.
pub fn mean_blur(img: &RgbImage, k: usize) -> Result<RgbImage> {
    if k < 2 {
        return Err(Error::invalid(format!("mean filter size {k} (expected >= 2)")));
    }
    let (w, h) = (img.width(), img.height());
    if k > w || k > h {
        return Err(Error::invalid(format!(
            "mean filter size {k} larger than {w}x{h} image"
        )));
    }
    let before = (k - 1) / 2;
    let (pw, ph) = (w + k - 1, h + k - 1);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let area = (k * k) as u64;
    let mut out = vec![0u8; w * h * 3];
    // Summed-area table over the replicate-padded image, one channel at a time.
    let mut table = vec![0u64; (pw + 1) * (ph + 1)];
    for c in 0..3 {
        for py in 0..ph {
            let sy = clamp(py as isize - before as isize, h);
            let mut row = 0u64;
            for px in 0..pw {
                let sx = clamp(px as isize - before as isize, w);
                row += u64::from(img.data()[(sy * w + sx) * 3 + c]);
                table[(py + 1) * (pw + 1) + px + 1] = table[py * (pw + 1) + px + 1] + row;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| table[yy * (pw + 1) + xx];
                let sum = at(y + k, x + k) + at(y, x) - at(y, x + k) - at(y + k, x);
                out[(y * w + x) * 3 + c] = ((2 * sum + area) / (2 * area)) as u8;
            }
        }
    }
    RgbImage::new(w, h, out)
}

/// Binary mask: 1 marks the region that is in focus in the "near" image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FocusMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl FocusMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height || data.is_empty() {
            return Err(Error::invalid(format!(
                "{} values for a {width}x{height} focus map",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("focus map value {v} is not 0 or 1")));
        }
        Ok(FocusMap { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// 0 → black, 1 → white.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::new(self.width, self.height, self.data.iter().map(|&v| v * 255).collect())
            .expect("validated dimensions")
    }
}

/// `label >= threshold` → 1, else 0.
pub fn binarize_label(label: &GrayImage, threshold: u8) -> FocusMap {
    FocusMap {
        width: label.width(),
        height: label.height(),
        data: label.data().iter().map(|&v| u8::from(v >= threshold)).collect(),
    }
}

/// Pixel selection between the sharp and blurred images:
/// near = sharp where focus = 1, far = sharp where focus = 0.
pub fn compose_pair(sharp: &RgbImage, blurred: &RgbImage, focus: &FocusMap) -> Result<(RgbImage, RgbImage)> {
    let dims = (sharp.width(), sharp.height());
    if (blurred.width(), blurred.height()) != dims || (focus.width, focus.height) != dims {
        return Err(Error::shape(format!(
            "compose: sharp {}x{}, blurred {}x{}, focus {}x{}",
            dims.0,
            dims.1,
            blurred.width(),
            blurred.height(),
            focus.width,
            focus.height
        )));
    }
    let mut near = Vec::with_capacity(sharp.data().len());
    let mut far = Vec::with_capacity(sharp.data().len());
    for ((s, b), &f) in sharp
        .data()
        .chunks_exact(3)
        .zip(blurred.data().chunks_exact(3))
        .zip(&focus.data)
    {
        let (n, r) = if f == 1 { (s, b) } else { (b, s) };
        near.extend_from_slice(n);
        far.extend_from_slice(r);
    }
    Ok((
        RgbImage::new(dims.0, dims.1, near)?,
        RgbImage::new(dims.0, dims.1, far)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageTriplet {
    pub near: RgbImage,
    pub far: RgbImage,
    /// The untouched source image.
    pub gt: RgbImage,
    pub focus_map: FocusMap,
    pub blurred: RgbImage,
    pub blur_group: usize,
    pub kernel_size: usize,
}

/// One triplet from a source image and its saliency label.
pub fn synthesize(source: &RgbImage, label: &GrayImage, group: usize, seed: u64, threshold: u8) -> Result<ImageTriplet> {
    if (label.width(), label.height()) != (source.width(), source.height()) {
        return Err(Error::shape(format!(
            "label {}x{} does not match source {}x{}",
            label.width(),
            label.height(),
            source.width(),
            source.height()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel_size = sample_kernel(group, &mut rng)?;
    let blurred = mean_blur(source, kernel_size)?;
    let focus_map = binarize_label(label, threshold);
    let (near, far) = compose_pair(source, &blurred, &focus_map)?;
    Ok(ImageTriplet {
        near,
        far,
        gt: source.clone(),
        focus_map,
        blurred,
        blur_group: group,
        kernel_size,
    })
}

/// SplitMix64 finalizer over `(seed, index)`: the per-image seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub near: PathBuf,
    pub far: PathBuf,
    pub gt: PathBuf,
    pub focus_map: PathBuf,
    pub blur_group: usize,
    pub kernel_size: usize,
    pub seed: u64,
}

/// Tab-separated index of generated triplets, one line per entry:
/// `near far gt map group k seed`. Paths are relative to the manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_tsv(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            let mut fields = Vec::with_capacity(7);
            for p in [&e.near, &e.far, &e.gt, &e.focus_map] {
                let s = p
                    .to_str()
                    .ok_or_else(|| Error::invalid(format!("non-UTF-8 path {}", p.display())))?;
                if s.contains(['\t', '\n', '\r']) {
                    return Err(Error::invalid(format!("path {s:?} contains a tab or newline")));
                }
                fields.push(s.replace('\\', "/"));
            }
            fields.push(e.blur_group.to_string());
            fields.push(e.kernel_size.to_string());
            fields.push(e.seed.to_string());
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Data(format!("{source}:{}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(bad(&format!("expected 7 tab-separated fields, found {}", fields.len())));
            }
            let num = |i: usize, what: &str| -> Result<u64> {
                fields[i].parse().map_err(|_| bad(&format!("invalid {what} {:?}", fields[i])))
            };
            entries.push(ManifestEntry {
                near: fields[0].into(),
                far: fields[1].into(),
                gt: fields[2].into(),
                focus_map: fields[3].into(),
                blur_group: num(4, "blur group")? as usize,
                kernel_size: num(5, "kernel size")? as usize,
                seed: num(6, "seed")?,
            });
        }
        Ok(Manifest { entries })
    }

    /// Reads a manifest and resolves its paths against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut manifest.entries {
            for p in [&mut e.near, &mut e.far, &mut e.gt, &mut e.focus_map] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(manifest)
    }

    /// Writes atomically (temp file + rename).
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tsv.partial");
        fs::write(&tmp, self.to_tsv()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub corpus_dir: PathBuf,
    pub labels_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Blur groups used round-robin.
    pub groups: Vec<usize>,
    pub seed: u64,
    /// Triplets to produce, cycling over the sources; defaults to one per source.
    pub count: Option<usize>,
    pub threshold: u8,
}

impl GenerateOptions {
    pub fn new(corpus_dir: impl Into<PathBuf>, labels_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        GenerateOptions {
            corpus_dir: corpus_dir.into(),
            labels_dir: labels_dir.into(),
            out_dir: out_dir.into(),
            groups: vec![0, 1, 2, 3],
            seed: 0,
            count: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Image files in `dir` keyed by file stem, sorted.
fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = BTreeMap::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !imageio::is_image_path(&path) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            found.entry(stem.to_string()).or_insert(path);
        }
    }
    Ok(found)
}

/// Synthesizes triplets for a corpus, writes them under `out_dir` and
/// returns the manifest (also written to `out_dir/manifest.tsv`).
pub fn generate(opts: &GenerateOptions) -> Result<Manifest> {
    if opts.groups.is_empty() {
        return Err(Error::invalid("no blur groups selected"));
    }
    if let Some(g) = opts.groups.iter().find(|&&g| g >= BLUR_GROUPS.len()) {
        return Err(Error::invalid(format!("blur group {g} (expected 0..=3)")));
    }
    for dir in [&opts.corpus_dir, &opts.labels_dir] {
        if !dir.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", dir.display())));
        }
    }
    let sources = images_by_stem(&opts.corpus_dir)?;
    let labels = images_by_stem(&opts.labels_dir)?;
    let paired: Vec<(String, PathBuf, PathBuf)> = sources
        .into_iter()
        .filter_map(|(stem, src)| match labels.get(&stem) {
            Some(label) => Some((stem, src, label.clone())),
            None => {
                log::warn!("no label for {}, skipping", src.display());
                None
            }
        })
        .collect();
    if paired.is_empty() {
        return Err(Error::Data(format!(
            "no source image in {} has a matching label in {}",
            opts.corpus_dir.display(),
            opts.labels_dir.display()
        )));
    }
    let count = opts.count.unwrap_or(paired.len());
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    for sub in ["near", "far", "gt", "map"] {
        let dir = opts.out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let results: Vec<Option<ManifestEntry>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let (stem, src_path, label_path) = &paired[i % paired.len()];
            let group = opts.groups[i % opts.groups.len()];
            let seed = derive_seed(opts.seed, i as u64);
            match generate_one(opts, i, stem, src_path, label_path, group, seed) {
                Ok(entry) => Some(entry),
                Err(e) => {
                    log::warn!("skipping {}: {e}", src_path.display());
                    None
                }
            }
        })
        .collect();
    let manifest = Manifest {
        entries: results.into_iter().flatten().collect(),
    };
    if manifest.entries.is_empty() {
        return Err(Error::Data("every source image failed; nothing generated".into()));
    }
    manifest.write(&opts.out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

fn generate_one(
    opts: &GenerateOptions,
    index: usize,
    stem: &str,
    src_path: &Path,
    label_path: &Path,
    group: usize,
    seed: u64,
) -> Result<ManifestEntry> {
    let source = imageio::read_rgb(src_path)?;
    let label = imageio::read_gray(label_path)?;
    let triplet = synthesize(&source, &label, group, seed, opts.threshold)?;
    let name = format!("{index:06}_{stem}");
    let rel = |sub: &str, ext: &str| PathBuf::from(sub).join(format!("{name}.{ext}"));
    let entry = ManifestEntry {
        near: rel("near", "ppm"),
        far: rel("far", "ppm"),
        gt: rel("gt", "ppm"),
        focus_map: rel("map", "pgm"),
        blur_group: group,
        kernel_size: triplet.kernel_size,
        seed,
    };
    let out = |p: &Path| opts.out_dir.join(p);
    imageio::write_rgb(&out(&entry.near), &triplet.near)?;
    imageio::write_rgb(&out(&entry.far), &triplet.far)?;
    imageio::write_rgb(&out(&entry.gt), &triplet.gt)?;
    imageio::write_gray(&out(&entry.focus_map), &triplet.focus_map.to_gray())?;
    Ok(entry)
}

/// Reads the images a manifest entry points to.
pub fn load_entry(entry: &ManifestEntry) -> Result<(RgbImage, RgbImage, RgbImage)> {
    let near = imageio::read_rgb(&entry.near)?;
    let far = imageio::read_rgb(&entry.far)?;
    let gt = imageio::read_rgb(&entry.gt)?;
    let dims = (gt.width(), gt.height());
    if (near.width(), near.height()) != dims || (far.width(), far.height()) != dims {
        return Err(Error::Data(format!(
            "triplet {} has mismatched image sizes",
            entry.gt.display()
        )));
    }
    Ok((near, far, gt))
}
