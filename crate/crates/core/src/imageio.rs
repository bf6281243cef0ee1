//! Image files by extension: `.ppm`/`.pgm`/`.pnm` always, `.png` with the
//! `png` feature.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::pnm::{self, PnmImage};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Format {
    Pnm,
    Png,
}

fn format_of(path: &Path) -> Result<Format> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" | "pgm" | "pnm" => Ok(Format::Pnm),
        "png" => Ok(Format::Png),
        _ => Err(Error::Unsupported(format!(
            "{}: unknown image extension (use .ppm, .pgm or .png)",
            path.display()
        ))),
    }
}

pub fn is_image_path(path: &Path) -> bool {
    match format_of(path) {
        Ok(Format::Pnm) => true,
        Ok(Format::Png) => cfg!(feature = "png"),
        Err(_) => false,
    }
}

fn read_any(path: &Path) -> Result<PnmImage> {
    match format_of(path)? {
        Format::Pnm => pnm::read(path),
        Format::Png => png_io::read(path),
    }
}

/// Reads an image as RGB; grayscale files are replicated across channels.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    read_any(path).map(PnmImage::into_rgb)
}

/// Reads an image as 8-bit gray; color files are luma-converted.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    read_any(path).map(PnmImage::into_gray)
}

/// Writes RGB data; a `.pgm` path stores the rounded luma.
pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    match format_of(path)? {
        Format::Pnm if has_ext(path, "pgm") => pnm::write_pgm(path, &img.to_gray()),
        Format::Pnm => pnm::write_ppm(path, img),
        Format::Png => png_io::write(path, &PnmImage::Rgb(img.clone())),
    }
}

/// Writes gray data; a `.ppm` path replicates it across channels.
pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    match format_of(path)? {
        Format::Pnm if has_ext(path, "ppm") => pnm::write_ppm(path, &img.to_rgb()),
        Format::Pnm => pnm::write_pgm(path, img),
        Format::Png => png_io::write(path, &PnmImage::Gray(img.clone())),
    }
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

#[cfg(feature = "png")]
mod png_io {
    use std::fs::File;
    use std::io::BufWriter;
    use std::path::Path;

    use crate::error::{Error, Result};
    use crate::image::{GrayImage, RgbImage};
    use crate::pnm::PnmImage;

    fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
        Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            message: e.to_string(),
        }
    }

    pub(super) fn read(path: &Path) -> Result<PnmImage> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(file);
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let img = match info.color_type {
            png::ColorType::Grayscale => PnmImage::Gray(GrayImage::new(w, h, bytes.to_vec())?),
            png::ColorType::GrayscaleAlpha => {
                PnmImage::Gray(GrayImage::new(w, h, bytes.iter().step_by(2).copied().collect())?)
            }
            png::ColorType::Rgb => PnmImage::Rgb(RgbImage::new(w, h, bytes.to_vec())?),
            png::ColorType::Rgba => PnmImage::Rgb(RgbImage::new(
                w,
                h,
                bytes.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            )?),
            other => return Err(Error::Unsupported(format!("{}: PNG color type {other:?}", path.display()))),
        };
        Ok(img)
    }

    pub(super) fn write(path: &Path, img: &PnmImage) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let (w, h, color, data) = match img {
            PnmImage::Gray(g) => (g.width(), g.height(), png::ColorType::Grayscale, g.data()),
            PnmImage::Rgb(c) => (c.width(), c.height(), png::ColorType::Rgb, c.data()),
        };
        let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| decode_err(path, e))?;
        writer.write_image_data(data).map_err(|e| decode_err(path, e))
    }
}

#[cfg(not(feature = "png"))]
mod png_io {
    use std::path::Path;

    use crate::error::{Error, Result};
    use crate::pnm::PnmImage;

    fn disabled(path: &Path) -> Error {
        Error::Unsupported(format!(
            "{}: PNG support is not compiled in (enable the `png` feature)",
            path.display()
        ))
    }

    pub(super) fn read(path: &Path) -> Result<PnmImage> {
        Err(disabled(path))
    }

    pub(super) fn write(path: &Path, _img: &PnmImage) -> Result<()> {
        Err(disabled(path))
    }
}
