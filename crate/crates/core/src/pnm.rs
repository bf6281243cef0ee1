//! Binary PPM (P6) and PGM (P5) codec, 8 bits per sample.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PnmImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl PnmImage {
    pub fn into_rgb(self) -> RgbImage {
        match self {
            PnmImage::Gray(g) => g.to_rgb(),
            PnmImage::Rgb(c) => c,
        }
    }

    pub fn into_gray(self) -> GrayImage {
        match self {
            PnmImage::Gray(g) => g,
            PnmImage::Rgb(c) => c.to_gray(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.to_string(),
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Skips whitespace and `#` comments running to end of line.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add(usize::from(b - b'0')))
                .ok_or_else(|| self.fail(format!("{what} is too large")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(match self.bytes.get(self.pos) {
                None => self.fail(format!("truncated header: missing {what}")),
                Some(b) => self.fail(format!("expected {what}, found byte 0x{b:02x}")),
            });
        }
        Ok(value)
    }
}

/// Decodes a P5 or P6 image. `source` names the data in error messages.
pub fn decode(bytes: &[u8], source: &str) -> Result<PnmImage> {
    let mut cur = Cursor { bytes, pos: 0, source };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(_) => return Err(cur.fail("not a binary PGM/PPM (expected P5 or P6 magic)")),
        None => return Err(cur.fail("truncated header: missing magic")),
    };
    cur.pos = 2;
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() || *b == b'#' => {}
        Some(_) => return Err(cur.fail("magic must be followed by whitespace")),
        None => return Err(cur.fail("truncated header after magic")),
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_separators();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.fail(format!("zero image dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Parse {
            path: source.to_string(),
            offset: maxval_at,
            message: format!("unsupported maxval {maxval} (only 255 is supported)"),
        });
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => return Err(cur.fail("maxval must be followed by a single whitespace byte")),
        None => return Err(cur.fail("truncated file: no raster data")),
    }
    let raster_len = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| cur.fail("image dimensions overflow"))?;
    let available = bytes.len() - cur.pos;
    if available < raster_len {
        cur.pos = bytes.len();
        return Err(cur.fail(format!(
            "truncated raster: expected {raster_len} bytes, found {available}"
        )));
    }
    let raster = bytes[cur.pos..cur.pos + raster_len].to_vec();
    Ok(if channels == 1 {
        PnmImage::Gray(GrayImage::new(width, height, raster)?)
    } else {
        PnmImage::Rgb(RgbImage::new(width, height, raster)?)
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn read(path: &Path) -> Result<PnmImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}
