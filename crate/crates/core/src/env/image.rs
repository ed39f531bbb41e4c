use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image, row-major, row 0 at the top, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::shape("image", &[height, width], &[pixels.len()]));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("image pixel outside [0, 1]".into()));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn black(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Number of pixels with nonzero intensity.
    pub fn lit_count(&self) -> usize {
        self.pixels.iter().filter(|p| **p > 0.0).count()
    }

    /// Intensity-weighted centroid `(col, row)` in pixel units, or `None` for
    /// an all-black image.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut total = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for r in 0..self.height {
            for c in 0..self.width {
                let v = self.get(r, c);
                total += v;
                cx += v * (c as f64 + 0.5);
                cy += v * (r as f64 + 0.5);
            }
        }
        (total > 0.0).then(|| (cx / total, cy / total))
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|p| (p * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    /// Parses a P5 file with maxval 255, as written by [`Image::to_pgm`].
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(Error::format("PGM", "truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::format("PGM", "header"))?);
        }
        i += 1;
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(Error::format("PGM", "only P5 with maxval 255 is supported"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format("PGM", "bad dimension"));
        let (w, h) = (parse(fields[1])?, parse(fields[2])?);
        let body = bytes.get(i..i + w * h).ok_or_else(|| Error::format("PGM", "truncated pixels"))?;
        Image::new(w, h, body.iter().map(|b| *b as f64 / 255.0).collect())
    }
}
