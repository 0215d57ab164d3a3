//! Square raster types shared across the pipeline, plus binary PGM (P5) I/O.
//!
//! Pixel `m` sits at row `m / side`, column `m % side`.

use std::path::Path;

use crate::error::{Error, Result};

/// Binary image over the reconstruction grid. Every pixel is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetMask {
    side: usize,
    pixels: Vec<u8>,
}

impl TargetMask {
    pub fn empty(side: usize) -> Self {
        Self {
            side,
            pixels: vec![0; side * side],
        }
    }

    pub fn from_pixels(side: usize, pixels: Vec<u8>) -> Result<Self> {
        Error::check_dim("mask pixels", side * side, pixels.len())?;
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::InvalidArgument("mask pixels must be 0 or 1".into()));
        }
        Ok(Self { side, pixels })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                pixels.push(u8::from(f(row, col)));
            }
        }
        Self { side, pixels }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.side + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.pixels[row * self.side + col] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Real-valued image `attenuation * mask`, i.e. the target vector r.
    pub fn scaled(&self, attenuation: f64) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 * attenuation).collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.pixels.iter().map(|&p| if p == 1 { 255 } else { 0 }).collect();
        write_pgm(path, self.side, self.side, &bytes)
    }

    /// Reads a mask written by [`TargetMask::write_pgm`]. Any gray level other
    /// than 0 or 255 is rejected.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (width, height, bytes) = read_pgm(path)?;
        if width != height {
            return Err(Error::parse(path, 2, format!("mask must be square, got {width}x{height}")));
        }
        let mut pixels = Vec::with_capacity(bytes.len());
        for (i, b) in bytes.into_iter().enumerate() {
            match b {
                0 => pixels.push(0),
                255 => pixels.push(1),
                other => {
                    return Err(Error::parse(
                        path,
                        4,
                        format!("gray value {other} at pixel {i}; masks must be 0/255"),
                    ))
                }
            }
        }
        Ok(Self { side: width, pixels })
    }
}

/// Real-valued reconstruction over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconImage {
    side: usize,
    values: Vec<f64>,
}

impl ReconImage {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        Error::check_dim("image values", side * side, values.len())?;
        Ok(Self { side, values })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                values.push(f(row, col));
            }
        }
        Self { side, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    /// Pixel-wise mean of several images of the same size.
    pub fn mean(images: &[ReconImage]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("mean of zero images".into()))?;
        let mut acc = vec![0.0; first.values.len()];
        for img in images {
            Error::check_dim("image side", first.side, img.side)?;
            for (a, v) in acc.iter_mut().zip(&img.values) {
                *a += v;
            }
        }
        let n = images.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(Self {
            side: first.side,
            values: acc,
        })
    }

    /// 8-bit rendering with min-max scaling; a constant image maps to 0.
    pub fn to_gray(&self) -> Vec<u8> {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.values
            .iter()
            .map(|&v| {
                if span > 0.0 && span.is_finite() {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.side, self.side, &self.to_gray())
    }
}

pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    Error::check_dim("pgm bytes", width * height, bytes.len())?;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Minimal P5 reader: magic, width, height and maxval separated by single
/// whitespace runs, `#` comments allowed in the header, maxval 255 only.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, 1, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&data[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::parse(path, 1, format!("expected P5 magic, got `{}`", fields[0])));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| Error::parse(path, 2, format!("bad header field `{}`", fields[i])))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::parse(path, 3, format!("unsupported maxval {maxval}")));
    }
    let raster = data.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(Error::parse(
            path,
            4,
            format!("expected {} raster bytes, found {}", width * height, raster.len()),
        ));
    }
    Ok((width, height, raster.to_vec()))
}
