//! Minimal binary PGM (P5) reader/writer for 8-bit grayscale images.
//!
//! This is the only image format the pipeline requires: training corpora,
//! reconstruction outputs, and k-space sampling masks all travel as P5
//! files. Values are exposed as `f64` in `[0, 255]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads an 8-bit binary PGM (`P5`) file into an `[H, W]` tensor of raw
/// luminance values in `[0, 255]`. Comments (`#` to end of line) are allowed
/// anywhere in the header, per the PNM convention.
pub fn read_pgm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0;

    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(format!(
                "{}: truncated PGM header",
                path.display()
            )));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(&bytes)?;
    if magic != "P5" {
        return Err(Error::data(format!(
            "{}: not a binary PGM (magic '{}', expected 'P5')",
            path.display(),
            magic
        )));
    }
    let parse = |tok: String, what: &str| -> Result<usize> {
        tok.parse::<usize>().map_err(|_| {
            Error::data(format!(
                "{}: invalid PGM {}: '{}'",
                path.display(),
                what,
                tok
            ))
        })
    };
    let width = parse(next_token(&bytes)?, "width")?;
    let height = parse(next_token(&bytes)?, "height")?;
    let maxval = parse(next_token(&bytes)?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::data(format!(
            "{}: degenerate PGM size {}x{}",
            path.display(),
            width,
            height
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::data(format!(
            "{}: PGM maxval {} unsupported (need 1..=255, 8-bit)",
            path.display(),
            maxval
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::data(format!(
            "{}: missing raster separator",
            path.display()
        )));
    }
    pos += 1;
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::data(format!(
            "{}: truncated PGM raster ({} bytes, need {})",
            path.display(),
            raster.len(),
            need
        )));
    }
    let data = raster[..need].iter().map(|&b| b as f64).collect();
    Tensor::new(&[height, width], data)
}

/// Writes an `[H, W]` tensor as an 8-bit binary PGM. Values are rounded to
/// nearest and clamped to `[0, 255]`.
pub fn write_pgm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    if image.ndim() != 2 {
        return Err(Error::shape(
            "write_pgm",
            "[H,W]",
            format!("{:?}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
