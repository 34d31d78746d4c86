//! Binary portable pixmap / graymap writers.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Encodes a `[3, H, W]` image in `[0, 1]` as binary PPM (P6).
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("expected 3 channels, got {c}")));
    }
    let hw = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..hw {
        for ch in 0..3 {
            out.push((d[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Encodes an `H`×`W` byte map as binary PGM (P5) with the given maximum value.
pub fn encode_pgm(values: &[u8], h: usize, w: usize, maxval: u8) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(Error::shape("encode_pgm", format!("{} values for {h}x{w}", values.len())));
    }
    let mut out = format!("P5\n{w} {h}\n{}\n", maxval.max(1)).into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, values: &[u8], h: usize, w: usize, maxval: u8) -> Result<()> {
    fs::write(path, encode_pgm(values, h, w, maxval)?).map_err(|e| Error::io(path, e))
}
