//! Minimal binary PGM (P5) writer for grayscale heatmap exports.
//!
//! Values map linearly onto [0, 255]: zero stays black and the array
//! maximum becomes full white, so an all-zero map renders solid black and
//! the brightest pixel always marks the true maximum. No external image
//! dependency; the files diff cleanly in tests.

use crate::error::{Error, Result};
use std::path::Path;

/// Render row-major non-negative values into a P5 byte stream.
pub fn pgm_bytes(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Shape(format!(
            "{} values cannot fill a {}x{} image",
            values.len(),
            width,
            height
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Config("image extents must be positive".into()));
    }
    let mut max = 0.0f64;
    for &v in values {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Numeric(format!(
                "pgm values must be finite and non-negative, got {}",
                v
            )));
        }
        max = max.max(v);
    }
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    let bytes = pgm_bytes(values, width, height)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
