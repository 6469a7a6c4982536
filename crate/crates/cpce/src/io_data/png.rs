//! 8-bit PNG export of slices with a display window in normalized units.

use std::path::Path;

use ndarray::Array2;

use crate::error::{CpceError, Result};

/// Writes `slice` as an 8-bit grayscale PNG, mapping the window
/// `[lo, hi]` (normalized units) onto 0..=255 with clipping.
pub fn export_slice_png(path: &Path, slice: &Array2<f32>, window: (f32, f32)) -> Result<()> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(CpceError::config(format!(
            "display window must have hi > lo, got [{lo}, {hi}]"
        )));
    }
    let (h, w) = (slice.shape()[0], slice.shape()[1]);
    let mut buf = Vec::with_capacity(h * w);
    for v in slice.iter() {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        buf.push((t * 255.0).round() as u8);
    }
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| CpceError::shape("image buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| CpceError::io(path.display().to_string(), std::io::Error::new(std::io::ErrorKind::Other, e)))
}
