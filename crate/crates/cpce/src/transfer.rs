//! 2D-to-3D model inflation: embeds each trained 2D filter as the center
//! depth plane of a 3x3x3 filter whose side planes are zero, so the
//! inflated network initially computes exactly what the 2D network
//! computes on the center slice.

use ndarray::Array2;

use crate::error::{CpceError, Result};
use crate::model::{
    generator_forward_batch, DepthMode, GeneratorParams, SliceStack,
};
use crate::ops::Tensor;
use crate::scalar::Scalar;

/// Which encoder layers become volumetric when moving to `target_d` slices.
#[derive(Debug, Clone)]
pub struct InflationPlan {
    pub target_d: usize,
    pub layers_to_inflate: Vec<usize>,
    /// Source checkpoint metadata (epoch or step label), if known.
    pub source_epoch: Option<String>,
}

impl InflationPlan {
    pub fn new(target_d: usize) -> Result<Self> {
        if target_d % 2 == 0 || !(1..=9).contains(&target_d) {
            return Err(CpceError::config(format!(
                "target slice count must be odd and in 1..=9, got {target_d}"
            )));
        }
        Ok(InflationPlan {
            target_d,
            layers_to_inflate: (0..(target_d - 1) / 2).collect(),
            source_epoch: None,
        })
    }
}

/// Embeds a 2D filter `[c_in, c_out, 1, 3, 3]` as the center depth plane
/// of a `[c_in, c_out, 3, 3, 3]` filter; the two side planes are zero.
pub fn inflate_filter<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let s = h.shape();
    if s[2] != 1 {
        return Err(CpceError::shape(format!(
            "expected a planar filter with depth 1, got depth {}",
            s[2]
        )));
    }
    let mut b = Tensor::<T>::zeros((s[0], s[1], 3, s[3], s[4]));
    b.slice_mut(ndarray::s![.., .., 1..2, .., ..]).assign(h);
    Ok(b)
}

/// Inverse of [`inflate_filter`]: the center depth plane.
pub fn extract_center_plane<T: Scalar>(b: &Tensor<T>) -> Tensor<T> {
    let d = b.shape()[2];
    b.slice(ndarray::s![.., .., d / 2..d / 2 + 1, .., ..])
        .as_standard_layout()
        .to_owned()
}

/// Inflates a trained 2D generator to accept `target_d` slices. The first
/// `(target_d - 1) / 2` encoder convolutions become volumetric with the 2D
/// kernel at the center depth plane; everything else is copied verbatim.
/// `target_d = 1` returns an unchanged clone.
pub fn inflate_generator<T: Scalar>(
    params2d: &GeneratorParams<T>,
    target_d: usize,
) -> Result<GeneratorParams<T>> {
    if params2d
        .depth_schedule
        .iter()
        .any(|m| *m != DepthMode::Planar)
    {
        return Err(CpceError::config(
            "inflation source must be a pure 2D generator",
        ));
    }
    let plan = InflationPlan::new(target_d)?;
    if target_d == 1 {
        log::warn!("inflation to 1 slice is a no-op");
        return Ok(params2d.clone());
    }
    let mut out = params2d.clone();
    for &i in &plan.layers_to_inflate {
        out.conv[i].weight = inflate_filter(&params2d.conv[i].weight)?;
        out.depth_schedule[i] = DepthMode::Volumetric;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Runs the inflated 3D generator on `volume` and the 2D source on the
/// volume's center slice, and reports the maximum absolute output
/// difference against `tol`.
pub fn verify_equivalence(
    params2d: &GeneratorParams,
    params3d: &GeneratorParams,
    volume: &SliceStack,
    tol: f64,
) -> Result<EquivalenceReport> {
    let d = volume.d();
    if params3d.input_d() != d {
        return Err(CpceError::config(format!(
            "volume has {d} slices but the 3D generator expects {}",
            params3d.input_d()
        )));
    }
    let s = volume.data.shape();
    let (h, w) = (s[1], s[2]);
    let x3 = volume
        .data
        .clone()
        .into_shape_with_order((1, 1, d, h, w))
        .map_err(|e| CpceError::shape(e.to_string()))?;
    let y3 = generator_forward_batch(params3d, &x3)?;
    let center: Array2<f32> = volume.data.index_axis(ndarray::Axis(0), d / 2).to_owned();
    let x2 = center
        .into_shape_with_order((1, 1, 1, h, w))
        .map_err(|e| CpceError::shape(e.to_string()))?;
    let y2 = generator_forward_batch(params2d, &x2)?;
    let max_abs_diff = y3
        .iter()
        .zip(y2.iter())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        max_abs_diff,
        pass: max_abs_diff <= tol,
    })
}
