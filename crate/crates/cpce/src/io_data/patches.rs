//! Registered low-dose / normal-dose patch extraction with adjacent-slice
//! stacking and edge replication.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CpceError, Result};
use crate::model::SliceStack;

use super::Volume;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct PatchCoords {
    pub volume_id: u32,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone)]
pub struct PatchPair {
    /// `[d, patch, patch]` adjacent low-dose slices around the center.
    pub lowdose: SliceStack,
    /// The registered normal-dose center slice patch.
    pub normaldose: Array2<f32>,
    pub source: PatchCoords,
}

/// Gathers `count` random registered patch pairs. Slice `i` stacks the `d`
/// low-dose slices `i−(d−1)/2 ..= i+(d−1)/2`, clamped at volume ends.
pub fn extract_patches(
    lowdose: &Volume,
    normaldose: &Volume,
    volume_id: u32,
    d: usize,
    count: usize,
    patch: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    if lowdose.data.shape() != normaldose.data.shape() {
        return Err(CpceError::shape(format!(
            "volumes not registered: {:?} vs {:?}",
            lowdose.data.shape(),
            normaldose.data.shape()
        )));
    }
    if d % 2 == 0 || !(1..=9).contains(&d) {
        return Err(CpceError::config(format!(
            "slice count must be odd and in 1..=9, got {d}"
        )));
    }
    let s = lowdose.data.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    if patch > h || patch > w {
        return Err(CpceError::shape(format!(
            "patch {patch} larger than slice {h}x{w}"
        )));
    }
    let half = (d - 1) / 2;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let slice = rng.gen_range(0..n);
        let row = rng.gen_range(0..=h - patch);
        let col = rng.gen_range(0..=w - patch);
        let mut ld = Array3::<f32>::zeros((d, patch, patch));
        for (k, mut plane) in ld.outer_iter_mut().enumerate() {
            let z = (slice + k).saturating_sub(half).min(n - 1);
            plane.assign(&lowdose.data.slice(ndarray::s![
                z,
                row..row + patch,
                col..col + patch
            ]));
        }
        let nd = normaldose
            .data
            .slice(ndarray::s![slice, row..row + patch, col..col + patch])
            .to_owned();
        out.push(PatchPair {
            lowdose: SliceStack::new(ld)?,
            normaldose: nd,
            source: PatchCoords {
                volume_id,
                slice,
                row,
                col,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_data::{generate_phantom_volume, PhantomParams, Provenance};

    fn vol(seed: u64) -> Volume {
        generate_phantom_volume(seed, 8, 64, 64, &PhantomParams::default()).unwrap()
    }

    #[test]
    fn patches_registered_and_seeded() {
        let ld = vol(1);
        let nd = vol(1);
        let a = extract_patches(&ld, &nd, 0, 3, 20, 32, 9).unwrap();
        let b = extract_patches(&ld, &nd, 0, 3, 20, 32, 9).unwrap();
        assert_eq!(a.len(), 20);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.source, pb.source);
            assert_eq!(pa.lowdose.data, pb.lowdose.data);
            // registered: center low-dose slice equals normal-dose patch
            // (identical source volumes here)
            assert_eq!(
                pa.lowdose.data.index_axis(ndarray::Axis(0), 1),
                pa.normaldose
            );
        }
    }

    #[test]
    fn d1_shape_and_edge_replication() {
        let ld = vol(2);
        let nd = vol(2);
        let p = extract_patches(&ld, &nd, 0, 1, 5, 64, 3).unwrap();
        assert_eq!(p[0].lowdose.data.shape(), &[1, 64, 64]);

        // force slice 0 by construction: single-slice volume
        let one = Volume {
            data: ld.data.slice(ndarray::s![0..1, .., ..]).to_owned(),
            spacing_mm: [1.0; 3],
            provenance: Provenance::Imported { path: "t".into() },
        };
        let p = extract_patches(&one, &one, 0, 3, 3, 32, 4).unwrap();
        for pp in &p {
            assert_eq!(pp.source.slice, 0);
            // all three stacked slices replicate slice 0
            let s0 = pp.lowdose.data.index_axis(ndarray::Axis(0), 0).to_owned();
            for k in 1..3 {
                assert_eq!(pp.lowdose.data.index_axis(ndarray::Axis(0), k), s0);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let ld = vol(3);
        let nd = vol(3);
        assert!(extract_patches(&ld, &nd, 0, 2, 1, 32, 0).is_err());
        assert!(extract_patches(&ld, &nd, 0, 1, 1, 100, 0).is_err());
        let other = generate_phantom_volume(4, 7, 64, 64, &PhantomParams::default()).unwrap();
        assert!(extract_patches(&ld, &other, 0, 1, 1, 32, 0).is_err());
    }
}
