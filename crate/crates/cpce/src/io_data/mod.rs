//! Data plumbing: phantom synthesis, low-dose simulation, patch
//! extraction, the named-array container format, and PNG export.

pub mod container;
pub mod patches;
pub mod phantom;
pub mod png;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub use container::{from_bytes, get_array, load_container, save_container, to_bytes};
pub use patches::{extract_patches, PatchCoords, PatchPair};
pub use phantom::{generate_phantom_volume, simulate_low_dose, NoiseParams, PhantomParams};
pub use png::export_slice_png;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Phantom { seed: u64, params: PhantomParams },
    Imported { path: String },
}

/// A slice volume in [0,1] with spacing metadata and provenance.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    /// (z, y, x) spacing in millimeters.
    pub spacing_mm: [f32; 3],
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub shape: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub provenance: Provenance,
}

impl Volume {
    pub fn meta(&self) -> VolumeMeta {
        let s = self.data.shape();
        VolumeMeta {
            shape: [s[0], s[1], s[2]],
            spacing_mm: self.spacing_mm,
            provenance: self.provenance.clone(),
        }
    }

    /// Saves `<path>` as a single-array container plus `<path>.json`
    /// metadata sidecar.
    pub fn save(&self, path: &std::path::Path) -> crate::Result<()> {
        save_container(
            path,
            &[("volume".to_string(), self.data.clone().into_dyn())],
        )?;
        let meta = serde_json::to_string_pretty(&self.meta())
            .map_err(|e| crate::CpceError::config(e.to_string()))?;
        let side = path.with_extension("json");
        std::fs::write(&side, meta).map_err(|e| crate::CpceError::io(side.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> crate::Result<Self> {
        let arrays = load_container(path)?;
        let data = get_array(&arrays, "volume")?
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| crate::CpceError::shape(e.to_string()))?;
        let side = path.with_extension("json");
        let (spacing_mm, provenance) = match std::fs::read_to_string(&side) {
            Ok(txt) => {
                let meta: VolumeMeta = serde_json::from_str(&txt)
                    .map_err(|e| crate::CpceError::config(format!("{}: {e}", side.display())))?;
                (meta.spacing_mm, meta.provenance)
            }
            Err(_) => (
                [1.0; 3],
                Provenance::Imported {
                    path: path.display().to_string(),
                },
            ),
        };
        Ok(Volume {
            data,
            spacing_mm,
            provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_save_load_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.cpce");
        let vol = generate_phantom_volume(11, 4, 64, 64, &PhantomParams::default()).unwrap();
        vol.save(&path).unwrap();
        let back = Volume::load(&path).unwrap();
        assert_eq!(back.data, vol.data);
        assert_eq!(back.provenance, vol.provenance);
        assert!(path.with_extension("json").exists());
    }
}
