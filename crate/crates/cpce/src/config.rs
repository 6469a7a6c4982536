//! Run configuration: a strict JSON document covering data synthesis,
//! model shape, training, losses, evaluation, and output paths. Unknown
//! keys are rejected with the offending path named, and the resolved
//! config hashes to a stable run-directory name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CpceError, Result};
use crate::io_data::{NoiseParams, PhantomParams};
use crate::losses::Reduction;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_volumes: usize,
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    pub phantom: PhantomParams,
    pub noise: NoiseParams,
    pub patch_size: usize,
    pub patches_per_volume: usize,
    /// Fraction of volumes held out for validation/testing.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_volumes: 4,
            n_slices: 16,
            height: 64,
            width: 64,
            phantom: PhantomParams::default(),
            noise: NoiseParams::default(),
            patch_size: 64,
            patches_per_volume: 256,
            val_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input slab depth; odd. 1 selects the planar model.
    pub d: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Fixed random convnet; self-contained, no weight file needed.
    #[default]
    Random,
    /// VGG-19 conv layers loaded from a weight container at `path`.
    Vgg19,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_p: f32,
    pub reduction: Reduction,
    pub extractor: ExtractorKind,
    /// Weight container for `vgg19`; ignored for `random`.
    pub extractor_path: Option<PathBuf>,
    pub extractor_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_p: crate::losses::LAMBDA_P as f32,
            reduction: Reduction::Mean,
            extractor: ExtractorKind::Random,
            extractor_path: None,
            extractor_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub data_range: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { data_range: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Data root; falls back to the CPCE_DATA_DIR environment variable,
    /// then to `./data`.
    pub data_dir: Option<PathBuf>,
    /// Parent of run directories; defaults to `./runs`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            CpceError::config(format!("config error at `{}`: {}", e.path(), e.inner()))
        })
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CpceError::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hex digest of the resolved config; run directories are named
    /// by this rather than by timestamp.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths
            .data_dir
            .clone()
            .or_else(|| std::env::var_os("CPCE_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(self.hash())
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.d % 2 == 0 || self.model.d > 9 {
            return Err(CpceError::config(format!(
                "model.d must be odd and at most 9, got {}",
                self.model.d
            )));
        }
        if self.data.patch_size < 17 {
            return Err(CpceError::config(format!(
                "data.patch_size must be at least 17, got {}",
                self.data.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(CpceError::config(format!(
                "data.val_fraction must be in [0,1), got {}",
                self.data.val_fraction
            )));
        }
        if self.loss.extractor == ExtractorKind::Vgg19 && self.loss.extractor_path.is_none() {
            return Err(CpceError::config(
                "loss.extractor_path is required when loss.extractor is \"vgg19\"",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_key_names_the_path() {
        let err = RunConfig::from_json(r#"{"train": {"batch_size": 4, "learning_rate": 0.1}}"#)
            .err()
            .unwrap();
        let msg = err.to_string();
        assert!(msg.contains("train.learning_rate"), "{msg}");
        assert!(matches!(err, CpceError::Config(_)));

        let err = RunConfig::from_json(r#"{"bogus": 1}"#).err().unwrap();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_key_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.model.d = 4;
        assert!(cfg.validate().is_err());
        cfg.model.d = 3;
        cfg.data.patch_size = 8;
        assert!(cfg.validate().is_err());
        cfg.data.patch_size = 32;
        cfg.loss.extractor = ExtractorKind::Vgg19;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn data_dir_resolution_order() {
        let mut cfg = RunConfig::default();
        cfg.paths.data_dir = Some(PathBuf::from("/tmp/explicit"));
        assert_eq!(cfg.data_dir(), PathBuf::from("/tmp/explicit"));
        cfg.paths.data_dir = None;
        std::env::set_var("CPCE_DATA_DIR", "/tmp/from_env");
        assert_eq!(cfg.data_dir(), PathBuf::from("/tmp/from_env"));
        std::env::remove_var("CPCE_DATA_DIR");
        assert_eq!(cfg.data_dir(), PathBuf::from("data"));
    }
}
