//! Run configuration: JSON schema shared by every CLI command, path
//! resolution with environment overrides, and config hashing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::attention::Variant;
use crate::coarse::CoarseConfig;
use crate::error::{Result, TextLocError};
use crate::eval::EvalParams;
use crate::fine::FineConfig;
use crate::scene::{PoseSamplingConfig, SceneSpec, Split};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Artifact locations. Each can be overridden by an environment variable
/// (paths only, per the config contract).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub coarse_checkpoint: PathBuf,
    pub fine_checkpoint: PathBuf,
    pub index_file: PathBuf,
    pub report_file: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset_dir: "artifacts/dataset".into(),
            coarse_checkpoint: "artifacts/coarse.ckpt".into(),
            fine_checkpoint: "artifacts/fine.ckpt".into(),
            index_file: "artifacts/cells.idx".into(),
            report_file: "artifacts/report.json".into(),
        }
    }
}

const PATH_ENV_VARS: [(&str, fn(&mut Paths) -> &mut PathBuf); 5] = [
    ("TEXTLOC_DATASET_DIR", |p| &mut p.dataset_dir),
    ("TEXTLOC_COARSE_CKPT", |p| &mut p.coarse_checkpoint),
    ("TEXTLOC_FINE_CKPT", |p| &mut p.fine_checkpoint),
    ("TEXTLOC_INDEX", |p| &mut p.index_file),
    ("TEXTLOC_REPORT", |p| &mut p.report_file),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub extent_m: [f64; 2],
    pub instance_count_range: (usize, usize),
    pub points_per_instance_range: (usize, usize),
    pub cell_size_m: f64,
    pub stride_m: f64,
    pub rng_seed: u64,
    pub sampling: PoseSamplingConfig,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            extent_m: [100.0, 100.0],
            instance_count_range: (120, 160),
            points_per_instance_range: (40, 80),
            cell_size_m: crate::scene::DEFAULT_CELL_SIZE_M,
            stride_m: crate::scene::DEFAULT_STRIDE_M,
            rng_seed: 0,
            sampling: PoseSamplingConfig::default(),
        }
    }
}

impl SceneParams {
    pub fn to_scene_spec(&self) -> SceneSpec {
        let mut spec = SceneSpec::default_palettes(self.extent_m, self.rng_seed);
        spec.instance_count_range = self.instance_count_range;
        spec.points_per_instance_range = self.points_per_instance_range;
        spec
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationParams {
    pub variants: Vec<Variant>,
    pub query_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub split: Split,
}

impl Default for AblationParams {
    fn default() -> Self {
        AblationParams {
            variants: vec![Variant::Naive, Variant::Value, Variant::Row, Variant::RowCol],
            query_counts: vec![16, 24, 32],
            seeds: vec![0, 1, 2],
            split: Split::Val,
        }
    }
}

/// Top-level configuration consumed by every CLI command.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub scene: SceneParams,
    pub coarse: CoarseConfig,
    pub fine: FineConfig,
    pub eval: EvalParams,
    pub ablation: AblationParams,
}

impl RunConfig {
    /// Parse strictly: unknown keys anywhere are rejected.
    pub fn from_json(raw: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(raw)
            .map_err(|e| TextLocError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            TextLocError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let mut cfg = Self::from_json(&raw)?;
        cfg.apply_env_overrides();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.coarse.validate()?;
        self.fine.validate()?;
        if self.scene.cell_size_m <= 0.0 || self.scene.stride_m <= 0.0 {
            return Err(TextLocError::Config(
                "cell_size_m and stride_m must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Environment variables override paths only.
    pub fn apply_env_overrides(&mut self) {
        for (var, field) in PATH_ENV_VARS {
            if let Ok(v) = std::env::var(var) {
                if !v.is_empty() {
                    *field(&mut self.paths) = PathBuf::from(v);
                }
            }
        }
    }

    /// Force one seed through every stochastic stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.scene.rng_seed = seed;
        self.scene.sampling.rng_seed = seed;
        self.coarse.rng_seed = seed;
        self.fine.rng_seed = seed;
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        hex::encode(h.finalize())
    }
}

/// Provenance block embedded alongside every output artifact.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub config_hash: String,
    pub version: String,
    pub command: String,
}

impl Provenance {
    pub fn new(config: &RunConfig, command: &str) -> Self {
        Provenance {
            config_hash: config.hash(),
            version: VERSION.to_string(),
            command: command.to_string(),
        }
    }
}

/// Atomic JSON write (temp + rename).
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrip_and_hash_stability() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"unknown_key": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"coarse": {"bogus": true}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"coarse": {"attention": {"nope": 3}}}"#).is_err());
        // Partial configs with known keys are fine.
        let cfg = RunConfig::from_json(r#"{"coarse": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.coarse.epochs, 3);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"coarse": {"epochs": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"scene": {"cell_size_m": -1.0}}"#).is_err());
    }

    #[test]
    fn seed_override_reaches_all_stages() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(99);
        assert_eq!(cfg.scene.rng_seed, 99);
        assert_eq!(cfg.scene.sampling.rng_seed, 99);
        assert_eq!(cfg.coarse.rng_seed, 99);
        assert_eq!(cfg.fine.rng_seed, 99);
        // Different seeds give different hashes.
        let mut other = RunConfig::default();
        other.override_seed(100);
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn scene_params_build_spec() {
        let mut p = SceneParams::default();
        p.instance_count_range = (10, 12);
        let spec = p.to_scene_spec();
        assert_eq!(spec.instance_count_range, (10, 12));
        assert_eq!(spec.extent_m, [100.0, 100.0]);
    }
}
