use std::path::{Path, PathBuf};

use dermo_core::augment::{AugmentConfig, CROPS_PER_ROTATION, DEFAULT_ROTATIONS_DEG, VIEW_SIDE};
use dermo_core::diagnosis::PolarPoolSpec;
use dermo_core::structure::{BoundConfig, RegionSpec, StructureConfig, DEFAULT_GAMMA};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Pipeline settings read from a single JSON file. Every key is optional;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub gamma: f64,
    pub polar: PolarPoolSpec,
    pub bounds: BoundConfig,
    pub regions: Vec<RegionSpec>,
    pub rotations_deg: Vec<f64>,
    pub crops_per_rotation: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Directory of `<case>/view_XX_scores.tensor` files replacing the toy
    /// score network.
    pub scores_dir: Option<PathBuf>,
    /// Head parameter file; a seeded random head is used when absent.
    pub head_params: Option<PathBuf>,
    /// Backbone feature channels.
    pub channels: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let structure = StructureConfig::default();
        Self {
            gamma: DEFAULT_GAMMA,
            polar: PolarPoolSpec::default(),
            bounds: structure.bounds,
            regions: structure.regions,
            rotations_deg: DEFAULT_ROTATIONS_DEG.to_vec(),
            crops_per_rotation: CROPS_PER_ROTATION,
            output_dir: PathBuf::from("out"),
            seed: 0,
            scores_dir: None,
            head_params: None,
            channels: 8,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            rotations_deg: self.rotations_deg.clone(),
            crops_per_rotation: self.crops_per_rotation,
            output_side: VIEW_SIDE,
        }
    }

    pub fn structure(&self) -> StructureConfig {
        StructureConfig {
            bounds: self.bounds,
            regions: self.regions.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |e: dermo_core::Error| CliError::Config(e.to_string());
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(CliError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.channels == 0 {
            return Err(CliError::Config("channels must be positive".into()));
        }
        self.polar.validate().map_err(bad)?;
        if !self.polar.angles.is_multiple_of(2) {
            return Err(CliError::Config("polar.angles must be even".into()));
        }
        self.structure().validate().map_err(bad)?;
        self.augment().validate().map_err(bad)?;
        Ok(())
    }
}
