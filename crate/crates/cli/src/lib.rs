//! Batch front end: configuration, case ingestion and the
//! augment / structures / diagnose / gradcheck stages.

pub mod cases;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::PipelineConfig;
pub use error::{CliError, Result};

use dermo_core::gradcheck::{corrupt_block, default_blocks, run_blocks, GradcheckReport, DEFAULT_TRIALS};

/// Runs the gradient suite; `corrupt` names a block whose backward is
/// deliberately scaled (negative control).
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let mut blocks = default_blocks(seed, DEFAULT_TRIALS)?;
    if let Some(name) = corrupt {
        corrupt_block(&mut blocks, name).map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(run_blocks(&blocks)?)
}
