//! Case index and image/mask ingestion.

use std::path::{Path, PathBuf};

use dermo_core::geometry::LesionMask;
use dermo_core::structure::StructureWeakLabel;
use dermo_core::ValueGrid;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CASE_INDEX: &str = "cases.json";
pub const MASK_THRESHOLD: u8 = 128;

/// One entry of `<input>/cases.json`. Paths are relative to the input directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub labels: Option<Vec<u8>>,
    /// Parsed and logged only.
    #[serde(default)]
    pub metadata: Option<serde_json::Value>,
}

impl CaseRecord {
    pub fn weak_labels(&self) -> Result<Option<StructureWeakLabel>> {
        self.labels
            .as_deref()
            .map(StructureWeakLabel::from_levels)
            .transpose()
            .map_err(CliError::from)
    }
}

pub fn load_cases(input: &Path, filter: Option<&[String]>) -> Result<Vec<CaseRecord>> {
    let path = input.join(CASE_INDEX);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read case index {}: {e}", path.display())))?;
    let mut cases: Vec<CaseRecord> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut seen = std::collections::HashSet::new();
    for case in &cases {
        if !valid_case_id(&case.case_id) || !seen.insert(case.case_id.clone()) {
            return Err(CliError::Config(format!("bad or duplicate case id '{}'", case.case_id)));
        }
    }
    if let Some(keep) = filter {
        cases.retain(|c| keep.contains(&c.case_id));
    }
    Ok(cases)
}

/// Case ids become directory names.
fn valid_case_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) && id != "." && id != ".."
}

/// 8-bit RGB image scaled to `[0, 1]` as `[h, w, 3]`.
pub fn read_image(path: &Path) -> Result<ValueGrid> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(ValueGrid::from_vec(&[h as usize, w as usize, 3], data)?)
}

/// Grayscale mask thresholded at 128.
pub fn read_mask(path: &Path) -> Result<LesionMask> {
    let gray = image::open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(LesionMask::from_fn(h as usize, w as usize, |r, c| {
        gray.get_pixel(c as u32, r as u32)[0] >= MASK_THRESHOLD
    })?)
}

pub fn read_case(input: &Path, case: &CaseRecord) -> Result<(ValueGrid, LesionMask)> {
    let image = read_image(&input.join(&case.image))?;
    let mask = read_mask(&input.join(&case.mask))?;
    if image.height() != mask.height() || image.width() != mask.width() {
        return Err(CliError::Input(format!(
            "image is {}x{} but mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    if let Some(meta) = &case.metadata {
        log::info!("case {}: metadata {} (unused)", case.case_id, meta);
    }
    Ok((image, mask))
}
