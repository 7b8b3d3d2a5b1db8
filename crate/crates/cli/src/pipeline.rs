//! The three batch stages. Each reads and writes a work directory:
//!
//! ```text
//! <work>/manifest.json                       augment
//! <work>/views/<case>/view_XX_{image,mask,rho,theta}.tensor
//! <work>/structures.json                     structures
//! <work>/structures/<case>/view_XX_{probs,projected}.tensor
//! <work>/diagnoses.json                      diagnose
//! ```

use std::path::{Path, PathBuf};

use dermo_core::augment::{augment_case, Rect, ViewSet, VIEW_SIDE};
use dermo_core::conv::ConvNet;
use dermo_core::diagnosis::{
    softmax, DiagnosisHead, DiagnosisOutput, HeadParams, CLASS_COUNT, CLASS_NAMES,
};
use dermo_core::geometry::{polar_map, Affine, NormalizedPolarMap};
use dermo_core::structure::{
    constraints_from_labels, parametric_softmax, project_with_report, ProjectionOptions, STRUCTURE_COUNT,
    STRUCTURE_SIDE,
};
use dermo_core::tensor_io::{load_tensor, load_tensors, save_tensor};
use dermo_core::{DifferentiableOp, ValueGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cases::{load_cases, read_case, CaseRecord};
use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const STRUCTURES: &str = "structures.json";
pub const DIAGNOSES: &str = "diagnoses.json";
/// Feature grid side of the toy backbone.
pub const FEATURE_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFiles {
    pub image: String,
    pub mask: String,
    pub rho: String,
    pub theta: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub index: usize,
    pub rotation_deg: f64,
    pub crop: Rect,
    pub output_side: usize,
    pub fallback: bool,
    pub lesion_area: usize,
    /// Maps view pixel centers to normalized lesion coordinates.
    pub affine: [f64; 6],
    pub files: ViewFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub status: Status,
    pub error: Option<String>,
    pub labels: Option<Vec<u8>>,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generated_at: String,
    pub seed: u64,
    pub views_per_case: usize,
    pub cases: Vec<CaseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureViewEntry {
    pub index: usize,
    pub probs: String,
    pub projected: Option<String>,
    pub max_residual: Option<f64>,
    pub sweeps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureCaseEntry {
    pub case_id: String,
    pub status: Status,
    pub error: Option<String>,
    pub views: Vec<StructureViewEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuresReport {
    pub generated_at: String,
    pub gamma: f64,
    pub score_source: String,
    pub cases: Vec<StructureCaseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisEntry {
    pub case_id: String,
    pub status: Status,
    pub error: Option<String>,
    pub per_view: Vec<[f64; CLASS_COUNT]>,
    pub fused: Option<[f64; CLASS_COUNT]>,
    pub predicted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosesReport {
    pub generated_at: String,
    pub classes: Vec<String>,
    pub cases: Vec<DiagnosisEntry>,
}

/// Per-stage case tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Outcome {
    pub succeeded: usize,
    pub failed: usize,
}

impl Outcome {
    fn tally<'a>(statuses: impl Iterator<Item = &'a Status>) -> Self {
        let mut out = Self::default();
        for s in statuses {
            match s {
                Status::Ok => out.succeeded += 1,
                Status::Failed => out.failed += 1,
            }
        }
        out
    }

    /// 0 when any case succeeded (or there were none), 2 when all failed.
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 && self.succeeded == 0 {
            2
        } else {
            0
        }
    }
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{} is missing ({e}); run `{stage}` first", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn keep(filter: Option<&[String]>, id: &str) -> bool {
    filter.is_none_or(|f| f.iter().any(|k| k == id))
}

fn view_stem(case: &str, index: usize) -> String {
    format!("{case}/view_{index:02}")
}

/// Polar coordinates of a view at `side / factor` resolution.
fn view_npc(view: &ViewEntry, factor: usize) -> Result<NormalizedPolarMap> {
    let full = polar_map(view.output_side, view.output_side, Affine(view.affine))?;
    Ok(full.pooled(factor)?)
}

// ---------------------------------------------------------------------------
// augment

pub fn run_augment(
    config: &PipelineConfig,
    input: &Path,
    work: &Path,
    filter: Option<&[String]>,
) -> Result<(Manifest, Outcome)> {
    let cases = load_cases(input, filter)?;
    let augment = config.augment();
    std::fs::create_dir_all(work.join("views"))?;
    let entries: Vec<CaseEntry> = cases
        .par_iter()
        .map(|case| match augment_one(input, work, case, config) {
            Ok(views) => CaseEntry {
                case_id: case.case_id.clone(),
                status: Status::Ok,
                error: None,
                labels: case.labels.clone(),
                views,
            },
            Err(e) => {
                log::warn!("case {} failed: {e}", case.case_id);
                CaseEntry {
                    case_id: case.case_id.clone(),
                    status: Status::Failed,
                    error: Some(e.to_string()),
                    labels: case.labels.clone(),
                    views: Vec::new(),
                }
            }
        })
        .collect();
    let manifest = Manifest {
        generated_at: timestamp(),
        seed: config.seed,
        views_per_case: augment.views_per_case(),
        cases: entries,
    };
    write_json(&work.join(MANIFEST), &manifest)?;
    let outcome = Outcome::tally(manifest.cases.iter().map(|c| &c.status));
    Ok((manifest, outcome))
}

fn augment_one(input: &Path, work: &Path, case: &CaseRecord, config: &PipelineConfig) -> Result<Vec<ViewEntry>> {
    case.weak_labels()?;
    let (image, mask) = read_case(input, case)?;
    let set: ViewSet = augment_case(&case.case_id, &image, &mask, &config.augment())?;
    std::fs::create_dir_all(work.join("views").join(&case.case_id))?;
    let mut entries = Vec::with_capacity(set.views.len());
    for (index, view) in set.views.iter().enumerate() {
        let stem = format!("views/{}", view_stem(&case.case_id, index));
        let files = ViewFiles {
            image: format!("{stem}_image.tensor"),
            mask: format!("{stem}_mask.tensor"),
            rho: format!("{stem}_rho.tensor"),
            theta: format!("{stem}_theta.tensor"),
        };
        save_tensor(&work.join(&files.image), "image", &view.image)?;
        save_tensor(&work.join(&files.mask), "mask", view.mask.grid())?;
        save_tensor(&work.join(&files.rho), "rho", &view.npc.rho)?;
        save_tensor(&work.join(&files.theta), "theta", &view.npc.theta)?;
        entries.push(ViewEntry {
            index,
            rotation_deg: view.spec.rotation_deg,
            crop: view.spec.crop,
            output_side: view.spec.output_side,
            fallback: view.spec.fallback,
            lesion_area: view.mask.area(),
            affine: view.npc.affine.0,
            files,
        });
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// structures

pub fn run_structures(config: &PipelineConfig, work: &Path, filter: Option<&[String]>) -> Result<(StructuresReport, Outcome)> {
    let manifest: Manifest = read_json(&work.join(MANIFEST), "augment")?;
    let net = ConvNet::toy_score_net(STRUCTURE_COUNT, config.seed);
    std::fs::create_dir_all(work.join("structures"))?;
    let entries: Vec<StructureCaseEntry> = manifest
        .cases
        .par_iter()
        .filter(|c| keep(filter, &c.case_id))
        .map(|case| {
            let result = if case.status == Status::Failed {
                Err(CliError::Input("augmentation failed".into()))
            } else {
                structures_one(config, work, case, &net)
            };
            match result {
                Ok(views) => StructureCaseEntry {
                    case_id: case.case_id.clone(),
                    status: Status::Ok,
                    error: None,
                    views,
                },
                Err(e) => {
                    log::warn!("case {} failed: {e}", case.case_id);
                    StructureCaseEntry {
                        case_id: case.case_id.clone(),
                        status: Status::Failed,
                        error: Some(e.to_string()),
                        views: Vec::new(),
                    }
                }
            }
        })
        .collect();
    let report = StructuresReport {
        generated_at: timestamp(),
        gamma: config.gamma,
        score_source: match &config.scores_dir {
            Some(dir) => dir.display().to_string(),
            None => "toy".into(),
        },
        cases: entries,
    };
    write_json(&work.join(STRUCTURES), &report)?;
    let outcome = Outcome::tally(report.cases.iter().map(|c| &c.status));
    Ok((report, outcome))
}

fn view_scores(config: &PipelineConfig, work: &Path, case: &str, view: &ViewEntry, net: &ConvNet) -> Result<ValueGrid> {
    let scores = match &config.scores_dir {
        Some(dir) => load_tensor(&dir.join(format!("{}_scores.tensor", view_stem(case, view.index))))?.1,
        None => net.forward(&load_tensor(&work.join(&view.files.image))?.1)?,
    };
    scores.expect_shape(&[STRUCTURE_SIDE, STRUCTURE_SIDE, STRUCTURE_COUNT])?;
    Ok(scores)
}

fn structures_one(config: &PipelineConfig, work: &Path, case: &CaseEntry, net: &ConvNet) -> Result<Vec<StructureViewEntry>> {
    let labels = case
        .labels
        .as_deref()
        .map(dermo_core::structure::StructureWeakLabel::from_levels)
        .transpose()?;
    std::fs::create_dir_all(work.join("structures").join(&case.case_id))?;
    let mut entries = Vec::with_capacity(case.views.len());
    for view in &case.views {
        let scores = view_scores(config, work, &case.case_id, view, net)?;
        let probs = parametric_softmax(&scores, config.gamma)?;
        let stem = format!("structures/{}", view_stem(&case.case_id, view.index));
        let probs_path = format!("{stem}_probs.tensor");
        save_tensor(&work.join(&probs_path), "probs", &probs)?;
        let mut entry = StructureViewEntry {
            index: view.index,
            probs: probs_path,
            projected: None,
            max_residual: None,
            sweeps: None,
        };
        if let Some(labels) = &labels {
            let npc = view_npc(view, view.output_side / STRUCTURE_SIDE)?;
            let constraints = constraints_from_labels(labels, &npc, &config.structure())?;
            let projection = project_with_report(&probs, &constraints, &ProjectionOptions::default())?;
            let path = format!("{stem}_projected.tensor");
            save_tensor(&work.join(&path), "projected", &projection.maps)?;
            entry.projected = Some(path);
            entry.max_residual = Some(projection.residuals.iter().copied().fold(0.0, f64::max));
            entry.sweeps = Some(projection.sweeps);
        }
        entries.push(entry);
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// diagnose

pub fn load_head(config: &PipelineConfig) -> Result<HeadParams> {
    let params = match &config.head_params {
        Some(path) => {
            let tensors = load_tensors(path)
                .map_err(|e| CliError::Config(format!("head parameters {}: {e}", path.display())))?;
            HeadParams::from_named(&tensors, &config.polar).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => HeadParams::random(config.channels, &config.polar, config.seed.wrapping_add(2))?,
    };
    if params.channels() != config.channels {
        return Err(CliError::Config(format!(
            "head parameters expect {} channels but config has {}",
            params.channels(),
            config.channels
        )));
    }
    Ok(params)
}

pub fn run_diagnose(config: &PipelineConfig, work: &Path, filter: Option<&[String]>) -> Result<(DiagnosesReport, Outcome)> {
    let manifest: Manifest = read_json(&work.join(MANIFEST), "augment")?;
    let structures: StructuresReport = read_json(&work.join(STRUCTURES), "structures")?;
    let params = load_head(config)?;
    let backbone = ConvNet::toy_backbone(config.channels, config.seed.wrapping_add(1));
    let entries: Vec<DiagnosisEntry> = manifest
        .cases
        .par_iter()
        .filter(|c| keep(filter, &c.case_id))
        .map(|case| {
            let maps = structures.cases.iter().find(|s| s.case_id == case.case_id);
            match diagnose_one(config, work, case, maps, &params, &backbone) {
                Ok(out) => DiagnosisEntry {
                    case_id: case.case_id.clone(),
                    status: Status::Ok,
                    error: None,
                    predicted: Some(CLASS_NAMES[out.predicted_class()].to_string()),
                    per_view: out.per_view,
                    fused: Some(out.fused),
                },
                Err(e) => {
                    log::warn!("case {} failed: {e}", case.case_id);
                    DiagnosisEntry {
                        case_id: case.case_id.clone(),
                        status: Status::Failed,
                        error: Some(e.to_string()),
                        per_view: Vec::new(),
                        fused: None,
                        predicted: None,
                    }
                }
            }
        })
        .collect();
    let report = DiagnosesReport {
        generated_at: timestamp(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        cases: entries,
    };
    write_json(&work.join(DIAGNOSES), &report)?;
    let outcome = Outcome::tally(report.cases.iter().map(|c| &c.status));
    Ok((report, outcome))
}

fn diagnose_one(
    config: &PipelineConfig,
    work: &Path,
    case: &CaseEntry,
    maps: Option<&StructureCaseEntry>,
    params: &HeadParams,
    backbone: &ConvNet,
) -> Result<DiagnosisOutput> {
    if case.status == Status::Failed {
        return Err(CliError::Input("augmentation failed".into()));
    }
    let maps = maps
        .filter(|m| m.status == Status::Ok)
        .ok_or_else(|| CliError::Input("structure maps are missing".into()))?;
    let mut per_view = Vec::with_capacity(case.views.len());
    for view in &case.views {
        let entry = maps
            .views
            .iter()
            .find(|v| v.index == view.index)
            .ok_or_else(|| CliError::Input(format!("view {} has no structure maps", view.index)))?;
        let structure_path: PathBuf = work.join(entry.projected.as_ref().unwrap_or(&entry.probs));
        let structure = load_tensor(&structure_path)?.1;
        let image = load_tensor(&work.join(&view.files.image))?.1;
        let features = backbone.forward(&image)?;
        let npc = view_npc(view, VIEW_SIDE / FEATURE_SIDE)?;
        let head = DiagnosisHead::new(params.clone(), &npc, &config.polar)?;
        let scores = head.forward(&[features, structure])?;
        let p = softmax(scores.data());
        per_view.push([p[0], p[1], p[2]]);
    }
    Ok(DiagnosisOutput::from_views(per_view)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_reflects_total_failure_only() {
        let cases = |ok, failed| Outcome { succeeded: ok, failed };
        assert_eq!(cases(0, 0).exit_code(), 0);
        assert_eq!(cases(1, 3).exit_code(), 0);
        assert_eq!(cases(0, 2).exit_code(), 2);
    }

    #[test]
    fn view_paths_are_zero_padded() {
        assert_eq!(view_stem("ISIC_1", 7), "ISIC_1/view_07");
        assert!(keep(None, "x"));
        assert!(!keep(Some(&["y".to_string()]), "x"));
    }

    #[test]
    fn missing_manifest_is_a_configuration_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_structures(&PipelineConfig::default(), dir.path(), None).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }
}
