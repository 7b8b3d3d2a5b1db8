//! Synthetic case directories shared by the integration targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct CaseSpec {
    pub id: &'static str,
    pub width: u32,
    pub height: u32,
    /// Mask size differs from the image when set.
    pub mask_size: Option<(u32, u32)>,
    pub labels: Option<[u8; 8]>,
}

impl CaseSpec {
    pub fn good(id: &'static str, width: u32, height: u32) -> Self {
        Self {
            id,
            width,
            height,
            mask_size: None,
            labels: None,
        }
    }
}

/// Writes PNG images, PGM masks and `cases.json` into `dir`.
pub fn write_cases(dir: &Path, specs: &[CaseSpec]) {
    let mut index = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let (w, h) = (spec.width, spec.height);
        let (cx, cy) = (w as f64 * 0.52, h as f64 * 0.47);
        let (a, b, phi) = (w as f64 * 0.28, h as f64 * 0.22, 0.4 + k as f64);
        let inside = |x: u32, y: u32| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let u = (dx * phi.cos() + dy * phi.sin()) / a;
            let v = (-dx * phi.sin() + dy * phi.cos()) / b;
            u * u + v * v <= 1.0
        };
        let image = image::RgbImage::from_fn(w, h, |x, y| {
            let base: [f64; 3] = if inside(x, y) { [90.0, 55.0, 35.0] } else { [205.0, 160.0, 140.0] };
            image::Rgb(base.map(|v| (v + rng.gen_range(-12.0..12.0)).clamp(0.0, 255.0) as u8))
        });
        let (mw, mh) = spec.mask_size.unwrap_or((w, h));
        let mask = image::GrayImage::from_fn(mw, mh, |x, y| image::Luma([if inside(x, y) { 255 } else { 0 }]));
        let image_name = format!("{}.png", spec.id);
        let mask_name = format!("{}_mask.pgm", spec.id);
        image.save(dir.join(&image_name)).unwrap();
        mask.save(dir.join(&mask_name)).unwrap();
        let mut record = serde_json::json!({ "case_id": spec.id, "image": image_name, "mask": mask_name });
        if let Some(labels) = spec.labels {
            record["labels"] = serde_json::json!(labels);
        }
        index.push(record);
    }
    std::fs::write(dir.join("cases.json"), serde_json::to_string_pretty(&index).unwrap()).unwrap();
}

pub fn dermo(args: &[&str], work: &Path, extra_env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dermo"));
    cmd.args(args).arg("--output").arg(work).env("RUST_LOG", "error");
    for (k, v) in extra_env {
        cmd.env(k, v);
    }
    cmd.output().expect("failed to launch dermo")
}

/// All files below `root`, relative and sorted.
pub fn list_files(root: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
