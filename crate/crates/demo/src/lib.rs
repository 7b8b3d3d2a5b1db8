//! Browser demo over the core geometry: lesion polar coordinates, polar
//! pooling with asymmetry, and rotation with the inscribed crop. The plain
//! functions are tested natively; the `#[wasm_bindgen]` wrappers are thin.

use std::f64::consts::TAU;

use dermo_core::augment::{largest_inscribed_rect, rotate_with_mask, square_crops, Rect};
use dermo_core::diagnosis::{Asymmetry, PolarPool, PolarPoolSpec, PoolMode};
use dermo_core::geometry::{fit_ellipse, normalized_polar_coordinates, LesionMask, MomentEllipse};
use dermo_core::{DifferentiableOp, Result, ValueGrid};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// RGBA raster with a JSON summary.
#[derive(Debug, Clone)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
    pub info: serde_json::Value,
}

impl Frame {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgba: vec![255; width * height * 4],
            info: serde_json::Value::Null,
        }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 4;
        self.rgba[i..i + 3].copy_from_slice(&rgb);
    }

    fn outline(&mut self, r: Rect, rgb: [u8; 3]) {
        for x in r.x..r.x + r.w {
            self.put(x, r.y, rgb);
            self.put(x, r.y + r.h - 1, rgb);
        }
        for y in r.y..r.y + r.h {
            self.put(r.x, y, rgb);
            self.put(r.x + r.w - 1, y, rgb);
        }
    }
}

/// A synthetic lesion: an ellipse centered on the canvas plus an optional
/// lobe at one end of the major axis that skews the fitted ellipse.
#[derive(Debug, Clone, Copy)]
pub struct LesionParams {
    pub width: usize,
    pub height: usize,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle_deg: f64,
    /// Lobe radius as a fraction of the minor semi-axis.
    pub lobe: f64,
}

impl LesionParams {
    pub fn mask(&self) -> Result<LesionMask> {
        let (cx, cy) = ((self.width - 1) as f64 / 2.0, (self.height - 1) as f64 / 2.0);
        let phi = self.angle_deg.to_radians();
        let base = MomentEllipse {
            center: [cx, cy],
            semi_axes: [self.semi_major.max(self.semi_minor), self.semi_minor.min(self.semi_major)],
            orientation: phi,
        };
        let lobe_r = self.lobe * self.semi_minor;
        let (lx, ly) = (cx + self.semi_major * phi.cos(), cy + self.semi_major * phi.sin());
        LesionMask::from_fn(self.height, self.width, |r, c| {
            let (x, y) = (c as f64, r as f64);
            base.contains(x, y) || (lobe_r > 0.0 && (x - lx).hypot(y - ly) <= lobe_r)
        })
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6.fract();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match h6 as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Blue-to-yellow ramp for values in `[0, 1]`.
fn ramp(v: f64) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0);
    [(30.0 + 220.0 * t) as u8, (40.0 + 180.0 * t) as u8, (140.0 - 100.0 * t) as u8]
}

fn is_edge(mask: &LesionMask, r: usize, c: usize) -> bool {
    mask.contains(r, c)
        && [(0, 1), (2, 1), (1, 0), (1, 2)].iter().any(|&(dr, dc)| {
            let (rr, cc) = ((r + dr).wrapping_sub(1), (c + dc).wrapping_sub(1));
            rr >= mask.height() || cc >= mask.width() || !mask.contains(rr, cc)
        })
}

fn ellipse_json(e: &MomentEllipse) -> serde_json::Value {
    json!({
        "center": e.center,
        "semi_axes": e.semi_axes,
        "orientation_deg": e.orientation.to_degrees(),
    })
}

/// Angle as hue, radius as ring stripes; the fitted unit circle is white.
pub fn polar_map_frame(p: &LesionParams) -> Result<Frame> {
    let mask = p.mask()?;
    let fitted = fit_ellipse(&mask)?;
    let npc = normalized_polar_coordinates(&mask)?;
    let mut frame = Frame::new(p.width, p.height);
    let mut inside = 0usize;
    for r in 0..p.height {
        for c in 0..p.width {
            let (rho, theta) = (npc.rho.at2(r, c), npc.theta.at2(r, c));
            let rgb = if is_edge(&mask, r, c) {
                [0, 0, 0]
            } else if (rho - 1.0).abs() < 0.015 {
                [255, 255, 255]
            } else if rho <= 1.0 {
                let stripe = (rho * 4.0).fract() < 0.05;
                hsv(theta / TAU, 0.75, if stripe { 0.55 } else { 0.95 })
            } else {
                hsv(theta / TAU, 0.25, (0.2 + 0.5 / rho).min(0.7))
            };
            if mask.contains(r, c) && rho <= 1.0 {
                inside += 1;
            }
            frame.put(c, r, rgb);
        }
    }
    frame.info = json!({
        "fitted": ellipse_json(&fitted),
        "lesion_area": mask.area(),
        "inside_unit_disk": inside as f64 / mask.area() as f64,
    });
    Ok(frame)
}

/// Smooth, deliberately asymmetric stand-in for a feature channel.
fn synthetic_feature(width: usize, height: usize) -> Result<ValueGrid> {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let data = (0..height)
        .flat_map(|r| (0..width).map(move |c| (c as f64 - cx, r as f64 - cy)))
        .map(|(x, y)| 0.5 + 0.3 * (0.06 * x + 0.02 * y).sin() + 0.2 * (-((x - 20.0).powi(2) + y * y) / 800.0).exp())
        .collect();
    ValueGrid::from_vec(&[height, width, 1], data)
}

/// Sectors painted with their pooled feature value, plus fold-axis asymmetry.
pub fn polar_pool_frame(p: &LesionParams, rings: usize, angles: usize, overlap: f64, max_mode: bool) -> Result<Frame> {
    let mask = p.mask()?;
    let npc = normalized_polar_coordinates(&mask)?;
    let mode = if max_mode { PoolMode::Max } else { PoolMode::Average };
    let spec = PolarPoolSpec::new(rings, angles, mode, overlap);
    spec.validate()?;
    let pool = PolarPool::new(&npc, &spec)?;
    let feature = synthetic_feature(p.width, p.height)?;
    let pooled = pool.forward(&[feature])?;
    let asymmetry = Asymmetry.forward(std::slice::from_ref(&pooled))?;

    let mut frame = Frame::new(p.width, p.height);
    for r in 0..p.height {
        for c in 0..p.width {
            frame.put(c, r, [25, 25, 30]);
        }
    }
    for ring in 0..rings {
        for a in 0..angles {
            let rgb = ramp(pooled.at3(ring, a, 0));
            for &px in pool.members(ring, a) {
                frame.put(px % p.width, px / p.width, rgb);
            }
        }
    }
    for r in 0..p.height {
        for c in 0..p.width {
            if is_edge(&mask, r, c) {
                frame.put(c, r, [255, 255, 255]);
            }
        }
    }
    let table: Vec<Vec<f64>> = (0..rings).map(|r| (0..angles).map(|a| pooled.at3(r, a, 0)).collect()).collect();
    frame.info = json!({
        "pooled": table,
        "asymmetry": asymmetry.data(),
        "empty_sectors": pool.empty_sectors().len(),
    });
    Ok(frame)
}

/// Rotated synthetic image; invalid canvas pixels are tinted, the inscribed
/// rectangle is green and the square crops are outlined in turn.
pub fn rotation_frame(width: usize, height: usize, angle_deg: f64, crops: usize) -> Result<Frame> {
    let lesion = LesionParams {
        width,
        height,
        semi_major: width.min(height) as f64 * 0.3,
        semi_minor: width.min(height) as f64 * 0.2,
        angle_deg: 20.0,
        lobe: 0.0,
    };
    let mask = lesion.mask()?;
    let data = (0..height)
        .flat_map(|r| (0..width).map(move |c| (r, c)))
        .flat_map(|(r, c)| {
            let check = ((r / 16 + c / 16) % 2) as f64;
            if mask.contains(r, c) {
                [0.35, 0.2, 0.12]
            } else {
                [0.8 + 0.1 * check, 0.62 + 0.1 * check, 0.55]
            }
        })
        .collect();
    let image = ValueGrid::from_vec(&[height, width, 3], data)?;
    let rotated = rotate_with_mask(&image, &mask, angle_deg)?;
    let (oh, ow) = (rotated.image.height(), rotated.image.width());
    let rect = largest_inscribed_rect(width, height, angle_deg);
    let squares = square_crops(rect, crops.max(1));

    let mut frame = Frame::new(ow, oh);
    for r in 0..oh {
        for c in 0..ow {
            let rgb = if rotated.valid.at2(r, c) > 0.0 {
                [0, 1, 2].map(|k| (rotated.image.at3(r, c, k) * 255.0).round() as u8)
            } else {
                [60, 20, 20]
            };
            frame.put(c, r, rgb);
        }
    }
    frame.outline(rect, [0, 220, 90]);
    let palette = [[255, 210, 0], [0, 200, 255], [255, 80, 200]];
    for (k, sq) in squares.iter().enumerate() {
        frame.outline(*sq, palette[k % palette.len()]);
    }
    let rect_json = |r: &Rect| json!({ "x": r.x, "y": r.y, "w": r.w, "h": r.h });
    frame.info = json!({
        "canvas": [ow, oh],
        "inscribed": rect_json(&rect),
        "crops": squares.iter().map(rect_json).collect::<Vec<_>>(),
    });
    Ok(frame)
}

// ---------------------------------------------------------------------------
// wasm bindings

#[wasm_bindgen]
pub struct DemoFrame(Frame);

#[wasm_bindgen]
impl DemoFrame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.0.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.0.rgba.clone()
    }

    pub fn info(&self) -> String {
        self.0.info.to_string()
    }
}

fn wrap(frame: Result<Frame>) -> std::result::Result<DemoFrame, JsError> {
    frame.map(DemoFrame).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = polarMap)]
pub fn polar_map_js(
    width: usize,
    height: usize,
    semi_major: f64,
    semi_minor: f64,
    angle_deg: f64,
    lobe: f64,
) -> std::result::Result<DemoFrame, JsError> {
    wrap(polar_map_frame(&LesionParams {
        width,
        height,
        semi_major,
        semi_minor,
        angle_deg,
        lobe,
    }))
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = polarPool)]
pub fn polar_pool_js(
    width: usize,
    height: usize,
    semi_major: f64,
    semi_minor: f64,
    angle_deg: f64,
    lobe: f64,
    rings: usize,
    angles: usize,
    overlap: f64,
    max_mode: bool,
) -> std::result::Result<DemoFrame, JsError> {
    let lesion = LesionParams {
        width,
        height,
        semi_major,
        semi_minor,
        angle_deg,
        lobe,
    };
    wrap(polar_pool_frame(&lesion, rings, angles, overlap, max_mode))
}

#[wasm_bindgen(js_name = rotationCrop)]
pub fn rotation_crop_js(width: usize, height: usize, angle_deg: f64, crops: usize) -> std::result::Result<DemoFrame, JsError> {
    wrap(rotation_frame(width, height, angle_deg, crops))
}
