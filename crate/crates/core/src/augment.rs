//! Rotation, inscribed-rectangle cropping, square crops and resizing of a
//! lesion image/mask pair into a fixed set of views.
//!
//! A rotation by `angle` maps source point `p` to `c' + R(angle) (p - c)`
//! where `c`, `c'` are the source and canvas centers and `R` turns `+x`
//! towards `+y`. The canvas is the bounding box of the rotated pixel centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fit_ellipse, normalized_polar_coordinates, LesionMask, NormalizedPolarMap, MIN_LESION_AREA};
use crate::tensor::ValueGrid;

pub const VIEW_SIDE: usize = 256;
pub const CROPS_PER_ROTATION: usize = 3;
pub const DEFAULT_ROTATIONS_DEG: [f64; 8] = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0];

const EDGE_TOL: f64 = 1e-6;

/// Axis-aligned pixel rectangle; covers columns `x..x+w` and rows `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub rotation_deg: f64,
    pub crop: Rect,
    pub output_side: usize,
    /// Set when the planned crop held too little lesion and the view was
    /// replaced by the centered crop of the unrotated image.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: ValueGrid,
    pub mask: LesionMask,
    pub npc: NormalizedPolarMap,
    pub spec: ViewSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub case_id: String,
    pub views: Vec<View>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotations_deg: Vec<f64>,
    pub crops_per_rotation: usize,
    pub output_side: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotations_deg: DEFAULT_ROTATIONS_DEG.to_vec(),
            crops_per_rotation: CROPS_PER_ROTATION,
            output_side: VIEW_SIDE,
        }
    }
}

impl AugmentConfig {
    pub fn views_per_case(&self) -> usize {
        self.rotations_deg.len() * self.crops_per_rotation
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations_deg.is_empty() || self.crops_per_rotation == 0 || self.output_side == 0 {
            return Err(Error::InvalidArgument(
                "augmentation needs at least one rotation, one crop and a positive side".into(),
            ));
        }
        if self.rotations_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("rotation angles must be finite".into()));
        }
        Ok(())
    }
}

/// Geometry shared by rotation and inscribed-rectangle computations.
#[derive(Debug, Clone, Copy)]
pub struct RotationFrame {
    cos: f64,
    sin: f64,
    src_w: usize,
    src_h: usize,
    pub out_w: usize,
    pub out_h: usize,
}

impl RotationFrame {
    pub fn new(width: usize, height: usize, angle_deg: f64) -> Self {
        let (sin, cos) = exact_sin_cos(angle_deg);
        let span_w = (width - 1) as f64;
        let span_h = (height - 1) as f64;
        let out_w = (span_w * cos.abs() + span_h * sin.abs() - 1e-9).ceil().max(0.0) as usize + 1;
        let out_h = (span_w * sin.abs() + span_h * cos.abs() - 1e-9).ceil().max(0.0) as usize + 1;
        Self {
            cos,
            sin,
            src_w: width,
            src_h: height,
            out_w,
            out_h,
        }
    }

    /// Source coordinates of canvas pixel center `(x, y)`.
    #[inline]
    pub fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - (self.out_w - 1) as f64 / 2.0;
        let dy = y - (self.out_h - 1) as f64 / 2.0;
        (
            (self.src_w - 1) as f64 / 2.0 + self.cos * dx + self.sin * dy,
            (self.src_h - 1) as f64 / 2.0 - self.sin * dx + self.cos * dy,
        )
    }

    #[inline]
    pub fn is_valid(&self, sx: f64, sy: f64) -> bool {
        sx >= -EDGE_TOL
            && sy >= -EDGE_TOL
            && sx <= (self.src_w - 1) as f64 + EDGE_TOL
            && sy <= (self.src_h - 1) as f64 + EDGE_TOL
    }
}

/// `sin` and `cos` of an angle in degrees, exact at multiples of 90.
fn exact_sin_cos(angle_deg: f64) -> (f64, f64) {
    let a = angle_deg.rem_euclid(360.0);
    if a % 90.0 == 0.0 {
        match (a / 90.0) as u32 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        a.to_radians().sin_cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotatedPair {
    pub image: ValueGrid,
    pub mask: LesionMask,
    /// 1 where the canvas pixel samples from inside the source image.
    pub valid: ValueGrid,
}

/// Rotates image (bilinear) and mask (nearest) onto the bounding canvas.
/// Right-angle rotations are exact pixel permutations.
pub fn rotate_with_mask(image: &ValueGrid, mask: &LesionMask, angle_deg: f64) -> Result<RotatedPair> {
    let (h, w) = (image.height(), image.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but mask is {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let ch = image.channels();
    let frame = RotationFrame::new(w, h, angle_deg);
    let (ow, oh) = (frame.out_w, frame.out_h);
    let mut out = vec![0.0; oh * ow * ch];
    let mut out_mask = ValueGrid::zeros(&[oh, ow])?;
    let mut valid = ValueGrid::zeros(&[oh, ow])?;

    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = frame.source_of(x as f64, y as f64);
            if !frame.is_valid(sx, sy) {
                continue;
            }
            valid.set2(y, x, 1.0);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let base = (y * ow + x) * ch;
            sample_bilinear(image, sx, sy, &mut out[base..base + ch]);
            let (nx, ny) = (sx.round() as usize, sy.round() as usize);
            out_mask.set2(y, x, mask.grid().at2(ny, nx));
        }
    }

    let mut shape = image.shape().to_vec();
    shape[0] = oh;
    shape[1] = ow;
    Ok(RotatedPair {
        image: ValueGrid::from_vec(&shape, out)?,
        mask: LesionMask::new(out_mask)?,
        valid,
    })
}

/// Bilinear sample of all channels at in-bounds coordinates `(sx, sy)`.
fn sample_bilinear(image: &ValueGrid, sx: f64, sy: f64, dst: &mut [f64]) {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let x0 = (sx.floor() as usize).min(w - 1);
    let y0 = (sy.floor() as usize).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let data = image.data();
    if fx == 0.0 && fy == 0.0 {
        let base = (y0 * w + x0) * ch;
        dst.copy_from_slice(&data[base..base + ch]);
        return;
    }
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    for (c, d) in dst.iter_mut().enumerate() {
        let p00 = data[(y0 * w + x0) * ch + c];
        let p01 = data[(y0 * w + x1) * ch + c];
        let p10 = data[(y1 * w + x0) * ch + c];
        let p11 = data[(y1 * w + x1) * ch + c];
        let top = p00 + (p01 - p00) * fx;
        let bottom = p10 + (p11 - p10) * fx;
        *d = top + (bottom - top) * fy;
    }
}

/// Largest axis-aligned pixel rectangle of the rotated canvas whose every
/// pixel samples from inside the source image. Ties go to the rectangle
/// closest to the canvas center.
///
/// The valid region is convex, so each canvas column holds a contiguous run
/// of valid rows and a rectangle is valid exactly when its two end columns
/// share the rows it spans.
pub fn largest_inscribed_rect(width: usize, height: usize, angle_deg: f64) -> Rect {
    let frame = RotationFrame::new(width, height, angle_deg);
    let (out_w, out_h) = (frame.out_w, frame.out_h);
    let runs: Vec<Option<(usize, usize)>> = (0..out_w)
        .map(|x| {
            let valid = |y: usize| {
                let (sx, sy) = frame.source_of(x as f64, y as f64);
                frame.is_valid(sx, sy)
            };
            let top = (0..out_h).find(|&y| valid(y))?;
            let bottom = (top..out_h).rev().find(|&y| valid(y))?;
            Some((top, bottom))
        })
        .collect();
    let (cx, cy) = ((out_w - 1) as f64, (out_h - 1) as f64);
    // Twice the offset of a rectangle's center from the canvas center.
    let offset = |r: &Rect| {
        let dx = (2 * r.x + r.w - 1) as f64 - cx;
        let dy = (2 * r.y + r.h - 1) as f64 - cy;
        dx * dx + dy * dy
    };
    let mut best: Option<Rect> = None;
    for x0 in 0..out_w {
        let Some((mut top, mut bottom)) = runs[x0] else { continue };
        for x1 in x0..out_w {
            let Some((t, b)) = runs[x1] else { break };
            top = top.max(t);
            bottom = bottom.min(b);
            if top > bottom {
                break;
            }
            let cand = Rect {
                x: x0,
                y: top,
                w: x1 - x0 + 1,
                h: bottom - top + 1,
            };
            let better = match &best {
                None => true,
                Some(r) => cand.area() > r.area() || (cand.area() == r.area() && offset(&cand) < offset(r)),
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.unwrap_or(Rect {
        x: (out_w - 1) / 2,
        y: (out_h - 1) / 2,
        w: 1,
        h: 1,
    })
}

/// `count` squares of side `min(w, h)` spread evenly along the longer side,
/// from its start to its end (a single square is centered).
pub fn square_crops(rect: Rect, count: usize) -> Vec<Rect> {
    let side = rect.w.min(rect.h);
    let slack = rect.w.max(rect.h) - side;
    (0..count)
        .map(|k| {
            let offset = if count == 1 { slack / 2 } else { k * slack / (count - 1) };
            if rect.w >= rect.h {
                Rect { x: rect.x + offset, y: rect.y, w: side, h: side }
            } else {
                Rect { x: rect.x, y: rect.y + offset, w: side, h: side }
            }
        })
        .collect()
}

pub fn crop(image: &ValueGrid, rect: Rect) -> Result<ValueGrid> {
    if rect.w == 0 || rect.h == 0 || rect.x + rect.w > image.width() || rect.y + rect.h > image.height() {
        return Err(Error::Shape(format!(
            "crop {rect:?} exceeds {}x{} grid",
            image.height(),
            image.width()
        )));
    }
    let (w, ch) = (image.width(), image.channels());
    let mut data = Vec::with_capacity(rect.w * rect.h * ch);
    for row in rect.y..rect.y + rect.h {
        let start = (row * w + rect.x) * ch;
        data.extend_from_slice(&image.data()[start..start + rect.w * ch]);
    }
    let mut shape = image.shape().to_vec();
    shape[0] = rect.h;
    shape[1] = rect.w;
    ValueGrid::from_vec(&shape, data)
}

/// Bilinear resize with pixel-center alignment.
pub fn resize_bilinear(image: &ValueGrid, out_h: usize, out_w: usize) -> Result<ValueGrid> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = vec![0.0; out_h * out_w * ch];
    for y in 0..out_h {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        for x in 0..out_w {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let base = (y * out_w + x) * ch;
            sample_bilinear(image, src_x, src_y, &mut out[base..base + ch]);
        }
    }
    let mut shape = image.shape().to_vec();
    shape[0] = out_h;
    shape[1] = out_w;
    ValueGrid::from_vec(&shape, out)
}

pub fn resize_nearest(mask: &LesionMask, out_h: usize, out_w: usize) -> Result<LesionMask> {
    let (h, w) = (mask.height(), mask.width());
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    LesionMask::from_fn(out_h, out_w, |y, x| {
        let src_y = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
        let src_x = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
        mask.contains(src_y, src_x)
    })
}

fn crop_mask(mask: &LesionMask, rect: Rect) -> Result<LesionMask> {
    LesionMask::new(crop(mask.grid(), rect)?)
}

fn build_view(rotated: &RotatedPair, spec: ViewSpec) -> Result<(ValueGrid, LesionMask)> {
    let side = spec.output_side;
    let image = resize_bilinear(&crop(&rotated.image, spec.crop)?, side, side)?;
    let mask = resize_nearest(&crop_mask(&rotated.mask, spec.crop)?, side, side)?;
    Ok((image, mask))
}

/// Rotations x square crops of one case, each resized to the output side,
/// with polar coordinates refitted to the view's own mask.
pub fn augment_case(
    case_id: &str,
    image: &ValueGrid,
    mask: &LesionMask,
    config: &AugmentConfig,
) -> Result<ViewSet> {
    config.validate()?;
    fit_ellipse(mask)?;

    let mut fallback: Option<View> = None;
    let mut views = Vec::with_capacity(config.views_per_case());
    for &angle in &config.rotations_deg {
        let rotated = rotate_with_mask(image, mask, angle)?;
        let inner = largest_inscribed_rect(image.width(), image.height(), angle);
        for square in square_crops(inner, config.crops_per_rotation) {
            let spec = ViewSpec {
                rotation_deg: angle,
                crop: square,
                output_side: config.output_side,
                fallback: false,
            };
            let (view_image, view_mask) = build_view(&rotated, spec.clone())?;
            let npc = if view_mask.area() >= MIN_LESION_AREA {
                normalized_polar_coordinates(&view_mask).ok()
            } else {
                None
            };
            match npc {
                Some(npc) => views.push(View {
                    image: view_image,
                    mask: view_mask,
                    npc,
                    spec,
                }),
                None => {
                    if fallback.is_none() {
                        fallback = Some(centered_view(image, mask, config.output_side)?);
                    }
                    views.push(fallback.clone().expect("fallback view was just built"));
                }
            }
        }
    }
    Ok(ViewSet {
        case_id: case_id.to_string(),
        views,
    })
}

/// Centered square crop of the unrotated pair, flagged as a fallback.
fn centered_view(image: &ValueGrid, mask: &LesionMask, side: usize) -> Result<View> {
    let rotated = rotate_with_mask(image, mask, 0.0)?;
    let inner = largest_inscribed_rect(image.width(), image.height(), 0.0);
    let square = square_crops(inner, 1)[0];
    let spec = ViewSpec {
        rotation_deg: 0.0,
        crop: square,
        output_side: side,
        fallback: true,
    };
    let (view_image, view_mask) = build_view(&rotated, spec.clone())?;
    let npc = normalized_polar_coordinates(&view_mask)?;
    Ok(View {
        image: view_image,
        mask: view_mask,
        npc,
        spec,
    })
}
