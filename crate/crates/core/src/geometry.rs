//! Moment-matched lesion ellipse and normalized polar coordinates.
//!
//! Pixel centers sit at integer coordinates, `x` along columns and `y` along
//! rows (pointing down). Angles are measured from `+x` towards `+y`.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::tensor::ValueGrid;

/// Minimum lesion area accepted by ellipse fitting.
pub const MIN_LESION_AREA: usize = 16;
/// Minimum ratio of minor to major covariance eigenvalue.
pub const MIN_EIGEN_RATIO: f64 = 1e-6;

/// Binary `[h, w]` lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMask {
    grid: ValueGrid,
    area: usize,
}

impl LesionMask {
    /// Wraps a grid whose values are exactly 0 or 1.
    pub fn new(grid: ValueGrid) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::Shape(format!(
                "mask must be [h, w], got {:?}",
                grid.shape()
            )));
        }
        let mut area = 0;
        for &v in grid.data() {
            if v == 1.0 {
                area += 1;
            } else if v != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "mask values must be 0 or 1, found {v}"
                )));
            }
        }
        Ok(Self { grid, area })
    }

    pub fn from_fn(height: usize, width: usize, inside: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut grid = ValueGrid::zeros(&[height, width])?;
        let mut area = 0;
        for row in 0..height {
            for col in 0..width {
                if inside(row, col) {
                    grid.set2(row, col, 1.0);
                    area += 1;
                }
            }
        }
        Ok(Self { grid, area })
    }

    pub fn grid(&self) -> &ValueGrid {
        &self.grid
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.grid.at2(row, col) == 1.0
    }
}

/// Centroid `(x, y)` and population covariance `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskMoments {
    pub centroid: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEllipse {
    pub center: [f64; 2],
    /// Semi-axes `(a, b)` with `a >= b`.
    pub semi_axes: [f64; 2],
    /// Major-axis angle in `[0, pi)`.
    pub orientation: f64,
}

impl MomentEllipse {
    /// Whether the pixel center `(x, y)` falls inside the ellipse.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = normalizing_affine(self).apply(x, y);
        u * u + v * v <= 1.0
    }

    /// Filled rasterization over an `h x w` grid.
    pub fn rasterize(&self, height: usize, width: usize) -> Result<LesionMask> {
        let affine = normalizing_affine(self);
        LesionMask::from_fn(height, width, |row, col| {
            let (u, v) = affine.apply(col as f64, row as f64);
            u * u + v * v <= 1.0
        })
    }
}

/// Row-major 2x3 affine map `[a, b, c, d, e, f]`: `(x, y) -> (ax + by + c, dx + ey + f)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5])
    }

    /// `self` after the map `p -> scale * p + offset` (applied first).
    pub fn pre_scaled(&self, scale: f64, offset: f64) -> Affine {
        let m = &self.0;
        Affine([
            m[0] * scale,
            m[1] * scale,
            m[2] + (m[0] + m[1]) * offset,
            m[3] * scale,
            m[4] * scale,
            m[5] + (m[3] + m[4]) * offset,
        ])
    }
}

/// Per-pixel normalized radius and angle plus the affine that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPolarMap {
    pub rho: ValueGrid,
    pub theta: ValueGrid,
    pub affine: Affine,
}

impl NormalizedPolarMap {
    pub fn height(&self) -> usize {
        self.rho.height()
    }

    pub fn width(&self) -> usize {
        self.rho.width()
    }

    /// Block-averaged map at `1/factor` resolution. `rho` is the plain block
    /// mean; `theta` is the circular mean of the block's angles.
    pub fn pooled(&self, factor: usize) -> Result<NormalizedPolarMap> {
        let (h, w) = (self.height(), self.width());
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "cannot pool {h}x{w} polar map by {factor}"
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut rho = ValueGrid::zeros(&[oh, ow])?;
        let mut theta = ValueGrid::zeros(&[oh, ow])?;
        let norm = (factor * factor) as f64;
        for orow in 0..oh {
            for ocol in 0..ow {
                let (mut r, mut sx, mut sy) = (0.0, 0.0, 0.0);
                for row in orow * factor..(orow + 1) * factor {
                    for col in ocol * factor..(ocol + 1) * factor {
                        r += self.rho.at2(row, col);
                        let t = self.theta.at2(row, col);
                        sx += t.cos();
                        sy += t.sin();
                    }
                }
                rho.set2(orow, ocol, r / norm);
                theta.set2(orow, ocol, wrap_angle(sy.atan2(sx)));
            }
        }
        Ok(NormalizedPolarMap {
            rho,
            theta,
            affine: self.affine.pre_scaled(factor as f64, (factor as f64 - 1.0) / 2.0),
        })
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_angle(t: f64) -> f64 {
    let w = t.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Centroid and population covariance of the mask's pixel centers.
pub fn mask_moments(mask: &LesionMask) -> Result<MaskMoments> {
    if mask.area() == 0 {
        return Err(Error::EmptyMask);
    }
    let n = mask.area() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.contains(row, col) {
                sx += col as f64;
                sy += row as f64;
            }
        }
    }
    let (cx, cy) = (sx / n, sy / n);
    let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.contains(row, col) {
                let dx = col as f64 - cx;
                let dy = row as f64 - cy;
                xx += dx * dx;
                xy += dx * dy;
                yy += dy * dy;
            }
        }
    }
    Ok(MaskMoments {
        centroid: [cx, cy],
        covariance: [[xx / n, xy / n], [xy / n, yy / n]],
    })
}

/// Ellipse whose filled interior has the given second-order moments.
pub fn ellipse_from_moments(moments: &MaskMoments) -> Result<MomentEllipse> {
    let [[xx, xy], [_, yy]] = moments.covariance;
    let mean = 0.5 * (xx + yy);
    let spread = (0.25 * (xx - yy) * (xx - yy) + xy * xy).sqrt();
    let major = mean + spread;
    let minor = mean - spread;
    if !(major > 0.0) || minor <= MIN_EIGEN_RATIO * major {
        return Err(Error::DegenerateMask(format!(
            "covariance eigenvalues ({major:.3e}, {minor:.3e}) are collinear"
        )));
    }
    // atan2(0, 0) = 0 gives the circle tie-break.
    let orientation = 0.5 * (2.0 * xy).atan2(xx - yy);
    let orientation = orientation.rem_euclid(PI);
    let orientation = if orientation >= PI { 0.0 } else { orientation };
    Ok(MomentEllipse {
        center: moments.centroid,
        semi_axes: [2.0 * major.sqrt(), 2.0 * minor.sqrt()],
        orientation,
    })
}

/// Moment ellipse of a mask, rejecting masks too small to fit reliably.
pub fn fit_ellipse(mask: &LesionMask) -> Result<MomentEllipse> {
    if mask.area() == 0 {
        return Err(Error::EmptyMask);
    }
    if mask.area() < MIN_LESION_AREA {
        return Err(Error::DegenerateMask(format!(
            "lesion area {} is below {MIN_LESION_AREA} px",
            mask.area()
        )));
    }
    ellipse_from_moments(&mask_moments(mask)?)
}

/// Translate to the center, rotate the major axis onto `+x`, then scale the
/// semi-axes to 1.
pub fn normalizing_affine(ellipse: &MomentEllipse) -> Affine {
    let (s, c) = ellipse.orientation.sin_cos();
    let [a, b] = ellipse.semi_axes;
    let [cx, cy] = ellipse.center;
    Affine([
        c / a,
        s / a,
        -(c * cx + s * cy) / a,
        -s / b,
        c / b,
        (s * cx - c * cy) / b,
    ])
}

/// Polar coordinates of every pixel center of an `h x w` grid. `rho` is not
/// clamped.
pub fn polar_map(height: usize, width: usize, affine: Affine) -> Result<NormalizedPolarMap> {
    let mut rho = ValueGrid::zeros(&[height, width])?;
    let mut theta = ValueGrid::zeros(&[height, width])?;
    for row in 0..height {
        for col in 0..width {
            let (u, v) = affine.apply(col as f64, row as f64);
            rho.set2(row, col, u.hypot(v));
            theta.set2(row, col, wrap_angle(v.atan2(u)));
        }
    }
    Ok(NormalizedPolarMap { rho, theta, affine })
}

/// Fits the mask's ellipse and returns the polar map over the mask's grid.
pub fn normalized_polar_coordinates(mask: &LesionMask) -> Result<NormalizedPolarMap> {
    let ellipse = fit_ellipse(mask)?;
    polar_map(mask.height(), mask.width(), normalizing_affine(&ellipse))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(size: usize, cx: f64, cy: f64, r: f64) -> LesionMask {
        LesionMask::from_fn(size, size, |row, col| {
            let dx = col as f64 - cx;
            let dy = row as f64 - cy;
            dx * dx + dy * dy <= r * r
        })
        .unwrap()
    }

    #[test]
    fn point_mass_has_zero_covariance() {
        let mask = LesionMask::from_fn(10, 10, |row, col| row == 7 && col == 5).unwrap();
        let m = mask_moments(&mask).unwrap();
        assert_eq!(m.centroid, [5.0, 7.0]);
        assert_eq!(m.covariance, [[0.0; 2]; 2]);
    }

    #[test]
    fn rectangle_moments_match_summation() {
        let mask = LesionMask::from_fn(8, 12, |row, col| row <= 4 && col <= 9).unwrap();
        assert_eq!(mask.area(), 50);
        let m = mask_moments(&mask).unwrap();
        assert!((m.centroid[0] - 4.5).abs() < 1e-12);
        assert!((m.centroid[1] - 2.0).abs() < 1e-12);
        assert!((m.covariance[0][0] - 8.25).abs() < 1e-12);
        assert!((m.covariance[1][1] - 2.0).abs() < 1e-12);
        assert!(m.covariance[0][1].abs() < 1e-12);

        let e = ellipse_from_moments(&m).unwrap();
        assert!((e.semi_axes[0] - 2.0 * 8.25f64.sqrt()).abs() < 1e-12);
        assert!((e.semi_axes[1] - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(e.orientation, 0.0);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mask = LesionMask::from_fn(4, 4, |_, _| false).unwrap();
        assert!(matches!(mask_moments(&mask), Err(Error::EmptyMask)));
        assert!(matches!(fit_ellipse(&mask), Err(Error::EmptyMask)));
    }

    #[test]
    fn collinear_and_tiny_masks_are_degenerate() {
        let line = LesionMask::from_fn(40, 40, |row, _| row == 3).unwrap();
        assert!(matches!(fit_ellipse(&line), Err(Error::DegenerateMask(_))));
        let tiny = LesionMask::from_fn(40, 40, |row, col| row < 3 && col < 3).unwrap();
        assert!(matches!(fit_ellipse(&tiny), Err(Error::DegenerateMask(_))));
        let m = MaskMoments {
            centroid: [0.0, 0.0],
            covariance: [[4.0, 0.0], [0.0, 0.0]],
        };
        assert!(matches!(ellipse_from_moments(&m), Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        let g = ValueGrid::from_vec(&[1, 2], vec![0.0, 0.5]).unwrap();
        assert!(LesionMask::new(g).is_err());
    }

    #[test]
    fn isotropic_covariance_is_a_circle_with_zero_orientation() {
        let r: f64 = 12.0;
        let m = MaskMoments {
            centroid: [3.0, 4.0],
            covariance: [[r * r / 4.0, 0.0], [0.0, r * r / 4.0]],
        };
        let e = ellipse_from_moments(&m).unwrap();
        assert!((e.semi_axes[0] - r).abs() < 1e-12);
        assert!((e.semi_axes[1] - r).abs() < 1e-12);
        assert_eq!(e.orientation, 0.0);
    }

    #[test]
    fn large_disk_covariance_is_quarter_radius_squared() {
        let r = 64.0;
        let mask = disk(160, 80.0, 80.0, r);
        let m = mask_moments(&mask).unwrap();
        let expected = r * r / 4.0;
        assert!((m.covariance[0][0] / expected - 1.0).abs() < 0.02);
        assert!((m.covariance[1][1] / expected - 1.0).abs() < 0.02);
        assert!(m.covariance[0][1].abs() < 1e-9);
    }

    #[test]
    fn affine_maps_boundary_to_unit_circle() {
        let circle = MomentEllipse {
            center: [20.0, 30.0],
            semi_axes: [7.0, 7.0],
            orientation: 0.0,
        };
        let a = normalizing_affine(&circle);
        let (u, v) = a.apply(27.0, 30.0);
        assert!((u - 1.0).abs() < 1e-12 && v.abs() < 1e-12);
        let (u, v) = a.apply(20.0, 30.0);
        assert!(u.abs() < 1e-12 && v.abs() < 1e-12);

        let e = MomentEllipse {
            center: [4.5, 2.0],
            semi_axes: [5.745, 2.828],
            orientation: 0.0,
        };
        let (u, v) = normalizing_affine(&e).apply(10.245, 2.0);
        assert!((u - 1.0).abs() < 1e-12 && v.abs() < 1e-12);
    }

    #[test]
    fn polar_map_axes_land_on_theta_zero_and_half_pi() {
        let phi: f64 = 0.4;
        let e = MomentEllipse {
            center: [50.0, 40.0],
            semi_axes: [20.0, 10.0],
            orientation: phi,
        };
        let affine = normalizing_affine(&e);
        let major = (50.0 + 20.0 * phi.cos(), 40.0 + 20.0 * phi.sin());
        let minor = (50.0 - 10.0 * phi.sin(), 40.0 + 10.0 * phi.cos());
        let (u, v) = affine.apply(major.0, major.1);
        assert!((u.hypot(v) - 1.0).abs() < 1e-12);
        assert!(wrap_angle(v.atan2(u)).min(TAU - wrap_angle(v.atan2(u))) < 1e-12);
        let (u, v) = affine.apply(minor.0, minor.1);
        assert!((u.hypot(v) - 1.0).abs() < 1e-12);
        assert!((wrap_angle(v.atan2(u)) - PI / 2.0).abs() < 1e-12);

        let circle = MomentEllipse {
            center: [5.0, 5.0],
            semi_axes: [3.0, 3.0],
            orientation: 0.0,
        };
        let map = polar_map(11, 11, normalizing_affine(&circle)).unwrap();
        assert!(map.rho.at2(5, 5) < 1e-12);
        assert!((map.rho.at2(5, 8) - 1.0).abs() < 1e-12);
        let t = map.theta.at2(5, 8);
        assert!(t.min(TAU - t) < 1e-12);
        // +y is a quarter turn from +x.
        assert!((map.theta.at2(8, 5) - PI / 2.0).abs() < 1e-12);
        assert!(map.theta.data().iter().all(|&t| (0.0..TAU).contains(&t)));
    }

    #[test]
    fn pooled_affine_evaluates_at_block_centers() {
        let circle = MomentEllipse {
            center: [31.5, 31.5],
            semi_axes: [20.0, 20.0],
            orientation: 0.0,
        };
        let map = polar_map(64, 64, normalizing_affine(&circle)).unwrap();
        let low = map.pooled(8).unwrap();
        assert_eq!(low.rho.shape(), &[8, 8]);
        // Block (3, 3) spans pixels 24..32, center 27.5.
        let (u, v) = low.affine.apply(3.0, 3.0);
        let (u2, v2) = map.affine.apply(27.5, 27.5);
        assert!((u - u2).abs() < 1e-12 && (v - v2).abs() < 1e-12);
        assert!(map.pooled(5).is_err());
    }

    #[test]
    fn wrap_angle_stays_in_range() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(-0.5) - (TAU - 0.5)).abs() < 1e-12);
        assert!(wrap_angle(-1e-18) < TAU);
        assert!((wrap_angle(TAU + 1.0) - 1.0).abs() < 1e-12);
    }
}
