//! Diagnosis head blocks: structure modulation, polar pooling, asymmetry,
//! the three-arm head and product-of-views fusion.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NormalizedPolarMap;
use crate::structure::STRUCTURE_COUNT;
use crate::tensor::{seeded_rng, DifferentiableOp, ValueGrid};

pub const CLASS_COUNT: usize = 3;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["nevus", "melanoma", "seborrheic_keratosis"];
/// Output channels per input channel of the modulation block.
pub const MODULATION_FACTOR: usize = STRUCTURE_COUNT + 1;
pub const HEAD_RINGS: usize = 3;
pub const HEAD_ANGLES: usize = 6;

// ---------------------------------------------------------------------------
// Modulation

/// Block-average of an `[H, W, K]` grid by `factor` along both spatial axes.
pub fn average_downsample(grid: &ValueGrid, factor: usize) -> Result<ValueGrid> {
    let (h, w, k) = (grid.height(), grid.width(), grid.channels());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("cannot pool {h}x{w} by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow * k];
    for row in 0..h {
        for col in 0..w {
            let dst = ((row / factor) * ow + col / factor) * k;
            let src = (row * w + col) * k;
            for c in 0..k {
                out[dst + c] += grid.data()[src + c] * norm;
            }
        }
    }
    ValueGrid::from_vec(&[oh, ow, k], out)
}

/// Concatenates features with their products against each (downsampled)
/// structure map: `[F | F*s_1 | ... | F*s_K]` along channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct Modulation;

impl Modulation {
    fn factor(features: &ValueGrid, structures: &ValueGrid) -> Result<usize> {
        let (h, w) = (features.height(), features.width());
        let (sh, sw) = (structures.height(), structures.width());
        if features.rank() != 3 || structures.rank() != 3 || sh % h != 0 || sw % w != 0 || sh / h != sw / w {
            return Err(Error::Shape(format!(
                "structure maps {:?} are not an integer multiple of features {:?}",
                structures.shape(),
                features.shape()
            )));
        }
        Ok(sh / h)
    }
}

impl DifferentiableOp for Modulation {
    fn name(&self) -> &str {
        "modulation"
    }

    fn forward(&self, inputs: &[ValueGrid]) -> Result<ValueGrid> {
        let (features, structures) = (&inputs[0], &inputs[1]);
        let factor = Self::factor(features, structures)?;
        let m = average_downsample(structures, factor)?;
        let (h, w, c, k) = (features.height(), features.width(), features.channels(), m.channels());
        let oc = c * (k + 1);
        let mut out = vec![0.0; h * w * oc];
        for px in 0..h * w {
            let f = &features.data()[px * c..(px + 1) * c];
            let dst = &mut out[px * oc..(px + 1) * oc];
            dst[..c].copy_from_slice(f);
            for s in 0..k {
                let weight = m.data()[px * k + s];
                for (d, &v) in dst[(s + 1) * c..(s + 2) * c].iter_mut().zip(f) {
                    *d = v * weight;
                }
            }
        }
        ValueGrid::from_vec(&[h, w, oc], out)
    }

    fn backward(&self, inputs: &[ValueGrid], grad_output: &ValueGrid) -> Result<Vec<ValueGrid>> {
        let (features, structures) = (&inputs[0], &inputs[1]);
        let factor = Self::factor(features, structures)?;
        let m = average_downsample(structures, factor)?;
        let (h, w, c, k) = (features.height(), features.width(), features.channels(), m.channels());
        let oc = c * (k + 1);
        grad_output.expect_shape(&[h, w, oc])?;
        let mut gf = vec![0.0; h * w * c];
        let mut gm = vec![0.0; h * w * k];
        for px in 0..h * w {
            let f = &features.data()[px * c..(px + 1) * c];
            let g = &grad_output.data()[px * oc..(px + 1) * oc];
            let dst = &mut gf[px * c..(px + 1) * c];
            dst.copy_from_slice(&g[..c]);
            for s in 0..k {
                let weight = m.data()[px * k + s];
                let block = &g[(s + 1) * c..(s + 2) * c];
                let mut acc = 0.0;
                for ((d, &gv), &fv) in dst.iter_mut().zip(block).zip(f) {
                    *d += gv * weight;
                    acc += gv * fv;
                }
                gm[px * k + s] = acc;
            }
        }
        // Adjoint of block averaging spreads each value over its block.
        let (sh, sw) = (structures.height(), structures.width());
        let norm = 1.0 / (factor * factor) as f64;
        let mut gs = vec![0.0; sh * sw * k];
        for row in 0..sh {
            for col in 0..sw {
                let src = ((row / factor) * w + col / factor) * k;
                let dst = (row * sw + col) * k;
                for s in 0..k {
                    gs[dst + s] = gm[src + s] * norm;
                }
            }
        }
        Ok(vec![
            ValueGrid::from_vec(features.shape(), gf)?,
            ValueGrid::from_vec(structures.shape(), gs)?,
        ])
    }
}

// ---------------------------------------------------------------------------
// Polar pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolarPoolSpec {
    pub rings: usize,
    pub angles: usize,
    pub mode: PoolMode,
    pub overlap_frac: f64,
    /// Outer radius of each ring; empty means equal-area radii `sqrt(k/R)`.
    pub ring_boundaries: Vec<f64>,
}

impl Default for PolarPoolSpec {
    fn default() -> Self {
        Self::new(HEAD_RINGS, HEAD_ANGLES, PoolMode::Average, 0.0)
    }
}

impl PolarPoolSpec {
    pub fn new(rings: usize, angles: usize, mode: PoolMode, overlap_frac: f64) -> Self {
        Self {
            rings,
            angles,
            mode,
            overlap_frac,
            ring_boundaries: equal_area_boundaries(rings),
        }
    }

    /// Boundaries in effect: the configured ones, or equal-area radii.
    pub fn boundaries(&self) -> Vec<f64> {
        if self.ring_boundaries.is_empty() {
            equal_area_boundaries(self.rings)
        } else {
            self.ring_boundaries.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rings == 0 || self.angles == 0 {
            return Err(Error::InvalidArgument("polar pooling needs rings >= 1 and angles >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.overlap_frac) {
            return Err(Error::InvalidArgument(format!(
                "overlap fraction {} outside [0, 0.5)",
                self.overlap_frac
            )));
        }
        let b = self.boundaries();
        if b.len() != self.rings
            || b[0] <= 0.0
            || b.windows(2).any(|p| p[1] <= p[0])
            || (b[b.len() - 1] - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidArgument(format!(
                "ring boundaries {b:?} must increase strictly to 1"
            )));
        }
        Ok(())
    }
}

/// Ring radii giving every ring the same area in the unit disk.
pub fn equal_area_boundaries(rings: usize) -> Vec<f64> {
    (1..=rings).map(|k| (k as f64 / rings as f64).sqrt()).collect()
}

/// Pooling over ring x angle sectors of normalized polar coordinates.
/// Pixels with `rho > 1` belong to no sector.
#[derive(Debug, Clone)]
pub struct PolarPool {
    rings: usize,
    angles: usize,
    mode: PoolMode,
    height: usize,
    width: usize,
    /// Flat pixel indices per sector `r * angles + a`, ascending.
    members: Vec<Vec<usize>>,
}

impl PolarPool {
    pub fn new(npc: &NormalizedPolarMap, spec: &PolarPoolSpec) -> Result<Self> {
        spec.validate()?;
        let bounds = spec.boundaries();
        let (rings, angles) = (spec.rings, spec.angles);
        let step = TAU / angles as f64;
        let o = spec.overlap_frac;
        let mut members = vec![Vec::new(); rings * angles];
        for (px, (&rho, &theta)) in npc.rho.data().iter().zip(npc.theta.data()).enumerate() {
            if rho > 1.0 {
                continue;
            }
            let home_ring = bounds.iter().position(|&b| rho < b).unwrap_or(rings - 1);
            let home_angle = ((theta / step) as usize).min(angles - 1);
            for r in 0..rings {
                let inner = if r == 0 { 0.0 } else { bounds[r - 1] };
                let outer = bounds[r];
                let pad = o * (outer - inner);
                let in_ring = r == home_ring || (o > 0.0 && rho >= inner - pad && rho < outer + pad);
                if !in_ring {
                    continue;
                }
                for a in 0..angles {
                    let in_angle = a == home_angle || (o > 0.0 && {
                        let start = a as f64 * step - o * step;
                        (theta - start).rem_euclid(TAU) < step * (1.0 + 2.0 * o)
                    });
                    if in_angle {
                        members[r * angles + a].push(px);
                    }
                }
            }
        }
        let pool = Self {
            rings,
            angles,
            mode: spec.mode,
            height: npc.height(),
            width: npc.width(),
            members,
        };
        let empty = pool.empty_sectors();
        if !empty.is_empty() {
            log::warn!("polar pooling: {} of {} sectors hold no pixels", empty.len(), rings * angles);
        }
        Ok(pool)
    }

    pub fn members(&self, ring: usize, angle: usize) -> &[usize] {
        &self.members[ring * self.angles + angle]
    }

    /// `(ring, angle)` of every sector without member pixels.
    pub fn empty_sectors(&self) -> Vec<(usize, usize)> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_empty())
            .map(|(idx, _)| (idx / self.angles, idx % self.angles))
            .collect()
    }

    /// Sector-wise argmax pixel per channel (first index wins ties).
    fn argmax(&self, features: &ValueGrid, sector: usize, channel: usize) -> Option<usize> {
        let c = features.channels();
        let mut best: Option<(usize, f64)> = None;
        for &px in &self.members[sector] {
            let v = features.data()[px * c + channel];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((px, v));
            }
        }
        best.map(|(px, _)| px)
    }

    /// Smallest gap between the largest and second-largest member value over
    /// all sectors and channels; max pooling is differentiable when positive.
    pub fn max_margin(&self, features: &ValueGrid) -> Result<f64> {
        self.check_input(features)?;
        let c = features.channels();
        let mut margin = f64::INFINITY;
        for members in self.members.iter().filter(|m| m.len() > 1) {
            for ch in 0..c {
                let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for &px in members {
                    let v = features.data()[px * c + ch];
                    if v > first {
                        second = first;
                        first = v;
                    } else if v > second {
                        second = v;
                    }
                }
                margin = margin.min(first - second);
            }
        }
        Ok(margin)
    }

    fn check_input(&self, features: &ValueGrid) -> Result<()> {
        if features.rank() != 3 || features.height() != self.height || features.width() != self.width {
            return Err(Error::Shape(format!(
                "features {:?} do not match the {}x{} polar map",
                features.shape(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

impl DifferentiableOp for PolarPool {
    fn name(&self) -> &str {
        match self.mode {
            PoolMode::Average => "polar_pool_average",
            PoolMode::Max => "polar_pool_max",
        }
    }

    fn forward(&self, inputs: &[ValueGrid]) -> Result<ValueGrid> {
        let features = &inputs[0];
        self.check_input(features)?;
        let c = features.channels();
        let mut out = vec![0.0; self.members.len() * c];
        for (sector, members) in self.members.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let dst = &mut out[sector * c..(sector + 1) * c];
            match self.mode {
                PoolMode::Average => {
                    for &px in members {
                        for (d, &v) in dst.iter_mut().zip(&features.data()[px * c..(px + 1) * c]) {
                            *d += v;
                        }
                    }
                    let n = members.len() as f64;
                    dst.iter_mut().for_each(|d| *d /= n);
                }
                PoolMode::Max => {
                    for (ch, d) in dst.iter_mut().enumerate() {
                        let px = self.argmax(features, sector, ch).expect("non-empty sector");
                        *d = features.data()[px * c + ch];
                    }
                }
            }
        }
        ValueGrid::from_vec(&[self.rings, self.angles, c], out)
    }

    fn backward(&self, inputs: &[ValueGrid], grad_output: &ValueGrid) -> Result<Vec<ValueGrid>> {
        let features = &inputs[0];
        self.check_input(features)?;
        let c = features.channels();
        grad_output.expect_shape(&[self.rings, self.angles, c])?;
        let mut grad = vec![0.0; features.len()];
        for (sector, members) in self.members.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let g = &grad_output.data()[sector * c..(sector + 1) * c];
            match self.mode {
                PoolMode::Average => {
                    let n = members.len() as f64;
                    for &px in members {
                        for (d, &gv) in grad[px * c..(px + 1) * c].iter_mut().zip(g) {
                            *d += gv / n;
                        }
                    }
                }
                PoolMode::Max => {
                    for (ch, &gv) in g.iter().enumerate() {
                        let px = self.argmax(features, sector, ch).expect("non-empty sector");
                        grad[px * c + ch] += gv;
                    }
                }
            }
        }
        Ok(vec![ValueGrid::from_vec(features.shape(), grad)?])
    }
}

// ---------------------------------------------------------------------------
// Asymmetry

/// Unordered sector pairs mirrored across fold axis `axis`; the axis runs
/// through the center of sector `axis`, so sector `a` maps to `2 axis - a`.
pub fn mirror_pairs(angles: usize, axis: usize) -> Vec<(usize, usize)> {
    (0..angles)
        .filter_map(|a| {
            let b = (2 * axis + angles - a % angles) % angles;
            (a < b).then_some((a, b))
        })
        .collect()
}

/// Per fold axis and channel, the summed absolute difference between mirrored
/// sectors: `[R, A, C] -> [A/2, C]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Asymmetry;

impl Asymmetry {
    fn dims(polar: &ValueGrid) -> Result<(usize, usize, usize)> {
        let (r, a, c) = (polar.height(), polar.width(), polar.channels());
        if polar.rank() != 3 || a % 2 != 0 {
            return Err(Error::Shape(format!(
                "asymmetry needs [R, A, C] with even A, got {:?}",
                polar.shape()
            )));
        }
        Ok((r, a, c))
    }
}

impl Asymmetry {
    /// Smallest `|x1 - x2|` over all mirrored pairs; the block is
    /// differentiable when positive.
    pub fn margin(polar: &ValueGrid) -> Result<f64> {
        let (rings, angles, c) = Self::dims(polar)?;
        let mut margin = f64::INFINITY;
        for axis in 0..angles / 2 {
            for (a1, a2) in mirror_pairs(angles, axis) {
                for r in 0..rings {
                    for ch in 0..c {
                        margin = margin.min((polar.at3(r, a1, ch) - polar.at3(r, a2, ch)).abs());
                    }
                }
            }
        }
        Ok(margin)
    }
}

impl DifferentiableOp for Asymmetry {
    fn name(&self) -> &str {
        "asymmetry"
    }

    fn forward(&self, inputs: &[ValueGrid]) -> Result<ValueGrid> {
        let polar = &inputs[0];
        let (rings, angles, c) = Self::dims(polar)?;
        let mut out = vec![0.0; angles / 2 * c];
        for axis in 0..angles / 2 {
            for (a1, a2) in mirror_pairs(angles, axis) {
                for r in 0..rings {
                    for ch in 0..c {
                        out[axis * c + ch] += (polar.at3(r, a1, ch) - polar.at3(r, a2, ch)).abs();
                    }
                }
            }
        }
        ValueGrid::from_vec(&[angles / 2, c], out)
    }

    fn backward(&self, inputs: &[ValueGrid], grad_output: &ValueGrid) -> Result<Vec<ValueGrid>> {
        let polar = &inputs[0];
        let (rings, angles, c) = Self::dims(polar)?;
        grad_output.expect_shape(&[angles / 2, c])?;
        let mut grad = ValueGrid::zeros(polar.shape())?;
        for axis in 0..angles / 2 {
            for (a1, a2) in mirror_pairs(angles, axis) {
                for r in 0..rings {
                    for ch in 0..c {
                        let d = polar.at3(r, a1, ch) - polar.at3(r, a2, ch);
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let g = sign * grad_output.data()[axis * c + ch];
                        let i1 = polar.offset3(r, a1, ch);
                        let i2 = polar.offset3(r, a2, ch);
                        grad.data_mut()[i1] += g;
                        grad.data_mut()[i2] -= g;
                    }
                }
            }
        }
        Ok(vec![grad])
    }
}

// ---------------------------------------------------------------------------
// Three-arm head

/// Affine map `y = W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ValueGrid,
    pub bias: ValueGrid,
}

impl Linear {
    pub fn random(inputs: usize, outputs: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let bound = (1.0 / inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self {
            weight: ValueGrid::from_vec(&[outputs, inputs], weight)?,
            bias: ValueGrid::from_vec(&[outputs], bias)?,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: ValueGrid::zeros(&[outputs, inputs])?,
            bias: ValueGrid::zeros(&[outputs])?,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.inputs();
        if x.len() != n {
            return Err(Error::Shape(format!("linear layer expects {n} inputs, got {}", x.len())));
        }
        Ok(self
            .weight
            .data()
            .chunks(n)
            .zip(self.bias.data())
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    /// `W^T g`.
    pub fn transpose_apply(&self, g: &[f64]) -> Vec<f64> {
        let n = self.inputs();
        let mut out = vec![0.0; n];
        for (row, &gv) in self.weight.data().chunks(n).zip(g) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gv;
            }
        }
        out
    }
}

/// Weights of the three arms and the sum block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    /// Weights of the sum block combining the three arms.
    pub arm_weights: [f64; 3],
}

impl HeadParams {
    /// Seeded initialization for `channels` backbone channels.
    pub fn random(channels: usize, spec: &PolarPoolSpec, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mc = channels * MODULATION_FACTOR;
        Ok(Self {
            fc1: Linear::random(mc, CLASS_COUNT, &mut rng)?,
            fc2: Linear::random(spec.rings * spec.angles * mc, CLASS_COUNT, &mut rng)?,
            fc3: Linear::random(spec.angles / 2 * mc, CLASS_COUNT, &mut rng)?,
            arm_weights: [1.0, 1.0, 1.0],
        })
    }

    pub fn zeros(channels: usize, spec: &PolarPoolSpec) -> Result<Self> {
        let mc = channels * MODULATION_FACTOR;
        Ok(Self {
            fc1: Linear::zeros(mc, CLASS_COUNT)?,
            fc2: Linear::zeros(spec.rings * spec.angles * mc, CLASS_COUNT)?,
            fc3: Linear::zeros(spec.angles / 2 * mc, CLASS_COUNT)?,
            arm_weights: [0.0; 3],
        })
    }

    /// Backbone channel count these weights expect.
    pub fn channels(&self) -> usize {
        self.fc1.inputs() / MODULATION_FACTOR
    }

    /// Named tensors in file order.
    pub fn to_named(&self) -> Result<Vec<(String, ValueGrid)>> {
        Ok(vec![
            ("fc1.weight".into(), self.fc1.weight.clone()),
            ("fc1.bias".into(), self.fc1.bias.clone()),
            ("fc2.weight".into(), self.fc2.weight.clone()),
            ("fc2.bias".into(), self.fc2.bias.clone()),
            ("fc3.weight".into(), self.fc3.weight.clone()),
            ("fc3.bias".into(), self.fc3.bias.clone()),
            ("sum.weight".into(), ValueGrid::from_vec(&[3], self.arm_weights.to_vec())?),
        ])
    }

    pub fn from_named(tensors: &[(String, ValueGrid)], spec: &PolarPoolSpec) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("head parameters lack tensor '{name}'")))
        };
        let linear = |prefix: &str| -> Result<Linear> {
            let weight = get(&format!("{prefix}.weight"))?;
            let bias = get(&format!("{prefix}.bias"))?;
            if weight.rank() != 2 || weight.dim(0) != CLASS_COUNT || bias.shape() != [CLASS_COUNT] {
                return Err(Error::Format(format!("{prefix} has shapes {:?} / {:?}", weight.shape(), bias.shape())));
            }
            Ok(Linear { weight, bias })
        };
        let sum = get("sum.weight")?;
        sum.expect_shape(&[3])?;
        let params = Self {
            fc1: linear("fc1")?,
            fc2: linear("fc2")?,
            fc3: linear("fc3")?,
            arm_weights: [sum.data()[0], sum.data()[1], sum.data()[2]],
        };
        let mc = params.fc1.inputs();
        if !mc.is_multiple_of(MODULATION_FACTOR)
            || params.fc2.inputs() != spec.rings * spec.angles * mc
            || params.fc3.inputs() != spec.angles / 2 * mc
        {
            return Err(Error::Format("head parameter widths disagree with the pooling spec".into()));
        }
        Ok(params)
    }
}

/// Three-arm head: global average pool, polar pool and asymmetry over the
/// modulated features, each followed by its own affine map, then summed.
/// Inputs are `[features (h, w, C), structures (H, W, K)]`; output is 3 scores.
#[derive(Debug, Clone)]
pub struct DiagnosisHead {
    pub params: HeadParams,
    pool: PolarPool,
}

impl DiagnosisHead {
    /// `npc` must already be at feature resolution.
    pub fn new(params: HeadParams, npc: &NormalizedPolarMap, spec: &PolarPoolSpec) -> Result<Self> {
        if !spec.angles.is_multiple_of(2) {
            return Err(Error::Shape("asymmetry arm needs an even number of angles".into()));
        }
        Ok(Self {
            params,
            pool: PolarPool::new(npc, spec)?,
        })
    }

    /// Asymmetry margin of the pooled modulated features for these inputs.
    pub fn asymmetry_margin(&self, inputs: &[ValueGrid]) -> Result<f64> {
        let modulated = Modulation.forward(inputs)?;
        let polar = self.pool.forward(std::slice::from_ref(&modulated))?;
        let (rings, angles, c) = Asymmetry::dims(&polar)?;
        let mut margin = f64::INFINITY;
        for axis in 0..angles / 2 {
            for (a1, a2) in mirror_pairs(angles, axis) {
                for r in 0..rings {
                    // Two empty sectors stay at zero under any perturbation.
                    if self.pool.members(r, a1).is_empty() && self.pool.members(r, a2).is_empty() {
                        continue;
                    }
                    for ch in 0..c {
                        margin = margin.min((polar.at3(r, a1, ch) - polar.at3(r, a2, ch)).abs());
                    }
                }
            }
        }
        Ok(margin)
    }

    fn arms(&self, modulated: &ValueGrid) -> Result<(Vec<f64>, ValueGrid, ValueGrid)> {
        let (h, w, mc) = (modulated.height(), modulated.width(), modulated.channels());
        let mut gap = vec![0.0; mc];
        for px in modulated.data().chunks(mc) {
            for (g, v) in gap.iter_mut().zip(px) {
                *g += v;
            }
        }
        let n = (h * w) as f64;
        gap.iter_mut().for_each(|g| *g /= n);
        let polar = self.pool.forward(std::slice::from_ref(modulated))?;
        let asym = Asymmetry.forward(std::slice::from_ref(&polar))?;
        Ok((gap, polar, asym))
    }
}

impl DifferentiableOp for DiagnosisHead {
    fn name(&self) -> &str {
        "head_forward"
    }

    fn forward(&self, inputs: &[ValueGrid]) -> Result<ValueGrid> {
        let modulated = Modulation.forward(inputs)?;
        let (gap, polar, asym) = self.arms(&modulated)?;
        let y1 = self.params.fc1.apply(&gap)?;
        let y2 = self.params.fc2.apply(polar.data())?;
        let y3 = self.params.fc3.apply(asym.data())?;
        let [w1, w2, w3] = self.params.arm_weights;
        let out = (0..CLASS_COUNT).map(|k| w1 * y1[k] + w2 * y2[k] + w3 * y3[k]).collect();
        ValueGrid::from_vec(&[CLASS_COUNT], out)
    }

    fn backward(&self, inputs: &[ValueGrid], grad_output: &ValueGrid) -> Result<Vec<ValueGrid>> {
        grad_output.expect_shape(&[CLASS_COUNT])?;
        let modulated = Modulation.forward(inputs)?;
        let (_, polar, _) = self.arms(&modulated)?;
        let [w1, w2, w3] = self.params.arm_weights;
        let g = grad_output.data();
        let scaled = |w: f64| g.iter().map(|v| v * w).collect::<Vec<_>>();

        let g_asym = ValueGrid::from_vec(&[polar.width() / 2, polar.channels()], self.params.fc3.transpose_apply(&scaled(w3)))?;
        let g_polar = ValueGrid::from_vec(polar.shape(), self.params.fc2.transpose_apply(&scaled(w2)))?
            .add(&Asymmetry.backward(std::slice::from_ref(&polar), &g_asym)?[0])?;
        let mut g_mod = self.pool.backward(std::slice::from_ref(&modulated), &g_polar)?.remove(0);

        let g_gap = self.params.fc1.transpose_apply(&scaled(w1));
        let mc = modulated.channels();
        let n = (modulated.height() * modulated.width()) as f64;
        for px in g_mod.data_mut().chunks_mut(mc) {
            for (d, gv) in px.iter_mut().zip(&g_gap) {
                *d += gv / n;
            }
        }
        Modulation.backward(inputs, &g_mod)
    }
}

// ---------------------------------------------------------------------------
// Probabilities and fusion

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisOutput {
    pub per_view: Vec<[f64; CLASS_COUNT]>,
    pub fused: [f64; CLASS_COUNT],
}

impl DiagnosisOutput {
    pub fn from_views(per_view: Vec<[f64; CLASS_COUNT]>) -> Result<Self> {
        let fused = fuse_views(&per_view)?;
        Ok(Self { per_view, fused })
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.fused)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Normalized elementwise product of per-view class distributions, computed
/// in the log domain.
pub fn fuse_views(per_view: &[[f64; CLASS_COUNT]]) -> Result<[f64; CLASS_COUNT]> {
    if per_view.is_empty() {
        return Err(Error::InvalidArgument("fusion needs at least one view".into()));
    }
    let mut logs = [0.0f64; CLASS_COUNT];
    for (v, row) in per_view.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("view {v} is not a distribution: {row:?}")));
        }
        for (l, &p) in logs.iter_mut().zip(row) {
            *l += p.ln();
        }
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateFusion);
    }
    let mut fused = [0.0; CLASS_COUNT];
    for (f, l) in fused.iter_mut().zip(&logs) {
        *f = (l - max).exp();
    }
    let total: f64 = fused.iter().sum();
    fused.iter_mut().for_each(|f| *f /= total);
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalizing_affine, polar_map, MomentEllipse};
    use crate::tensor::finite_diff_check;

    fn circle_npc(side: usize, radius: f64) -> NormalizedPolarMap {
        let c = (side - 1) as f64 / 2.0;
        let e = MomentEllipse {
            center: [c, c],
            semi_axes: [radius, radius],
            orientation: 0.0,
        };
        polar_map(side, side, normalizing_affine(&e)).unwrap()
    }

    #[test]
    fn modulation_multiplies_channels_by_nine() {
        let f = ValueGrid::new(&[8, 8, 2048], 1.0).unwrap();
        let s = ValueGrid::new(&[64, 64, 8], 0.125).unwrap();
        let out = Modulation.forward(&[f, s]).unwrap();
        assert_eq!(out.shape(), &[8, 8, 18432]);
        assert_eq!(MODULATION_FACTOR, 9);
    }

    #[test]
    fn uniform_maps_scale_features_by_an_eighth() {
        let f = ValueGrid::random_uniform(&[8, 8, 3], -1.0, 1.0, 1).unwrap();
        let s = ValueGrid::new(&[64, 64, 8], 0.125).unwrap();
        let out = Modulation.forward(&[f.clone(), s]).unwrap();
        for px in 0..64 {
            for block in 0..9 {
                for c in 0..3 {
                    let expected = if block == 0 { f.data()[px * 3 + c] } else { f.data()[px * 3 + c] / 8.0 };
                    assert!((out.data()[px * 27 + block * 3 + c] - expected).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_structure_zeroes_its_block() {
        let f = ValueGrid::random_uniform(&[8, 8, 4], -1.0, 1.0, 2).unwrap();
        let mut s = ValueGrid::random_uniform(&[64, 64, 8], 0.0, 1.0, 3).unwrap();
        for px in s.data_mut().chunks_mut(8) {
            px[4] = 0.0;
        }
        let out = Modulation.forward(&[f, s]).unwrap();
        for px in out.data().chunks(36) {
            assert!(px[20..24].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn modulation_rejects_non_multiple_extent() {
        let f = ValueGrid::new(&[8, 8, 2], 1.0).unwrap();
        let s = ValueGrid::new(&[60, 60, 8], 0.125).unwrap();
        assert!(matches!(Modulation.forward(&[f, s]), Err(Error::Shape(_))));
    }

    #[test]
    fn single_sector_pool_is_masked_mean() {
        let npc = circle_npc(16, 6.0);
        let f = ValueGrid::random_uniform(&[16, 16, 3], -1.0, 1.0, 4).unwrap();
        let pool = PolarPool::new(&npc, &PolarPoolSpec::new(1, 1, PoolMode::Average, 0.0)).unwrap();
        let out = pool.forward(std::slice::from_ref(&f)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3]);
        for c in 0..3 {
            let (mut sum, mut n, mut max) = (0.0, 0.0, f64::NEG_INFINITY);
            for px in 0..256 {
                if npc.rho.data()[px] <= 1.0 {
                    sum += f.data()[px * 3 + c];
                    n += 1.0;
                    max = f64::max(max, f.data()[px * 3 + c]);
                }
            }
            assert!((out.data()[c] - sum / n).abs() < 1e-12);
            let pool = PolarPool::new(&npc, &PolarPoolSpec::new(1, 1, PoolMode::Max, 0.0)).unwrap();
            assert_eq!(pool.forward(std::slice::from_ref(&f)).unwrap().data()[c], max);
        }
    }

    #[test]
    fn head_pool_shape_and_equal_area_radii() {
        let npc = circle_npc(8, 3.5);
        let f = ValueGrid::new(&[8, 8, 5], 1.0).unwrap();
        let out = PolarPool::new(&npc, &PolarPoolSpec::default()).unwrap().forward(&[f]).unwrap();
        assert_eq!(out.shape(), &[3, 6, 5]);
        let b = equal_area_boundaries(3);
        assert!((b[0] - 0.5773502691896257).abs() < 1e-12);
        assert!((b[1] - 0.816496580927726).abs() < 1e-12);
        assert_eq!(b[2], 1.0);
    }

    #[test]
    fn empty_sectors_pool_to_zero() {
        // Tiny grid: many of the 3x6 sectors have no pixel.
        let npc = circle_npc(3, 1.0);
        let f = ValueGrid::new(&[3, 3, 1], 2.0).unwrap();
        let pool = PolarPool::new(&npc, &PolarPoolSpec::default()).unwrap();
        let empty = pool.empty_sectors();
        assert!(!empty.is_empty());
        let out = pool.forward(std::slice::from_ref(&f)).unwrap();
        for (r, a) in empty {
            assert_eq!(out.at3(r, a, 0), 0.0);
        }
        let g = pool.backward(&[f], &ValueGrid::new(&[3, 6, 1], 1.0).unwrap()).unwrap();
        assert!(g[0].all_finite());
    }

    #[test]
    fn overlap_widens_sectors() {
        let npc = circle_npc(32, 14.0);
        let tight = PolarPool::new(&npc, &PolarPoolSpec::new(3, 6, PoolMode::Average, 0.0)).unwrap();
        let loose = PolarPool::new(&npc, &PolarPoolSpec::new(3, 6, PoolMode::Average, 0.25)).unwrap();
        for r in 0..3 {
            for a in 0..6 {
                let t = tight.members(r, a);
                let l = loose.members(r, a);
                assert!(t.iter().all(|px| l.contains(px)));
                assert!(l.len() > t.len());
            }
        }
        // Wrap-around: sector 0 picks up pixels just below 2 pi.
        let near_wrap = (0..npc.rho.len())
            .find(|&px| npc.rho.data()[px] < 1.0 && npc.theta.data()[px] > TAU - 0.1)
            .unwrap();
        assert!(loose.members(2, 0).contains(&near_wrap) || loose.members(1, 0).contains(&near_wrap) || loose.members(0, 0).contains(&near_wrap));
    }

    #[test]
    fn invalid_pool_specs() {
        let npc = circle_npc(8, 3.0);
        assert!(PolarPool::new(&npc, &PolarPoolSpec::new(0, 6, PoolMode::Average, 0.0)).is_err());
        assert!(PolarPool::new(&npc, &PolarPoolSpec::new(3, 6, PoolMode::Average, 0.5)).is_err());
        let mut spec = PolarPoolSpec::default();
        spec.ring_boundaries = vec![0.5, 0.4, 1.0];
        assert!(PolarPool::new(&npc, &spec).is_err());
    }

    #[test]
    fn asymmetry_small_example() {
        let polar = ValueGrid::from_vec(&[1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = Asymmetry.forward(&[polar]).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[2.0, 2.0]);
    }

    #[test]
    fn asymmetry_of_symmetric_data() {
        let constant = ValueGrid::new(&[3, 6, 2], 0.7).unwrap();
        assert!(Asymmetry.forward(&[constant]).unwrap().data().iter().all(|&v| v == 0.0));

        // Mirror-symmetric about axis 0: value depends on min(a, 6 - a).
        let data = (0..3 * 6).map(|i| {
            let (r, a) = (i / 6, i % 6);
            (r * 10 + a.min((6 - a) % 6)) as f64
        });
        let polar = ValueGrid::from_vec(&[3, 6, 1], data.collect()).unwrap();
        let out = Asymmetry.forward(&[polar]).unwrap();
        assert_eq!(out.data()[0], 0.0);
        assert!(out.data().iter().all(|&v| v >= 0.0));
        assert!(out.data()[1] > 0.0);
    }

    #[test]
    fn asymmetry_rejects_odd_angles() {
        let polar = ValueGrid::new(&[1, 5, 1], 0.0).unwrap();
        assert!(matches!(Asymmetry.forward(&[polar]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let npc = circle_npc(8, 3.5);
        let spec = PolarPoolSpec::default();
        let head = DiagnosisHead::new(HeadParams::zeros(4, &spec).unwrap(), &npc, &spec).unwrap();
        let f = ValueGrid::random_uniform(&[8, 8, 4], -1.0, 1.0, 1).unwrap();
        let s = ValueGrid::random_uniform(&[64, 64, 8], 0.0, 1.0, 2).unwrap();
        assert_eq!(head.forward(&[f, s]).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn head_gradient_through_all_arms() {
        let npc = circle_npc(8, 3.5);
        let spec = PolarPoolSpec::default();
        let head = DiagnosisHead::new(HeadParams::random(3, &spec, 7).unwrap(), &npc, &spec).unwrap();
        let f = ValueGrid::random_uniform(&[8, 8, 3], -1.0, 1.0, 8).unwrap();
        let s = ValueGrid::random_uniform(&[16, 16, 8], 0.0, 1.0, 9).unwrap();
        let probe = ValueGrid::random_uniform(&[3], -1.0, 1.0, 10).unwrap();
        let inputs = [f, s];
        assert!(head.asymmetry_margin(&inputs).unwrap() > 2e-4);
        let err = finite_diff_check(&head, &inputs, &probe, 1e-4).unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn first_arm_alone_is_average_pool_head() {
        let npc = circle_npc(8, 3.5);
        let spec = PolarPoolSpec::default();
        let mut params = HeadParams::random(2, &spec, 5).unwrap();
        params.arm_weights = [1.0, 0.0, 0.0];
        let head = DiagnosisHead::new(params.clone(), &npc, &spec).unwrap();
        let f = ValueGrid::random_uniform(&[8, 8, 2], -1.0, 1.0, 6).unwrap();
        let s = ValueGrid::random_uniform(&[64, 64, 8], 0.0, 1.0, 7).unwrap();
        let scores = head.forward(&[f.clone(), s.clone()]).unwrap();
        let m = Modulation.forward(&[f, s]).unwrap();
        let mut gap = vec![0.0; 18];
        for px in m.data().chunks(18) {
            for (g, v) in gap.iter_mut().zip(px) {
                *g += v / 64.0;
            }
        }
        let direct = params.fc1.apply(&gap).unwrap();
        for k in 0..3 {
            assert!((scores.data()[k] - direct[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_examples() {
        let v = [0.6, 0.3, 0.1];
        let single = fuse_views(&[v]).unwrap();
        for k in 0..3 {
            assert!((single[k] - v[k]).abs() < 1e-15);
        }
        let fused = fuse_views(&[v, v]).unwrap();
        let expected = [0.36 / 0.46, 0.09 / 0.46, 0.01 / 0.46];
        for k in 0..3 {
            assert!((fused[k] - expected[k]).abs() < 1e-12);
        }
        assert!((fused[0] - 0.78261).abs() < 5e-6);
        assert!((fused[1] - 0.19565).abs() < 5e-6);
        assert!((fused[2] - 0.02174).abs() < 5e-6);

        let a = [0.2, 0.5, 0.3];
        let b = [0.7, 0.1, 0.2];
        assert_eq!(fuse_views(&[a, b, v]).unwrap(), fuse_views(&[a, b, v]).unwrap());
        let p1 = fuse_views(&[a, b, v]).unwrap();
        let p2 = fuse_views(&[v, a, b]).unwrap();
        for k in 0..3 {
            assert!((p1[k] - p2[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_degenerate_and_invalid_inputs() {
        assert!(matches!(
            fuse_views(&[[1.0, 0.0, 0.0], [0.0, 0.5, 0.5]]),
            Err(Error::DegenerateFusion)
        ));
        assert_eq!(fuse_views(&[[1.0, 0.0, 0.0], [0.5, 0.0, 0.5]]).unwrap(), [1.0, 0.0, 0.0]);
        assert!(fuse_views(&[]).is_err());
        assert!(fuse_views(&[[0.5, 0.5, 0.5]]).is_err());
    }

    #[test]
    fn head_params_round_trip_by_name() {
        let spec = PolarPoolSpec::default();
        let p = HeadParams::random(2, &spec, 3).unwrap();
        let back = HeadParams::from_named(&p.to_named().unwrap(), &spec).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.channels(), 2);
        let mut named = p.to_named().unwrap();
        named.pop();
        assert!(HeadParams::from_named(&named, &spec).is_err());
    }
}
