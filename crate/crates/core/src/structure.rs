//! Structure probability maps and weak-label constraints.
//!
//! Scores and maps are `[h, w, K]` grids (64 x 64 x 8 at full scale). Weak
//! labels bound the accumulated probability `P_s = sum_i p_i(s)` of each
//! structure over a region; [`project_onto_constraints`] finds the closest
//! (in KL) per-location distribution that honors those bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NormalizedPolarMap;
use crate::tensor::{DifferentiableOp, ValueGrid};

pub const STRUCTURE_COUNT: usize = 8;
pub const STRUCTURE_SIDE: usize = 64;
pub const DEFAULT_GAMMA: f64 = 20.0;
/// Zero-based index of the streaks structure.
pub const STREAKS: usize = 5;

pub const STRUCTURE_NAMES: [&str; STRUCTURE_COUNT] = [
    "dots_globules_cobblestone",
    "reticular_pigmented_network",
    "homogeneous_areas",
    "regression_areas",
    "blue_white_veil",
    "streaks",
    "vascular_structures",
    "unspecific_pattern",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum WeakLevel {
    Absent = 0,
    Local = 1,
    Global = 2,
}

impl TryFrom<u8> for WeakLevel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(WeakLevel::Absent),
            1 => Ok(WeakLevel::Local),
            2 => Ok(WeakLevel::Global),
            other => Err(format!("weak label level must be 0, 1 or 2, got {other}")),
        }
    }
}

impl From<WeakLevel> for u8 {
    fn from(level: WeakLevel) -> u8 {
        level as u8
    }
}

/// One level per structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureWeakLabel(pub [WeakLevel; STRUCTURE_COUNT]);

impl StructureWeakLabel {
    pub fn from_levels(levels: &[u8]) -> Result<Self> {
        if levels.len() != STRUCTURE_COUNT {
            return Err(Error::InvalidArgument(format!(
                "expected {STRUCTURE_COUNT} weak labels, got {}",
                levels.len()
            )));
        }
        let mut out = [WeakLevel::Absent; STRUCTURE_COUNT];
        for (slot, &v) in out.iter_mut().zip(levels) {
            *slot = WeakLevel::try_from(v).map_err(Error::InvalidArgument)?;
        }
        Ok(Self(out))
    }

    pub fn all(level: WeakLevel) -> Self {
        Self([level; STRUCTURE_COUNT])
    }
}

// ---------------------------------------------------------------------------
// Parametric softmax

/// `p_i(s) = exp(gamma f_i(s)) / sum_s' exp(gamma f_i(s'))` along the last axis.
pub fn parametric_softmax(scores: &ValueGrid, gamma: f64) -> Result<ValueGrid> {
    check_gamma(gamma)?;
    let k = scores.shape()[scores.rank() - 1];
    let mut out = scores.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(gamma * v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (gamma * *v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// `log p_i(s)` computed without forming `p`.
pub fn log_parametric_softmax(scores: &ValueGrid, gamma: f64) -> Result<ValueGrid> {
    check_gamma(gamma)?;
    let k = scores.shape()[scores.rank() - 1];
    let mut out = scores.clone();
    for row in out.data_mut().chunks_mut(k) {
        for v in row.iter_mut() {
            *v *= gamma;
        }
        let lse = log_sum_exp(row.iter().copied());
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy)]
pub struct ParametricSoftmax {
    pub gamma: f64,
}

impl DifferentiableOp for ParametricSoftmax {
    fn name(&self) -> &str {
        "parametric_softmax"
    }

    fn forward(&self, inputs: &[ValueGrid]) -> Result<ValueGrid> {
        parametric_softmax(&inputs[0], self.gamma)
    }

    fn backward(&self, inputs: &[ValueGrid], grad_output: &ValueGrid) -> Result<Vec<ValueGrid>> {
        let p = parametric_softmax(&inputs[0], self.gamma)?;
        grad_output.expect_shape(p.shape())?;
        let k = p.shape()[p.rank() - 1];
        let mut grad = p.clone();
        for (gp, go) in grad.data_mut().chunks_mut(k).zip(grad_output.data().chunks(k)) {
            let mean: f64 = gp.iter().zip(go).map(|(p, g)| p * g).sum();
            for (v, g) in gp.iter_mut().zip(go) {
                *v = self.gamma * *v * (g - mean);
            }
        }
        Ok(vec![grad])
    }
}

// ---------------------------------------------------------------------------
// Accumulated probability and regions

/// `P_s` summed over the pixels where `region` is 1.
pub fn accumulated_probability(maps: &ValueGrid, region: &ValueGrid) -> Result<Vec<f64>> {
    let (h, w, k) = (maps.height(), maps.width(), maps.channels());
    region.expect_shape(&[h, w])?;
    let mut totals = vec![0.0; k];
    for (pixel, &inside) in maps.data().chunks(k).zip(region.data()) {
        if inside != 0.0 {
            for (t, p) in totals.iter_mut().zip(pixel) {
                *t += p;
            }
        }
    }
    Ok(totals)
}

/// Normalized-polar interval selecting where a structure is expected.
/// A missing `rho_max` is unbounded; a `theta` interval with `lo > hi`
/// wraps through 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub rho_min: f64,
    #[serde(default)]
    pub rho_max: Option<f64>,
    #[serde(default)]
    pub theta: Option<[f64; 2]>,
}

impl RegionSpec {
    pub const LESION: RegionSpec = RegionSpec {
        rho_min: 0.0,
        rho_max: Some(1.0),
        theta: None,
    };
    pub const FULL: RegionSpec = RegionSpec {
        rho_min: 0.0,
        rho_max: None,
        theta: None,
    };
    pub const BORDER: RegionSpec = RegionSpec {
        rho_min: 0.7,
        rho_max: Some(1.0),
        theta: None,
    };

    pub fn contains(&self, rho: f64, theta: f64) -> bool {
        if rho < self.rho_min || self.rho_max.is_some_and(|hi| rho > hi) {
            return false;
        }
        match self.theta {
            None => true,
            Some([lo, hi]) if lo <= hi => (lo..=hi).contains(&theta),
            Some([lo, hi]) => theta >= lo || theta <= hi,
        }
    }
}

/// Binary `[h, w]` grid of pixels whose polar coordinates fall in `spec`.
pub fn spatial_region(npc: &NormalizedPolarMap, spec: &RegionSpec) -> Result<ValueGrid> {
    let data = npc
        .rho
        .data()
        .iter()
        .zip(npc.theta.data())
        .map(|(&r, &t)| if spec.contains(r, t) { 1.0 } else { 0.0 })
        .collect();
    ValueGrid::from_vec(npc.rho.shape(), data)
}

// ---------------------------------------------------------------------------
// Constraints

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    /// Upper bound fraction for absent structures (over the whole grid).
    pub eps_absent: f64,
    /// Lower bound fraction for local structures (over their region).
    pub alpha_lo: f64,
    /// Upper bound fraction for local structures (over their region).
    pub alpha_hi: f64,
    /// Lower bound fraction for global structures (over the whole grid).
    pub beta_lo: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            eps_absent: 0.01,
            alpha_lo: 0.02,
            alpha_hi: 0.30,
            beta_lo: 0.30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureConfig {
    pub bounds: BoundConfig,
    /// Region in which each structure's local constraints are accumulated.
    pub regions: Vec<RegionSpec>,
}

impl Default for StructureConfig {
    fn default() -> Self {
        let mut regions = vec![RegionSpec::LESION; STRUCTURE_COUNT];
        regions[STREAKS] = RegionSpec::BORDER;
        Self {
            bounds: BoundConfig::default(),
            regions,
        }
    }
}

impl StructureConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        let fractions = [b.eps_absent, b.alpha_lo, b.alpha_hi, b.beta_lo];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidArgument(format!(
                "bound fractions must lie in [0, 1]: {fractions:?}"
            )));
        }
        if b.alpha_lo > b.alpha_hi {
            return Err(Error::InvalidArgument("alpha_lo exceeds alpha_hi".into()));
        }
        if self.regions.len() != STRUCTURE_COUNT {
            return Err(Error::InvalidArgument(format!(
                "expected {STRUCTURE_COUNT} structure regions, got {}",
                self.regions.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub structure: usize,
    pub kind: BoundKind,
    pub bound: f64,
    /// Binary `[h, w]` grid over which `P_s` is accumulated.
    pub region: ValueGrid,
}

impl Constraint {
    pub fn region_size(&self) -> usize {
        self.region.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Positive part of the bound violation for accumulated mass `p`.
    pub fn violation(&self, p: f64) -> f64 {
        match self.kind {
            BoundKind::Upper => (p - self.bound).max(0.0),
            BoundKind::Lower => (self.bound - p).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn push(&mut self, structure: usize, kind: BoundKind, bound: f64, region: ValueGrid) {
        self.constraints.push(Constraint {
            structure,
            kind,
            bound,
            region,
        });
    }

    /// Shape and feasibility checks that do not need the maps' values.
    pub fn check_feasible(&self, height: usize, width: usize, classes: usize) -> Result<()> {
        let infeasible = |msg: String| Err(Error::InfeasibleConstraints(msg));
        for (idx, c) in self.constraints.iter().enumerate() {
            c.region.expect_shape(&[height, width])?;
            if c.structure >= classes {
                return Err(Error::InvalidArgument(format!(
                    "constraint {idx} names structure {} of {classes}",
                    c.structure
                )));
            }
            if !(c.bound >= 0.0 && c.bound.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "constraint {idx} has bound {}",
                    c.bound
                )));
            }
            if c.region.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("constraint {idx} region is not binary")));
            }
            if c.kind == BoundKind::Lower && c.bound > c.region_size() as f64 {
                return infeasible(format!(
                    "constraint {idx}: lower bound {} exceeds region size {}",
                    c.bound,
                    c.region_size()
                ));
            }
        }

        // A lower bound on a region may not exceed an upper bound on a superset.
        for lo in self.constraints.iter().filter(|c| c.kind == BoundKind::Lower) {
            for up in self.constraints.iter().filter(|c| c.kind == BoundKind::Upper) {
                if lo.structure == up.structure && is_subset(&lo.region, &up.region) && lo.bound > up.bound {
                    return infeasible(format!(
                        "structure {}: lower bound {} exceeds upper bound {}",
                        lo.structure, lo.bound, up.bound
                    ));
                }
            }
        }

        // Lower bounds of distinct structures share each pixel's unit mass.
        for c in &self.constraints {
            let mut needed = vec![0.0f64; classes];
            for other in self.constraints.iter().filter(|o| o.kind == BoundKind::Lower) {
                if is_subset(&other.region, &c.region) {
                    needed[other.structure] = needed[other.structure].max(other.bound);
                }
            }
            let total: f64 = needed.iter().sum();
            if total > c.region_size() as f64 + 1e-9 {
                return infeasible(format!(
                    "lower bounds sum to {total} on a region of {} pixels",
                    c.region_size()
                ));
            }
        }

        // Upper bounds covering every structure must leave room for the mass.
        for c in self.constraints.iter().filter(|c| c.kind == BoundKind::Upper) {
            let mut cap: Vec<Option<f64>> = vec![None; classes];
            for other in self.constraints.iter().filter(|o| o.kind == BoundKind::Upper) {
                if is_subset(&c.region, &other.region) {
                    let slot = &mut cap[other.structure];
                    *slot = Some(slot.map_or(other.bound, |b: f64| b.min(other.bound)));
                }
            }
            if cap.iter().all(Option::is_some) {
                let total: f64 = cap.iter().map(|b| b.unwrap()).sum();
                if total < c.region_size() as f64 - 1e-9 {
                    return infeasible(format!(
                        "upper bounds on every structure sum to {total} on a region of {} pixels",
                        c.region_size()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-constraint positive violation on `maps`.
    pub fn residuals(&self, maps: &ValueGrid) -> Result<Vec<f64>> {
        self.constraints
            .iter()
            .map(|c| {
                let p = accumulated_probability(maps, &c.region)?[c.structure];
                Ok(c.violation(p))
            })
            .collect()
    }
}

fn is_subset(a: &ValueGrid, b: &ValueGrid) -> bool {
    a.data().iter().zip(b.data()).all(|(&x, &y)| x == 0.0 || y != 0.0)
}

/// Builds bounds from weak labels: absent caps the whole grid, local bounds
/// the structure's region from both sides, global floors the whole grid.
pub fn constraints_from_labels(
    labels: &StructureWeakLabel,
    npc: &NormalizedPolarMap,
    config: &StructureConfig,
) -> Result<ConstraintSet> {
    config.validate()?;
    let full = ValueGrid::new(npc.rho.shape(), 1.0)?;
    let n_full = full.len() as f64;
    let b = &config.bounds;
    let mut set = ConstraintSet::default();
    for (s, level) in labels.0.iter().enumerate() {
        match level {
            WeakLevel::Absent => set.push(s, BoundKind::Upper, b.eps_absent * n_full, full.clone()),
            WeakLevel::Local => {
                let region = spatial_region(npc, &config.regions[s])?;
                let n = region.sum();
                set.push(s, BoundKind::Lower, b.alpha_lo * n, region.clone());
                set.push(s, BoundKind::Upper, b.alpha_hi * n, region);
            }
            WeakLevel::Global => set.push(s, BoundKind::Lower, b.beta_lo * n_full, full.clone()),
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// KL projection

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionOptions {
    pub max_sweeps: usize,
    /// Accepted residual as a fraction of each constraint's region size.
    pub tolerance: f64,
    /// Residual fraction at which the sweeps stop early.
    pub target_tolerance: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 2000,
            tolerance: 1e-3,
            target_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub maps: ValueGrid,
    pub multipliers: Vec<f64>,
    pub residuals: Vec<f64>,
    pub sweeps: usize,
}

/// KL projection of `maps` onto the constraint set with default options.
pub fn project_onto_constraints(maps: &ValueGrid, constraints: &ConstraintSet) -> Result<ValueGrid> {
    Ok(project_with_report(maps, constraints, &ProjectionOptions::default())?.maps)
}

/// Minimizes `sum_i KL(q_i || p_i)` subject to the constraints by cyclic
/// exact maximization of the dual over one multiplier at a time.
///
/// The optimum has the form `q_i(s) ~ p_i(s) exp(sum_c sign_c lambda_c [s = s_c, i in R_c])`
/// with `lambda >= 0` (sign +1 for lower bounds, -1 for upper bounds).
pub fn project_with_report(
    maps: &ValueGrid,
    constraints: &ConstraintSet,
    options: &ProjectionOptions,
) -> Result<Projection> {
    if maps.rank() != 3 {
        return Err(Error::Shape(format!("maps must be [h, w, K], got {:?}", maps.shape())));
    }
    let (h, w, k) = (maps.height(), maps.width(), maps.channels());
    constraints.check_feasible(h, w, k)?;

    let sizes: Vec<f64> = constraints.constraints.iter().map(|c| c.region_size() as f64).collect();
    let members: Vec<Vec<usize>> = constraints
        .constraints
        .iter()
        .map(|c| {
            c.region
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut logq: Vec<f64> = maps.data().iter().map(|p| p.ln()).collect();
    let mut lambda = vec![0.0; constraints.len()];
    let mut logits = Vec::new();
    let mut sweeps = 0;

    let mass = |logq: &[f64], c: &Constraint, idx: &[usize]| -> f64 {
        idx.iter()
            .map(|&i| {
                let row = &logq[i * k..(i + 1) * k];
                (row[c.structure] - log_sum_exp(row.iter().copied())).exp()
            })
            .sum()
    };

    while sweeps < options.max_sweeps {
        // KKT check: feasibility plus tight active bounds.
        let mut worst = 0.0f64;
        for (ci, c) in constraints.constraints.iter().enumerate() {
            if sizes[ci] == 0.0 {
                continue;
            }
            let p = mass(&logq, c, &members[ci]);
            let gap = if lambda[ci] > 0.0 { (p - c.bound).abs() } else { c.violation(p) };
            worst = worst.max(gap / sizes[ci]);
        }
        if worst <= options.target_tolerance {
            break;
        }
        sweeps += 1;

        for (ci, c) in constraints.constraints.iter().enumerate() {
            let idx = &members[ci];
            if idx.is_empty() {
                continue;
            }
            let s = c.structure;
            logits.clear();
            logits.extend(idx.iter().map(|&i| {
                let row = &logq[i * k..(i + 1) * k];
                let rest = log_sum_exp(row.iter().enumerate().filter(|&(j, _)| j != s).map(|(_, &v)| v));
                row[s] - rest
            }));
            let sign = match c.kind {
                BoundKind::Lower => 1.0,
                BoundKind::Upper => -1.0,
            };
            let p0: f64 = logits.iter().map(|&l| sigmoid(l)).sum();
            if lambda[ci] == 0.0 && c.violation(p0) == 0.0 {
                continue;
            }
            // The multiplier stays non-negative: lambda + sign * tau >= 0.
            let (lo, hi) = match c.kind {
                BoundKind::Lower => (-lambda[ci], TAU_LIMIT),
                BoundKind::Upper => (-TAU_LIMIT, lambda[ci]),
            };
            let tau = solve_shift(&logits, c.bound, lo.max(-TAU_LIMIT), hi.min(TAU_LIMIT));
            if tau == 0.0 {
                continue;
            }
            lambda[ci] = (lambda[ci] + sign * tau).max(0.0);
            for &i in idx {
                logq[i * k + s] += tau;
            }
        }
    }

    let mut q = maps.clone();
    if lambda.iter().any(|&l| l > 0.0) {
        for (row, lrow) in q.data_mut().chunks_mut(k).zip(logq.chunks(k)) {
            let lse = log_sum_exp(lrow.iter().copied());
            for (v, l) in row.iter_mut().zip(lrow) {
                *v = (l - lse).exp();
            }
        }
    }
    let residuals = constraints.residuals(&q)?;
    let max_rel = residuals
        .iter()
        .zip(&sizes)
        .map(|(r, n)| if *n > 0.0 { r / n } else { *r })
        .fold(0.0, f64::max);
    if max_rel > options.tolerance {
        return Err(Error::NotConverged {
            iterations: sweeps,
            max_residual: max_rel,
            residuals,
        });
    }
    Ok(Projection {
        maps: q,
        multipliers: lambda,
        residuals,
        sweeps,
    })
}

const TAU_LIMIT: f64 = 60.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-odds shift `tau` in `[lo, hi]` with `sum_i sigmoid(logit_i + tau)`
/// as close to `target` as the interval allows.
fn solve_shift(logits: &[f64], target: f64, lo: f64, hi: f64) -> f64 {
    let mass = |t: f64| logits.iter().map(|&l| sigmoid(l + t)).sum::<f64>();
    if mass(lo) >= target {
        return lo;
    }
    if mass(hi) <= target {
        return hi;
    }
    let (mut a, mut b) = (lo, hi);
    let mut t = 0.0f64.clamp(a, b);
    for _ in 0..200 {
        let (f, df) = logits.iter().fold((0.0, 0.0), |(f, df), &l| {
            let s = sigmoid(l + t);
            (f + s, df + s * (1.0 - s))
        });
        let f = f - target;
        if f.abs() <= 1e-13 * target.max(1.0) {
            break;
        }
        if f > 0.0 {
            b = t;
        } else {
            a = t;
        }
        let newton = t - f / df;
        t = if df > 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if b - a < 1e-15 {
            break;
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Training objective

/// Mean per-location cross-entropy between the projected target and
/// `parametric_softmax(scores, gamma)`, with its gradient w.r.t. the scores.
/// The projected target is held fixed.
pub fn constrained_loss(
    scores: &ValueGrid,
    constraints: &ConstraintSet,
    gamma: f64,
) -> Result<(f64, ValueGrid)> {
    let p = parametric_softmax(scores, gamma)?;
    let target = project_onto_constraints(&p, constraints)?;
    let op = CrossEntropyToTarget { target, gamma };
    let loss = op.loss(scores)?;
    let grad = op.gradient(scores)?;
    Ok((loss, grad))
}

/// Cross-entropy against a fixed target distribution.
#[derive(Debug, Clone)]
pub struct CrossEntropyToTarget {
    pub target: ValueGrid,
    pub gamma: f64,
}

impl CrossEntropyToTarget {
    pub fn loss(&self, scores: &ValueGrid) -> Result<f64> {
        let logp = log_parametric_softmax(scores, self.gamma)?;
        let k = scores.shape()[scores.rank() - 1];
        let locations = (scores.len() / k) as f64;
        let total: f64 = self
            .target
            .data()
            .iter()
            .zip(logp.data())
            .map(|(&q, &lp)| if q == 0.0 { 0.0 } else { -q * lp })
            .sum();
        Ok(total / locations)
    }

    pub fn gradient(&self, scores: &ValueGrid) -> Result<ValueGrid> {
        let p = parametric_softmax(scores, self.gamma)?;
        let k = scores.shape()[scores.rank() - 1];
        let scale = self.gamma / (scores.len() / k) as f64;
        p.zip_map(&self.target, |p, q| scale * (p - q))
    }
}

impl DifferentiableOp for CrossEntropyToTarget {
    fn name(&self) -> &str {
        "constrained_loss"
    }

    fn forward(&self, inputs: &[ValueGrid]) -> Result<ValueGrid> {
        ValueGrid::from_vec(&[1], vec![self.loss(&inputs[0])?])
    }

    fn backward(&self, inputs: &[ValueGrid], grad_output: &ValueGrid) -> Result<Vec<ValueGrid>> {
        grad_output.expect_shape(&[1])?;
        Ok(vec![self.gradient(&inputs[0])?.scale(grad_output.data()[0])])
    }
}
