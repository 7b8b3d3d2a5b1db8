//! Synthetic weak-supervision experiment: a small segmenter learns to place a
//! structure on a bright lesion border from region-level bounds alone.

use rand::Rng;
use serde::Serialize;

use crate::conv::{Adam, ConvNet};
use crate::error::Result;
use crate::geometry::{normalized_polar_coordinates, LesionMask};
use crate::structure::{
    constrained_loss, parametric_softmax, spatial_region, BoundKind, ConstraintSet, RegionSpec, DEFAULT_GAMMA,
    STREAKS, STRUCTURE_COUNT,
};
use crate::tensor::{seeded_rng, ValueGrid};

pub const TOY_SIDE: usize = 64;
/// Class left unconstrained so background pixels have somewhere to go.
pub const BACKGROUND: usize = 0;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ToyConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub hidden: usize,
    /// Lower bound on the structure inside its region, as a fraction of the region.
    pub inside_fraction: f64,
    /// Upper bound on the structure outside its region, as a fraction of the complement.
    pub outside_fraction: f64,
    pub eval_images: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 2,
            learning_rate: 0.01,
            gamma: DEFAULT_GAMMA,
            hidden: 8,
            inside_fraction: 0.5,
            outside_fraction: 0.01,
            eval_images: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyReport {
    pub losses: Vec<f64>,
    /// Share of the structure's probability mass inside the true annulus on
    /// held-out images.
    pub in_region_fraction: f64,
}

/// One synthetic case: a gray disk lesion on a dark background with a bright
/// border annulus at `0.7 r <= d <= r`.
pub struct ToyImage {
    pub image: ValueGrid,
    pub mask: LesionMask,
    pub annulus: ValueGrid,
}

pub fn toy_image(rng: &mut impl Rng) -> Result<ToyImage> {
    let side = TOY_SIDE;
    let cx = rng.gen_range(24.0..40.0);
    let cy = rng.gen_range(24.0..40.0);
    let r: f64 = rng.gen_range(14.0..22.0);
    let mut image = ValueGrid::zeros(&[side, side, 1])?;
    let mut annulus = ValueGrid::zeros(&[side, side])?;
    for row in 0..side {
        for col in 0..side {
            let d = (col as f64 - cx).hypot(row as f64 - cy);
            let base = if d > r {
                0.1
            } else if d >= 0.7 * r {
                annulus.set2(row, col, 1.0);
                0.9
            } else {
                0.45
            };
            image.data_mut()[row * side + col] = base + rng.gen_range(-0.05..0.05);
        }
    }
    let mask = LesionMask::from_fn(side, side, |row, col| (col as f64 - cx).hypot(row as f64 - cy) <= r)?;
    Ok(ToyImage { image, mask, annulus })
}

/// Bounds for a structure labelled local to the lesion border: present on
/// the border region, absent elsewhere; other structures absent.
pub fn toy_constraints(mask: &LesionMask, config: &ToyConfig) -> Result<ConstraintSet> {
    let npc = normalized_polar_coordinates(mask)?;
    let region = spatial_region(&npc, &RegionSpec::BORDER)?;
    let outside = region.map(|v| 1.0 - v);
    let full = ValueGrid::new(region.shape(), 1.0)?;
    let inside_n = region.sum();
    let outside_n = outside.sum();
    let n = full.sum();
    let mut set = ConstraintSet::default();
    set.push(STREAKS, BoundKind::Lower, config.inside_fraction * inside_n, region);
    set.push(STREAKS, BoundKind::Upper, config.outside_fraction * outside_n, outside);
    for s in (0..STRUCTURE_COUNT).filter(|&s| s != STREAKS && s != BACKGROUND) {
        set.push(s, BoundKind::Upper, config.outside_fraction * n, full.clone());
    }
    Ok(set)
}

pub fn run_toy_recovery(seed: u64, config: &ToyConfig) -> Result<ToyReport> {
    let mut rng = seeded_rng(seed);
    let mut net = ConvNet::toy_segmenter(1, config.hidden, STRUCTURE_COUNT, seed);
    let mut adam = Adam::new(&net, config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut total: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
        let mut loss = 0.0;
        for _ in 0..config.batch {
            let case = toy_image(&mut rng)?;
            let constraints = toy_constraints(&case.mask, config)?;
            let (scores, trace) = net.forward_traced(&case.image)?;
            let (l, grad) = constrained_loss(&scores, &constraints, config.gamma)?;
            loss += l / config.batch as f64;
            let grads = net.backward(&trace, &grad)?;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for ((aw, ab), (gw, gb)) in acc.iter_mut().zip(grads) {
                        aw.iter_mut().zip(gw).for_each(|(a, g)| *a += g);
                        ab.iter_mut().zip(gb).for_each(|(a, g)| *a += g);
                    }
                }
            }
        }
        let mut grads = total.expect("batch is non-empty");
        let scale = 1.0 / config.batch as f64;
        for (gw, gb) in &mut grads {
            gw.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= scale);
        }
        adam.update(&mut net, &grads);
        losses.push(loss);
    }

    let (mut inside, mut total) = (0.0, 0.0);
    for _ in 0..config.eval_images {
        let case = toy_image(&mut rng)?;
        let p = parametric_softmax(&net.forward(&case.image)?, config.gamma)?;
        for (px, &truth) in case.annulus.data().iter().enumerate() {
            let mass = p.data()[px * STRUCTURE_COUNT + STREAKS];
            total += mass;
            inside += mass * truth;
        }
    }
    Ok(ToyReport {
        losses,
        in_region_fraction: if total > 0.0 { inside / total } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_cases_are_feasible() {
        let mut rng = seeded_rng(3);
        let config = ToyConfig::default();
        for _ in 0..5 {
            let case = toy_image(&mut rng).unwrap();
            assert!(case.annulus.sum() > 100.0);
            toy_constraints(&case.mask, &config)
                .unwrap()
                .check_feasible(TOY_SIDE, TOY_SIDE, STRUCTURE_COUNT)
                .unwrap();
        }
    }

    #[test]
    fn short_run_reduces_loss() {
        let config = ToyConfig {
            steps: 20,
            batch: 1,
            eval_images: 1,
            ..Default::default()
        };
        let report = run_toy_recovery(1, &config).unwrap();
        assert_eq!(report.losses.len(), 20);
        assert!(report.losses.iter().all(|l| l.is_finite()));
        assert!(report.losses[19] < report.losses[0]);
    }
}
