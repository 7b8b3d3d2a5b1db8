//! Seeded gradient-check suite over every differentiable block.

use rand::Rng;
use serde::Serialize;

use crate::diagnosis::{Asymmetry, DiagnosisHead, HeadParams, Modulation, PolarPool, PolarPoolSpec, PoolMode};
use crate::error::{Error, Result};
use crate::geometry::{normalizing_affine, polar_map, MomentEllipse, NormalizedPolarMap};
use crate::structure::{
    parametric_softmax, project_onto_constraints, BoundKind, ConstraintSet, CrossEntropyToTarget, ParametricSoftmax,
    DEFAULT_GAMMA, STRUCTURE_COUNT,
};
use crate::tensor::{finite_diff_check, seeded_rng, DifferentiableOp, ValueGrid};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_TRIALS: usize = 10;

const FEATURE_SIDE: usize = 8;
const STRUCTURE_GRID: usize = 16;
const CHANNELS: usize = 4;
/// Inputs closer than this many epsilons to a kink are redrawn; one perturbed
/// element moves any pooled value by at most one epsilon.
const KINK_MARGIN: f64 = 2.0;
const MAX_REDRAWS: usize = 100;

pub struct Trial {
    pub op: Box<dyn DifferentiableOp>,
    pub inputs: Vec<ValueGrid>,
    pub probe: ValueGrid,
    pub epsilon: f64,
}

pub struct Block {
    pub name: String,
    pub trials: Vec<Trial>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_error <= self.tolerance)
    }
}

pub fn run_blocks(blocks: &[Block]) -> Result<GradcheckReport> {
    let mut reports = Vec::with_capacity(blocks.len());
    for block in blocks {
        let mut max_error = 0.0f64;
        for trial in &block.trials {
            let err = finite_diff_check(trial.op.as_ref(), &trial.inputs, &trial.probe, trial.epsilon)?;
            max_error = max_error.max(err);
        }
        reports.push(BlockReport {
            name: block.name.clone(),
            trials: block.trials.len(),
            max_error,
        });
    }
    Ok(GradcheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        blocks: reports,
    })
}

/// Wraps an op and scales its backward pass; a negative control for the suite.
pub struct ScaledBackward {
    pub inner: Box<dyn DifferentiableOp>,
    pub factor: f64,
}

impl DifferentiableOp for ScaledBackward {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn forward(&self, inputs: &[ValueGrid]) -> Result<ValueGrid> {
        self.inner.forward(inputs)
    }

    fn backward(&self, inputs: &[ValueGrid], grad_output: &ValueGrid) -> Result<Vec<ValueGrid>> {
        Ok(self
            .inner
            .backward(inputs, grad_output)?
            .into_iter()
            .map(|g| g.scale(self.factor))
            .collect())
    }
}

/// Replaces every op of the named block with a corrupted backward.
pub fn corrupt_block(blocks: &mut [Block], name: &str) -> Result<()> {
    let block = blocks
        .iter_mut()
        .find(|b| b.name == name)
        .ok_or_else(|| Error::InvalidArgument(format!("no gradient block named '{name}'")))?;
    for trial in &mut block.trials {
        let inner = std::mem::replace(&mut trial.op, Box::new(Modulation));
        trial.op = Box::new(ScaledBackward { inner, factor: 1.01 });
    }
    Ok(())
}

fn random_npc(rng: &mut impl Rng, side: usize) -> Result<NormalizedPolarMap> {
    let mid = (side - 1) as f64 / 2.0;
    let major = rng.gen_range(0.35..0.5) * side as f64;
    let ellipse = MomentEllipse {
        center: [mid + rng.gen_range(-0.5..0.5), mid + rng.gen_range(-0.5..0.5)],
        semi_axes: [major, major * rng.gen_range(0.7..1.0)],
        orientation: rng.gen_range(0.0..std::f64::consts::PI),
    };
    polar_map(side, side, normalizing_affine(&ellipse))
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Result<ValueGrid> {
    ValueGrid::random_uniform(shape, lo, hi, rng.gen())
}

/// The standard block inventory with `trials` seeded random inputs each.
pub fn default_blocks(seed: u64, trials: usize) -> Result<Vec<Block>> {
    let mut rng = seeded_rng(seed);
    let gamma = DEFAULT_GAMMA;
    let c = CHANNELS;
    let spec = PolarPoolSpec::default();
    let mut blocks = Vec::new();

    let mut softmax = Vec::new();
    let mut loss = Vec::new();
    let mut modulation = Vec::new();
    let mut pool_avg = Vec::new();
    let mut pool_max = Vec::new();
    let mut asymmetry = Vec::new();
    let mut head = Vec::new();
    for _ in 0..trials {
        // Scores stay small so gamma-scaled logits remain in a well-conditioned range.
        let scores = uniform(&mut rng, &[4, 4, STRUCTURE_COUNT], -0.1, 0.1)?;
        softmax.push(Trial {
            op: Box::new(ParametricSoftmax { gamma }),
            inputs: vec![scores.clone()],
            probe: uniform(&mut rng, &[4, 4, STRUCTURE_COUNT], -1.0, 1.0)?,
            epsilon: 1e-6,
        });

        let p = parametric_softmax(&scores, gamma)?;
        let mut constraints = ConstraintSet::default();
        let full = ValueGrid::new(&[4, 4], 1.0)?;
        let s = rng.gen_range(0..STRUCTURE_COUNT);
        constraints.push(s, BoundKind::Lower, rng.gen_range(0.3..0.7) * 16.0, full.clone());
        constraints.push((s + 1) % STRUCTURE_COUNT, BoundKind::Upper, 0.05 * 16.0, full);
        let target = project_onto_constraints(&p, &constraints)?;
        loss.push(Trial {
            op: Box::new(CrossEntropyToTarget { target, gamma }),
            inputs: vec![scores],
            probe: ValueGrid::new(&[1], 1.0)?,
            epsilon: 1e-6,
        });

        modulation.push(Trial {
            op: Box::new(Modulation),
            inputs: vec![
                uniform(&mut rng, &[FEATURE_SIDE, FEATURE_SIDE, c], -1.0, 1.0)?,
                uniform(&mut rng, &[STRUCTURE_GRID, STRUCTURE_GRID, STRUCTURE_COUNT], 0.0, 1.0)?,
            ],
            probe: uniform(&mut rng, &[FEATURE_SIDE, FEATURE_SIDE, 9 * c], -1.0, 1.0)?,
            epsilon: 1e-4,
        });

        let npc = random_npc(&mut rng, FEATURE_SIDE)?;
        pool_avg.push(Trial {
            op: Box::new(PolarPool::new(&npc, &spec)?),
            inputs: vec![uniform(&mut rng, &[FEATURE_SIDE, FEATURE_SIDE, c], -1.0, 1.0)?],
            probe: uniform(&mut rng, &[spec.rings, spec.angles, c], -1.0, 1.0)?,
            epsilon: 1e-4,
        });

        let max_spec = PolarPoolSpec::new(spec.rings, spec.angles, PoolMode::Max, 0.0);
        let pool = PolarPool::new(&npc, &max_spec)?;
        let eps = 1e-6;
        let features = redraw(|| {
            let f = uniform(&mut rng, &[FEATURE_SIDE, FEATURE_SIDE, c], -1.0, 1.0)?;
            Ok((pool.max_margin(&f)? > KINK_MARGIN * eps).then_some(f))
        })?;
        pool_max.push(Trial {
            op: Box::new(pool),
            inputs: vec![features],
            probe: uniform(&mut rng, &[spec.rings, spec.angles, c], -1.0, 1.0)?,
            epsilon: eps,
        });

        let eps = 1e-4;
        let polar = redraw(|| {
            let p = uniform(&mut rng, &[spec.rings, spec.angles, c], -1.0, 1.0)?;
            Ok((Asymmetry::margin(&p)? > KINK_MARGIN * eps).then_some(p))
        })?;
        asymmetry.push(Trial {
            op: Box::new(Asymmetry),
            inputs: vec![polar],
            probe: uniform(&mut rng, &[spec.angles / 2, c], -1.0, 1.0)?,
            epsilon: eps,
        });

        let op = DiagnosisHead::new(HeadParams::random(c, &spec, rng.gen())?, &npc, &spec)?;
        let inputs = redraw(|| {
            let inputs = vec![
                uniform(&mut rng, &[FEATURE_SIDE, FEATURE_SIDE, c], -1.0, 1.0)?,
                uniform(&mut rng, &[STRUCTURE_GRID, STRUCTURE_GRID, STRUCTURE_COUNT], 0.0, 1.0)?,
            ];
            Ok((op.asymmetry_margin(&inputs)? > KINK_MARGIN * eps).then_some(inputs))
        })?;
        head.push(Trial {
            op: Box::new(op),
            inputs,
            probe: uniform(&mut rng, &[3], -1.0, 1.0)?,
            epsilon: eps,
        });
    }
    for (name, trials) in [
        ("parametric_softmax", softmax),
        ("constrained_loss", loss),
        ("modulation", modulation),
        ("polar_pool_average", pool_avg),
        ("polar_pool_max", pool_max),
        ("asymmetry", asymmetry),
        ("head_forward", head),
    ] {
        blocks.push(Block {
            name: name.to_string(),
            trials,
        });
    }
    Ok(blocks)
}

fn redraw<T>(mut draw: impl FnMut() -> Result<Option<T>>) -> Result<T> {
    for _ in 0..MAX_REDRAWS {
        if let Some(v) = draw()? {
            return Ok(v);
        }
    }
    Err(Error::InvalidArgument("could not draw inputs away from kinks".into()))
}

pub fn run_default_suite(seed: u64, trials: usize) -> Result<GradcheckReport> {
    run_blocks(&default_blocks(seed, trials)?)
}
