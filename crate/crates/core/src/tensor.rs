//! Dense row-major grids and the finite-difference gradient harness.
//!
//! Axis order is fixed across the crate: (height, width, channels, view).
//! Lower-rank grids drop trailing axes, so an image is `[h, w, 3]` and a mask
//! is `[h, w]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense real-valued grid with up to four axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ValueGrid {
    /// Grid of the given shape with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: f64) -> Result<Self> {
        check_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Grid filled from a seeded uniform draw in `[lo, hi)`.
    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Self> {
        check_shape(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Extent of axis `axis`, or 1 when the grid has fewer axes.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    pub fn height(&self) -> usize {
        self.dim(0)
    }

    pub fn width(&self) -> usize {
        self.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.dim(2)
    }

    /// Flat offset of `(row, col, channel)` in an `[h, w, c]` grid.
    #[inline]
    pub fn offset3(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.dim(1) + col) * self.dim(2) + ch
    }

    #[inline]
    pub fn at3(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.offset3(row, col, ch)]
    }

    #[inline]
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim(1) + col]
    }

    #[inline]
    pub fn set2(&mut self, row: usize, col: usize, value: f64) {
        let w = self.dim(1);
        self.data[row * w + col] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_shape(other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

/// A block with a forward map and a hand-written vector-Jacobian product.
///
/// Static parameters live on the implementing type; only `inputs` are
/// differentiated.
pub trait DifferentiableOp {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[ValueGrid]) -> Result<ValueGrid>;

    /// Gradients w.r.t. each input, shaped like that input. Must be linear in
    /// `grad_output`.
    fn backward(&self, inputs: &[ValueGrid], grad_output: &ValueGrid) -> Result<Vec<ValueGrid>>;
}

/// Maximum relative error between the analytic gradient of `<probe, op(x)>`
/// and its central finite difference, over every element of every input.
pub fn finite_diff_check(
    op: &dyn DifferentiableOp,
    inputs: &[ValueGrid],
    probe: &ValueGrid,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let out = op.forward(inputs)?;
    out.expect_shape(probe.shape())?;
    let analytic = op.backward(inputs, probe)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "{} returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }

    let mut perturbed = inputs.to_vec();
    let mut worst = 0.0f64;
    for (which, grad) in analytic.iter().enumerate() {
        grad.expect_shape(inputs[which].shape())?;
        for k in 0..inputs[which].len() {
            let x = inputs[which].data[k];
            perturbed[which].data[k] = x + epsilon;
            let plus = op.forward(&perturbed)?.dot(probe)?;
            perturbed[which].data[k] = x - epsilon;
            let minus = op.forward(&perturbed)?.dot(probe)?;
            perturbed[which].data[k] = x;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = grad.data[k];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Seeded generator shared by tests, gradient checks and toy models.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
