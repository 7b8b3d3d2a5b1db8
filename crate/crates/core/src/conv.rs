//! Small convolutional networks used as stand-in score producers and
//! backbones, plus the toy trainer that exercises the constraint machinery.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, ValueGrid};

/// 2-D convolution over `[h, w, c]` grids with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out][ky][kx][in]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// He-initialized layer drawn from `rng`.
    pub fn random(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..out_ch * kernel * kernel * in_ch)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn output_extent(&self, extent: usize) -> usize {
        (extent + 2 * self.pad - self.kernel) / self.stride + 1
    }

    #[inline]
    fn w_index(&self, o: usize, ky: usize, kx: usize, i: usize) -> usize {
        ((o * self.kernel + ky) * self.kernel + kx) * self.in_ch + i
    }

    pub fn forward(&self, input: &ValueGrid) -> Result<ValueGrid> {
        let (h, w, c) = (input.height(), input.width(), input.channels());
        if c != self.in_ch || h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!(
                "conv expects {} channels and extent >= {}, got {:?}",
                self.in_ch,
                self.kernel,
                input.shape()
            )));
        }
        let (oh, ow) = (self.output_extent(h), self.output_extent(w));
        let mut out = vec![0.0; oh * ow * self.out_ch];
        let x = input.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[(oy * ow + ox) * self.out_ch..(oy * ow + ox + 1) * self.out_ch];
                dst.copy_from_slice(&self.bias);
                for ky in 0..self.kernel {
                    let Some(iy) = (oy * self.stride + ky).checked_sub(self.pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..self.kernel {
                        let Some(ix) = (ox * self.stride + kx).checked_sub(self.pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let src = &x[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        for (o, d) in dst.iter_mut().enumerate() {
                            let base = self.w_index(o, ky, kx, 0);
                            let wrow = &self.weight[base..base + c];
                            *d += wrow.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        ValueGrid::from_vec(&[oh, ow, self.out_ch], out)
    }

    /// Gradients w.r.t. input, weights and bias.
    pub fn backward(&self, input: &ValueGrid, grad_out: &ValueGrid) -> Result<(ValueGrid, Vec<f64>, Vec<f64>)> {
        let (h, w, c) = (input.height(), input.width(), input.channels());
        let (oh, ow) = (self.output_extent(h), self.output_extent(w));
        grad_out.expect_shape(&[oh, ow, self.out_ch])?;
        let mut gx = vec![0.0; input.len()];
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.out_ch];
        let x = input.data();
        let g = grad_out.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let go = &g[(oy * ow + ox) * self.out_ch..(oy * ow + ox + 1) * self.out_ch];
                for (b, &v) in gb.iter_mut().zip(go) {
                    *b += v;
                }
                for ky in 0..self.kernel {
                    let Some(iy) = (oy * self.stride + ky).checked_sub(self.pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..self.kernel {
                        let Some(ix) = (ox * self.stride + kx).checked_sub(self.pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let off = (iy * w + ix) * c;
                        for (o, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let base = self.w_index(o, ky, kx, 0);
                            for i in 0..c {
                                gw[base + i] += gv * x[off + i];
                                gx[off + i] += gv * self.weight[base + i];
                            }
                        }
                    }
                }
            }
        }
        Ok((ValueGrid::from_vec(input.shape(), gx)?, gw, gb))
    }
}

/// Convolutions with ReLU between them (none after the last layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<Conv2d>,
}

/// Pre-activation outputs of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    inputs: Vec<ValueGrid>,
    pre: Vec<ValueGrid>,
}

impl ConvNet {
    pub fn forward(&self, input: &ValueGrid) -> Result<ValueGrid> {
        Ok(self.forward_traced(input)?.0)
    }

    pub fn forward_traced(&self, input: &ValueGrid) -> Result<(ValueGrid, ConvTrace)> {
        let mut trace = ConvTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x)?;
            trace.inputs.push(x);
            x = if idx + 1 < self.layers.len() { z.map(|v| v.max(0.0)) } else { z.clone() };
            trace.pre.push(z);
        }
        Ok((x, trace))
    }

    /// Parameter gradients as `(weight, bias)` per layer.
    pub fn backward(&self, trace: &ConvTrace, grad_out: &ValueGrid) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut grads = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let mut g = grad_out.clone();
        for idx in (0..self.layers.len()).rev() {
            if idx + 1 < self.layers.len() {
                g = g.zip_map(&trace.pre[idx], |g, z| if z > 0.0 { g } else { 0.0 })?;
            }
            let (gx, gw, gb) = self.layers[idx].backward(&trace.inputs[idx], &g)?;
            grads[idx] = (gw, gb);
            g = gx;
        }
        Ok(grads)
    }

    /// Maps `[h, w, in]` images to `[h, w, classes]` scores at full resolution.
    pub fn toy_segmenter(in_ch: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self {
            layers: vec![
                Conv2d::random(in_ch, hidden, 3, 1, 1, &mut rng),
                Conv2d::random(hidden, hidden, 3, 1, 1, &mut rng),
                Conv2d::random(hidden, classes, 1, 1, 0, &mut rng),
            ],
        }
    }

    /// Maps `256 x 256 x 3` views to `64 x 64 x classes` structure scores.
    pub fn toy_score_net(classes: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut head = Conv2d::random(8, classes, 1, 1, 0, &mut rng);
        // Small outputs keep the sharpened softmax away from one-hot at init.
        head.weight.iter_mut().for_each(|w| *w *= 0.05);
        Self {
            layers: vec![
                Conv2d::random(3, 8, 4, 4, 0, &mut rng),
                Conv2d::random(8, 8, 3, 1, 1, &mut rng),
                head,
            ],
        }
    }

    /// Maps `256 x 256 x 3` views to an `8 x 8 x channels` feature grid with
    /// non-overlapping strided convolutions (4, 4, 2).
    pub fn toy_backbone(channels: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        Self {
            layers: vec![
                Conv2d::random(3, 8, 4, 4, 0, &mut rng),
                Conv2d::random(8, 16, 4, 4, 0, &mut rng),
                Conv2d::random(16, channels, 2, 2, 0, &mut rng),
            ],
        }
    }
}

/// Adam state for a [`ConvNet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    step: i32,
    moments: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(net: &ConvNet, learning_rate: f64) -> Self {
        let moments = net
            .layers
            .iter()
            .map(|l| {
                (
                    vec![0.0; l.weight.len()],
                    vec![0.0; l.weight.len()],
                    vec![0.0; l.bias.len()],
                    vec![0.0; l.bias.len()],
                )
            })
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            step: 0,
            moments,
        }
    }

    pub fn update(&mut self, net: &mut ConvNet, grads: &[(Vec<f64>, Vec<f64>)]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (lr, b1, b2) = (self.learning_rate, self.beta1, self.beta2);
        let apply = |params: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for k in 0..params.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                params[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + 1e-8);
            }
        };
        for ((layer, (gw, gb)), (mw, vw, mb, vb)) in net.layers.iter_mut().zip(grads).zip(&mut self.moments) {
            apply(&mut layer.weight, gw, mw, vw);
            apply(&mut layer.bias, gb, mb, vb);
        }
    }
}
