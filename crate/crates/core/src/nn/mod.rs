//! Minimal CPU neural-network engine.
//!
//! Networks are [`Sequential`] stacks of [`Layer`]s evaluated one sample at a
//! time; parameters live in a single flat `Vec<f64>` owned by the caller.
//! Everything here is single-threaded and bit-deterministic for a fixed seed.

mod layers;
mod optim;
mod tensor;

pub use layers::{Cache, Conv2d, Dense, DepthwiseConv2d, Layer};
pub use optim::{Adam, EarlyStopping, Monitor, Optimizer, OptimizerKind, PlateauScheduler, SgdMomentum, WeightAverage};
pub use tensor::{axpy, dot, gemm, Shape, Tensor};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass mode. Training mode carries the RNG used by dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Caches recorded by a forward pass, consumed by the matching backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// A linear stack of layers occupying a contiguous parameter range.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    param_count: usize,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Self {
            layers,
            offsets,
            param_count: total,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        self.layers.iter().fold(input, |s, l| l.output_shape(s))
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        assert_eq!(params.len(), self.param_count);
        for (l, &off) in self.layers.iter().zip(&self.offsets) {
            l.init(&mut params[off..off + l.param_count()], rng);
        }
    }

    fn slice<'p>(&self, params: &'p [f64], i: usize) -> &'p [f64] {
        &params[self.offsets[i]..self.offsets[i] + self.layers[i].param_count()]
    }

    /// Forward pass recording a tape for [`Sequential::backward`].
    pub fn forward(&self, params: &[f64], x: Tensor, mode: &mut Mode<'_>) -> (Tensor, Tape) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let (y, c) = l.forward(self.slice(params, i), h, mode);
            caches.push(c);
            h = y;
        }
        (h, Tape { caches })
    }

    /// Inference-only forward pass.
    pub fn infer(&self, params: &[f64], x: Tensor) -> Tensor {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(self.slice(params, i), h, &mut Mode::Eval).0;
        }
        h
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, params: &[f64], tape: Tape, gy: Tensor, grads: &mut [f64]) -> Tensor {
        assert_eq!(grads.len(), self.param_count);
        let mut g = gy;
        for (i, cache) in tape.caches.into_iter().enumerate().rev() {
            let (off, n) = (self.offsets[i], self.layers[i].param_count());
            g = self.layers[i].backward(self.slice(params, i), cache, g, &mut grads[off..off + n]);
        }
        g
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Weighted softmax cross-entropy; returns `(loss, dloss/dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize, weight: f64) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -weight * p[target].max(1e-300).ln();
    let mut g: Vec<f64> = p.iter().map(|v| v * weight).collect();
    g[target] -= weight;
    (loss, g)
}

/// Finite parameter vector check used after every optimizer step.
pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn loss_of(net: &Sequential, params: &[f64], x: &Tensor, target: usize) -> f64 {
        let y = net.infer(params, x.clone());
        softmax_cross_entropy(&y.data, target, 1.0).0
    }

    fn check_gradients(net: &Sequential, input: Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = vec![0.0; net.param_count()];
        net.init(&mut params, &mut rng);
        let (y, tape) = net.forward(&params, input.clone(), &mut Mode::Eval);
        let (_, gl) = softmax_cross_entropy(&y.data, 1, 1.0);
        let mut grads = vec![0.0; params.len()];
        net.backward(&params, tape, Tensor::vector(gl), &mut grads);
        let h = 1e-6;
        for i in (0..params.len()).step_by((params.len() / 40).max(1)) {
            let mut p = params.clone();
            p[i] += h;
            let up = loss_of(net, &p, &input, 1);
            p[i] -= 2.0 * h;
            let down = loss_of(net, &p, &input, 1);
            let numeric = (up - down) / (2.0 * h);
            let denom = grads[i].abs().max(numeric.abs()).max(1e-7);
            assert!(
                (grads[i] - numeric).abs() / denom < 1e-4,
                "param {i}: analytic {} numeric {numeric}",
                grads[i]
            );
        }
    }

    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        let net = Sequential::new(vec![
            Layer::InputNorm {
                scale: 0.5,
                shift: -0.1,
            },
            Layer::Conv2d(Conv2d::square(1, 3, 3, 2)),
            Layer::Relu,
            Layer::Depthwise(DepthwiseConv2d {
                channels: 3,
                kernel: 3,
                stride: 2,
            }),
            Layer::Relu,
            Layer::Conv2d(Conv2d::square(3, 4, 1, 1)),
            Layer::Depthwise(DepthwiseConv2d {
                channels: 4,
                kernel: 3,
                stride: 1,
            }),
            Layer::GlobalAvgPool,
            Layer::Dense(Dense { inputs: 4, outputs: 2 }),
        ]);
        let data = (0..9 * 7).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        check_gradients(&net, Tensor::from_vec(1, 9, 7, data));
    }

    #[test]
    fn conv1d_pool_gradients_match_finite_differences() {
        let net = Sequential::new(vec![
            Layer::Conv2d(Conv2d::along_width(3, 4, 3)),
            Layer::Relu,
            Layer::MaxPool {
                kernel_h: 1,
                kernel_w: 2,
            },
            Layer::Dense(Dense {
                inputs: 4 * 5,
                outputs: 2,
            }),
        ]);
        let data = (0..30)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0 + i as f64 * 0.01)
            .collect();
        check_gradients(&net, Tensor::from_vec(3, 1, 10, data));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let layer = Layer::Dropout { rate: 0.5 };
        let x = Tensor::vector(vec![1.0; 1000]);
        let (y, _) = layer.forward(&[], x.clone(), &mut Mode::Eval);
        assert_eq!(y, x);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = layer.forward(&[], x, &mut Mode::Train(&mut rng));
        assert!(y.data.iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = y.data.iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
