//! Layer definitions with explicit forward/backward passes over a flat
//! parameter slice.
//!
//! A layer never owns its weights. Every layer reads its parameters from the
//! slice handed to `forward`/`backward` and writes parameter gradients into a
//! slice of identical layout, which keeps optimizers, weight averaging and
//! checkpoints trivial (they all operate on one `Vec<f64>`).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, gemm_a_bt, gemm_at_b, Shape, Tensor};
use super::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2d {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad_h: kernel / 2,
            pad_w: kernel / 2,
        }
    }

    /// 1-D convolution along the width axis (height must be 1).
    pub fn along_width(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: 1,
            kernel_w: kernel,
            stride: 1,
            pad_h: 0,
            pad_w: kernel / 2,
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad_h - self.kernel_h) / self.stride + 1,
            (w + 2 * self.pad_w - self.kernel_w) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Unfold the padded input into a `(in·kh·kw) × (oh·ow)` matrix.
    fn im2col(&self, padded: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let (kh, kw, s) = (self.kernel_h, self.kernel_w, self.stride);
        let p = oh * ow;
        let mut cols = vec![0.0; self.fan_in() * p];
        for c in 0..self.in_channels {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let src_row = (c * padded.height + oy * s + ky) * padded.width + kx;
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            d.copy_from_slice(&padded.data[src_row..src_row + ow]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = padded.data[src_row + ox * s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], ph: usize, pw: usize, oh: usize, ow: usize) -> Tensor {
        let (kh, kw, s) = (self.kernel_h, self.kernel_w, self.stride);
        let p = oh * ow;
        let mut out = Tensor::zeros(self.in_channels, ph, pw);
        for c in 0..self.in_channels {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let dst_row = (c * ph + oy * s + ky) * pw + kx;
                        let sr = &src[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            for (d, v) in out.data[dst_row..dst_row + ow].iter_mut().zip(sr) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in sr.iter().enumerate() {
                                out.data[dst_row + ox * s] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv2d {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl DepthwiseConv2d {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
}

/// One network layer. Parameterized variants store weights then biases.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Fixed affine input map `x·scale + shift` (no parameters).
    InputNorm {
        scale: f64,
        shift: f64,
    },
    Conv2d(Conv2d),
    Depthwise(DepthwiseConv2d),
    Relu,
    MaxPool {
        kernel_h: usize,
        kernel_w: usize,
    },
    GlobalAvgPool,
    Dense(Dense),
    Dropout {
        rate: f64,
    },
}

/// Per-layer values retained by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Scale(f64),
    Conv {
        cols: Vec<f64>,
        in_shape: Shape,
        out_hw: (usize, usize),
    },
    Depthwise {
        padded: Tensor,
        in_shape: Shape,
    },
    Relu(Vec<bool>),
    MaxPool {
        argmax: Vec<usize>,
        in_shape: Shape,
    },
    Gap(Shape),
    Dense(Vec<f64>, Shape),
    Dropout(Vec<f64>),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.weight_len() + c.out_channels,
            Layer::Depthwise(d) => d.channels * d.kernel * d.kernel + d.channels,
            Layer::Dense(d) => d.inputs * d.outputs + d.outputs,
            _ => 0,
        }
    }

    pub fn output_shape(&self, (c, h, w): Shape) -> Shape {
        match self {
            Layer::Conv2d(conv) => {
                let (oh, ow) = conv.out_dims(h, w);
                (conv.out_channels, oh, ow)
            }
            Layer::Depthwise(d) => {
                let (oh, ow) = d.out_dims(h, w);
                (c, oh, ow)
            }
            Layer::MaxPool { kernel_h, kernel_w } => (c, h / kernel_h, w / kernel_w),
            Layer::GlobalAvgPool => (c, 1, 1),
            Layer::Dense(d) => (d.outputs, 1, 1),
            _ => (c, h, w),
        }
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let (weights, fan_in) = match self {
            Layer::Conv2d(c) => (c.weight_len(), c.fan_in()),
            Layer::Depthwise(d) => (d.channels * d.kernel * d.kernel, d.kernel * d.kernel),
            Layer::Dense(d) => (d.inputs * d.outputs, d.inputs),
            _ => return,
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        for p in &mut params[..weights] {
            *p = normal.sample(rng);
        }
        for p in &mut params[weights..] {
            *p = 0.0;
        }
    }

    pub fn forward(&self, params: &[f64], x: Tensor, mode: &mut Mode<'_>) -> (Tensor, Cache) {
        match self {
            Layer::InputNorm { scale, shift } => {
                let mut y = x;
                for v in &mut y.data {
                    *v = *v * scale + shift;
                }
                (y, Cache::Scale(*scale))
            }
            Layer::Conv2d(conv) => conv_forward(conv, params, x),
            Layer::Depthwise(dw) => depthwise_forward(dw, params, x),
            Layer::Relu => {
                let mut y = x;
                let mask: Vec<bool> = y.data.iter().map(|v| *v > 0.0).collect();
                for (v, m) in y.data.iter_mut().zip(&mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                (y, Cache::Relu(mask))
            }
            Layer::MaxPool { kernel_h, kernel_w } => maxpool_forward(*kernel_h, *kernel_w, x),
            Layer::GlobalAvgPool => {
                let shape = x.shape();
                let n = (x.height * x.width) as f64;
                let data = (0..x.channels).map(|c| x.plane(c).iter().sum::<f64>() / n).collect();
                (Tensor::vector(data), Cache::Gap(shape))
            }
            Layer::Dense(d) => {
                assert_eq!(x.len(), d.inputs, "dense input width");
                let shape = x.shape();
                let (w, b) = params.split_at(d.inputs * d.outputs);
                let mut y = b[..d.outputs].to_vec();
                gemm(d.outputs, d.inputs, 1, w, &x.data, 1.0, &mut y);
                (Tensor::vector(y), Cache::Dense(x.data, shape))
            }
            Layer::Dropout { rate } => match mode {
                Mode::Train(rng) if *rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mut y = x;
                    for (v, m) in y.data.iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    (y, Cache::Dropout(mask))
                }
                _ => (x, Cache::None),
            },
        }
    }

    pub fn backward(&self, params: &[f64], cache: Cache, gy: Tensor, grads: &mut [f64]) -> Tensor {
        match (self, cache) {
            (Layer::InputNorm { .. }, Cache::Scale(scale)) => {
                let mut g = gy;
                for v in &mut g.data {
                    *v *= scale;
                }
                g
            }
            (Layer::Conv2d(conv), Cache::Conv { cols, in_shape, out_hw }) => {
                conv_backward(conv, params, &cols, in_shape, out_hw, gy, grads)
            }
            (Layer::Depthwise(dw), Cache::Depthwise { padded, in_shape }) => {
                depthwise_backward(dw, params, &padded, in_shape, gy, grads)
            }
            (Layer::Relu, Cache::Relu(mask)) => {
                let mut g = gy;
                for (v, m) in g.data.iter_mut().zip(&mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                g
            }
            (Layer::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => {
                let mut g = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
                for (i, v) in argmax.iter().zip(&gy.data) {
                    g.data[*i] += v;
                }
                g
            }
            (Layer::GlobalAvgPool, Cache::Gap((c, h, w))) => {
                let n = (h * w) as f64;
                let mut g = Tensor::zeros(c, h, w);
                for ch in 0..c {
                    let v = gy.data[ch] / n;
                    g.data[ch * h * w..(ch + 1) * h * w].fill(v);
                }
                g
            }
            (Layer::Dense(d), Cache::Dense(x, (c, h, w))) => {
                let (gw, gb) = grads.split_at_mut(d.inputs * d.outputs);
                // dW += gy ⊗ x
                gemm_a_bt(d.outputs, 1, d.inputs, &gy.data, &x, gw);
                for (b, g) in gb.iter_mut().zip(&gy.data) {
                    *b += g;
                }
                let mut gx = vec![0.0; d.inputs];
                gemm_at_b(
                    d.inputs,
                    d.outputs,
                    1,
                    &params[..d.inputs * d.outputs],
                    &gy.data,
                    &mut gx,
                );
                Tensor::from_vec(c, h, w, gx)
            }
            (Layer::Dropout { .. }, Cache::Dropout(mask)) => {
                let mut g = gy;
                for (v, m) in g.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                g
            }
            (_, Cache::None) => gy,
            (layer, _) => panic!("cache does not belong to layer {layer:?}"),
        }
    }
}

fn conv_forward(conv: &Conv2d, params: &[f64], x: Tensor) -> (Tensor, Cache) {
    assert_eq!(x.channels, conv.in_channels, "conv input channels");
    let in_shape = x.shape();
    let (oh, ow) = conv.out_dims(x.height, x.width);
    let p = oh * ow;
    let cols = if conv.is_pointwise() {
        x.data
    } else {
        conv.im2col(&x.padded(conv.pad_h, conv.pad_w), oh, ow)
    };
    let (w, b) = params.split_at(conv.weight_len());
    let mut y = vec![0.0; conv.out_channels * p];
    for (o, bias) in b[..conv.out_channels].iter().enumerate() {
        y[o * p..(o + 1) * p].fill(*bias);
    }
    gemm(conv.out_channels, conv.fan_in(), p, w, &cols, 1.0, &mut y);
    (
        Tensor::from_vec(conv.out_channels, oh, ow, y),
        Cache::Conv {
            cols,
            in_shape,
            out_hw: (oh, ow),
        },
    )
}

fn conv_backward(
    conv: &Conv2d,
    params: &[f64],
    cols: &[f64],
    (c, h, w): Shape,
    (oh, ow): (usize, usize),
    gy: Tensor,
    grads: &mut [f64],
) -> Tensor {
    let p = oh * ow;
    let k = conv.fan_in();
    let (gw, gb) = grads.split_at_mut(conv.weight_len());
    // dW (out×k) += gy (out×p) · colsᵀ
    gemm_a_bt(conv.out_channels, p, k, &gy.data, cols, gw);
    for (o, b) in gb[..conv.out_channels].iter_mut().enumerate() {
        *b += gy.data[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    // dcols (k×p) = Wᵀ · gy
    let mut dcols = vec![0.0; k * p];
    gemm_at_b(
        k,
        conv.out_channels,
        p,
        &params[..conv.weight_len()],
        &gy.data,
        &mut dcols,
    );
    if conv.is_pointwise() {
        return Tensor::from_vec(c, h, w, dcols);
    }
    let (ph, pw) = (h + 2 * conv.pad_h, w + 2 * conv.pad_w);
    conv.col2im(&dcols, ph, pw, oh, ow).cropped(conv.pad_h, conv.pad_w)
}

fn depthwise_forward(dw: &DepthwiseConv2d, params: &[f64], x: Tensor) -> (Tensor, Cache) {
    assert_eq!(x.channels, dw.channels, "depthwise channels");
    let in_shape = x.shape();
    let pad = dw.pad();
    let padded = x.padded(pad, pad);
    let (oh, ow) = dw.out_dims(x.height, x.width);
    let (k, s) = (dw.kernel, dw.stride);
    let kk = k * k;
    let mut y = Tensor::zeros(dw.channels, oh, ow);
    let mut row = vec![0.0; ow];
    for c in 0..dw.channels {
        let weights = &params[c * kk..(c + 1) * kk];
        let bias = params[dw.channels * kk + c];
        for oy in 0..oh {
            row.fill(bias);
            for ky in 0..k {
                let base = (c * padded.height + oy * s + ky) * padded.width;
                for kx in 0..k {
                    let wv = weights[ky * k + kx];
                    let src = &padded.data[base + kx..];
                    if s == 1 {
                        for (r, v) in row.iter_mut().zip(&src[..ow]) {
                            *r += wv * v;
                        }
                    } else {
                        for (ox, r) in row.iter_mut().enumerate() {
                            *r += wv * src[ox * s];
                        }
                    }
                }
            }
            y.data[(c * oh + oy) * ow..][..ow].copy_from_slice(&row);
        }
    }
    (y, Cache::Depthwise { padded, in_shape })
}

fn depthwise_backward(
    dw: &DepthwiseConv2d,
    params: &[f64],
    padded: &Tensor,
    (c_in, h, w): Shape,
    gy: Tensor,
    grads: &mut [f64],
) -> Tensor {
    let (k, s) = (dw.kernel, dw.stride);
    let kk = k * k;
    let (oh, ow) = (gy.height, gy.width);
    let mut gpad = Tensor::zeros(c_in, padded.height, padded.width);
    for c in 0..dw.channels {
        let weights = &params[c * kk..(c + 1) * kk];
        let g_plane = gy.plane(c);
        grads[dw.channels * kk + c] += g_plane.iter().sum::<f64>();
        for ky in 0..k {
            for kx in 0..k {
                let wv = weights[ky * k + kx];
                let mut acc = 0.0;
                for oy in 0..oh {
                    let base = (c * padded.height + oy * s + ky) * padded.width + kx;
                    let grow = &g_plane[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        acc += super::tensor::dot(grow, &padded.data[base..base + ow]);
                        for (d, g) in gpad.data[base..base + ow].iter_mut().zip(grow) {
                            *d += wv * g;
                        }
                    } else {
                        for (ox, g) in grow.iter().enumerate() {
                            acc += g * padded.data[base + ox * s];
                            gpad.data[base + ox * s] += wv * g;
                        }
                    }
                }
                grads[c * kk + ky * k + kx] += acc;
            }
        }
    }
    let pad = dw.pad();
    let out = gpad.cropped(pad, pad);
    debug_assert_eq!(out.shape(), (c_in, h, w));
    out
}

fn maxpool_forward(kh: usize, kw: usize, x: Tensor) -> (Tensor, Cache) {
    let in_shape = x.shape();
    let (oh, ow) = (x.height / kh, x.width / kw);
    let mut y = Tensor::zeros(x.channels, oh, ow);
    let mut argmax = Vec::with_capacity(y.len());
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = (c * x.height + oy * kh + ky) * x.width + ox * kw + kx;
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                y.data[(c * oh + oy) * ow + ox] = best;
                argmax.push(best_i);
            }
        }
    }
    (y, Cache::MaxPool { argmax, in_shape })
}
