use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::{Shape3, Tensor};
use crate::error::{Error, Result};
use crate::math::{sqrt, tanh};
use crate::rng::Rng;

const BN_EPS: f64 = 1e-5;

/// One stage of a feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Fully connected layer over the flattened input.
    Dense { outputs: usize },
    Conv2d { out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    ConvTranspose2d { out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    /// Per-channel batch normalization with learnable scale and shift.
    BatchNorm,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    /// 2x2 max pooling with stride 2.
    MaxPool2,
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    FanIn,
    /// Normal(0, 0.02) weights, zero biases, BN scale Normal(1, 0.02).
    Dcgan,
}

/// How batch-normalization layers obtain their statistics.
pub enum BnMode<'a> {
    /// Batch statistics, running averages untouched.
    Batch,
    /// Batch statistics, running averages updated in place.
    BatchTracking { running: &'a mut [f64], momentum: f64 },
    /// Stored running averages (inference).
    Running(&'a [f64]),
}

#[derive(Clone, Debug)]
struct Slot {
    input: Shape3,
    output: Shape3,
    params: usize,
    param_offset: usize,
    buffer_offset: usize,
}

/// A sequential network whose parameters live outside it in a flat slice.
///
/// The network only holds the architecture; parameters and batch-norm
/// running statistics are passed in, so the same network can be evaluated at
/// many parameter points (clients, finite differences, checkpoints).
#[derive(Clone, Debug)]
pub struct Network {
    input: Shape3,
    layers: Vec<Layer>,
    slots: Vec<Slot>,
    param_count: usize,
    buffer_count: usize,
}

enum Cache {
    None,
    Pool(Vec<u32>),
    Bn { xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
}

/// Intermediate values recorded by a forward pass for backpropagation.
pub struct Tape {
    activations: Vec<Tensor>,
    caches: Vec<Cache>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("tape always holds the input")
    }
}

impl Network {
    pub fn new(input: Shape3, layers: Vec<Layer>) -> Result<Self> {
        let mut slots = Vec::with_capacity(layers.len());
        let mut shape = input;
        let mut param_offset = 0;
        let mut buffer_offset = 0;
        for layer in &layers {
            let (output, params, buffers) = layer_geometry(layer, shape)?;
            slots.push(Slot { input: shape, output, params, param_offset, buffer_offset });
            param_offset += params;
            buffer_offset += buffers;
            shape = output;
        }
        Ok(Self { input, layers, slots, param_count: param_offset, buffer_count: buffer_offset })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn output_shape(&self) -> Shape3 {
        self.slots.last().map_or(self.input, |s| s.output)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Number of batch-norm running statistics (mean and variance per channel).
    pub fn buffer_count(&self) -> usize {
        self.buffer_count
    }

    pub fn init_params(&self, rng: &mut Rng, init: Init) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count];
        for (layer, slot) in self.layers.iter().zip(&self.slots) {
            let p = &mut params[slot.param_offset..slot.param_offset + slot.params];
            match *layer {
                Layer::Dense { outputs } => {
                    let fan_in = slot.input.len();
                    fill_weights(rng, init, &mut p[..outputs * fan_in], fan_in);
                    fill_bias(rng, init, &mut p[outputs * fan_in..], fan_in);
                }
                Layer::Conv2d { out_ch, kernel, bias, .. } => {
                    let fan_in = slot.input.c * kernel * kernel;
                    let nw = out_ch * fan_in;
                    fill_weights(rng, init, &mut p[..nw], fan_in);
                    if bias {
                        fill_bias(rng, init, &mut p[nw..], fan_in);
                    }
                }
                Layer::ConvTranspose2d { out_ch, kernel, bias, .. } => {
                    let fan_in = out_ch * kernel * kernel;
                    let nw = slot.input.c * fan_in;
                    fill_weights(rng, init, &mut p[..nw], fan_in);
                    if bias {
                        fill_bias(rng, init, &mut p[nw..], fan_in);
                    }
                }
                Layer::BatchNorm => {
                    let c = slot.input.c;
                    for g in &mut p[..c] {
                        *g = match init {
                            Init::FanIn => 1.0,
                            Init::Dcgan => {
                                let z: f64 = StandardNormal.sample(rng);
                                1.0 + 0.02 * z
                            }
                        };
                    }
                }
                _ => {}
            }
        }
        params
    }

    /// Running statistics in their initial state (mean 0, variance 1).
    pub fn init_buffers(&self) -> Vec<f64> {
        let mut buffers = vec![0.0; self.buffer_count];
        for (layer, slot) in self.layers.iter().zip(&self.slots) {
            if let Layer::BatchNorm = layer {
                let c = slot.input.c;
                buffers[slot.buffer_offset + c..slot.buffer_offset + 2 * c].fill(1.0);
            }
        }
        buffers
    }

    fn check(&self, params: &[f64], x: &Tensor) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::shape(self.param_count, params.len()));
        }
        if x.shape != self.input {
            return Err(Error::shape(self.input.len(), x.shape.len()));
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, params: &[f64], x: &Tensor, mut bn: BnMode<'_>) -> Result<Tensor> {
        self.check(params, x)?;
        let mut cur = x.clone();
        for (layer, slot) in self.layers.iter().zip(&self.slots) {
            let (next, _) = self.layer_forward(layer, slot, params, &cur, &mut bn);
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward(&self, params: &[f64], x: Tensor, mut bn: BnMode<'_>) -> Result<Tape> {
        self.check(params, &x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        activations.push(x);
        for (layer, slot) in self.layers.iter().zip(&self.slots) {
            let (next, cache) =
                self.layer_forward(layer, slot, params, activations.last().unwrap(), &mut bn);
            activations.push(next);
            caches.push(cache);
        }
        Ok(Tape { activations, caches })
    }

    /// Backpropagates `grad_out` through the recorded pass. Parameter
    /// gradients are added into `grad_params`; the input gradient is returned.
    pub fn backward(
        &self,
        params: &[f64],
        tape: &Tape,
        grad_out: Tensor,
        grad_params: &mut [f64],
    ) -> Tensor {
        assert_eq!(grad_params.len(), self.param_count);
        let mut grad = grad_out;
        for (i, (layer, slot)) in self.layers.iter().zip(&self.slots).enumerate().rev() {
            let input = &tape.activations[i];
            let output = &tape.activations[i + 1];
            let p = &params[slot.param_offset..slot.param_offset + slot.params];
            let gp = &mut grad_params[slot.param_offset..slot.param_offset + slot.params];
            grad = layer_backward(layer, slot, p, input, output, &tape.caches[i], &grad, gp);
        }
        grad
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        slot: &Slot,
        params: &[f64],
        x: &Tensor,
        bn: &mut BnMode<'_>,
    ) -> (Tensor, Cache) {
        let p = &params[slot.param_offset..slot.param_offset + slot.params];
        match *layer {
            Layer::Dense { outputs } => (dense_forward(x, p, outputs), Cache::None),
            Layer::Conv2d { out_ch, kernel, stride, pad, bias } => {
                let (w, b) = p.split_at(out_ch * slot.input.c * kernel * kernel);
                let b = if bias { Some(b) } else { None };
                (conv_forward(x, w, b, slot.output, kernel, stride, pad), Cache::None)
            }
            Layer::ConvTranspose2d { out_ch: _, kernel, stride, pad, bias } => {
                let (w, b) = p.split_at(slot.input.c * slot.output.c * kernel * kernel);
                let b = if bias { Some(b) } else { None };
                (conv_transpose_forward(x, w, b, slot.output, kernel, stride, pad), Cache::None)
            }
            Layer::BatchNorm => {
                let c = slot.input.c;
                let (gamma, beta) = p.split_at(c);
                batch_norm_forward(x, gamma, beta, slot.buffer_offset, bn)
            }
            Layer::Relu => (map(x, |v| if v > 0.0 { v } else { 0.0 }), Cache::None),
            Layer::LeakyRelu { slope } => {
                (map(x, |v| if v > 0.0 { v } else { slope * v }), Cache::None)
            }
            Layer::Tanh => (map(x, tanh), Cache::None),
            Layer::MaxPool2 => {
                let (out, idx) = max_pool_forward(x, slot.output);
                (out, Cache::Pool(idx))
            }
        }
    }
}

fn layer_geometry(layer: &Layer, s: Shape3) -> Result<(Shape3, usize, usize)> {
    let bad = |msg: &str| Error::InvalidConfig(alloc::format!("layer {layer:?} on {s:?}: {msg}"));
    Ok(match *layer {
        Layer::Dense { outputs } => (Shape3::new(outputs, 1, 1), outputs * s.len() + outputs, 0),
        Layer::Conv2d { out_ch, kernel, stride, pad, bias } => {
            if stride == 0 || s.h + 2 * pad < kernel || s.w + 2 * pad < kernel {
                return Err(bad("kernel larger than padded input"));
            }
            let h = (s.h + 2 * pad - kernel) / stride + 1;
            let w = (s.w + 2 * pad - kernel) / stride + 1;
            let params = out_ch * s.c * kernel * kernel + if bias { out_ch } else { 0 };
            (Shape3::new(out_ch, h, w), params, 0)
        }
        Layer::ConvTranspose2d { out_ch, kernel, stride, pad, bias } => {
            if stride == 0 || (s.h - 1) * stride + kernel <= 2 * pad {
                return Err(bad("empty output"));
            }
            let h = (s.h - 1) * stride + kernel - 2 * pad;
            let w = (s.w - 1) * stride + kernel - 2 * pad;
            let params = s.c * out_ch * kernel * kernel + if bias { out_ch } else { 0 };
            (Shape3::new(out_ch, h, w), params, 0)
        }
        Layer::BatchNorm => (s, 2 * s.c, 2 * s.c),
        Layer::Relu | Layer::LeakyRelu { .. } | Layer::Tanh => (s, 0, 0),
        Layer::MaxPool2 => {
            if s.h % 2 != 0 || s.w % 2 != 0 {
                return Err(bad("pooling needs even spatial dims"));
            }
            (Shape3::new(s.c, s.h / 2, s.w / 2), 0, 0)
        }
    })
}

fn fill_weights(rng: &mut Rng, init: Init, w: &mut [f64], fan_in: usize) {
    match init {
        Init::FanIn => {
            let bound = 1.0 / sqrt(fan_in as f64);
            for v in w {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Init::Dcgan => {
            for v in w {
                let z: f64 = StandardNormal.sample(rng);
                *v = 0.02 * z;
            }
        }
    }
}

fn fill_bias(rng: &mut Rng, init: Init, b: &mut [f64], fan_in: usize) {
    match init {
        Init::FanIn => fill_weights(rng, init, b, fan_in),
        Init::Dcgan => b.fill(0.0),
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { n: x.n, shape: x.shape, data: x.data.iter().map(|&v| f(v)).collect() }
}

fn dense_forward(x: &Tensor, p: &[f64], outputs: usize) -> Tensor {
    let inputs = x.shape.len();
    let (w, b) = p.split_at(outputs * inputs);
    let mut out = Tensor::zeros(x.n, Shape3::new(outputs, 1, 1));
    for i in 0..x.n {
        let xi = x.sample(i);
        let yi = out.sample_mut(i);
        for o in 0..outputs {
            let row = &w[o * inputs..(o + 1) * inputs];
            yi[o] = b[o] + row.iter().zip(xi).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

/// Valid output-index range `[lo, hi)` for which `o * stride + k - pad` lands
/// inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest o with o*stride + k - pad <= len - 1
    let top = len - 1 + pad;
    let hi = if top < k { 0 } else { ((top - k) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

fn conv_forward(
    x: &Tensor,
    w: &[f64],
    b: Option<&[f64]>,
    out_shape: Shape3,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let s = x.shape;
    let mut out = Tensor::zeros(x.n, out_shape);
    let (ho, wo) = (out_shape.h, out_shape.w);
    for n in 0..x.n {
        let xin = x.sample(n);
        let y = out.sample_mut(n);
        for co in 0..out_shape.c {
            let plane = &mut y[co * ho * wo..(co + 1) * ho * wo];
            if let Some(b) = b {
                plane.fill(b[co]);
            }
            for ci in 0..s.c {
                let xp = &xin[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(s.h, ho, ky, stride, pad);
                    for kx in 0..k {
                        let wv = w[((co * s.c + ci) * k + ky) * k + kx];
                        let (ox0, ox1) = valid_range(s.w, wo, kx, stride, pad);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let xrow = &xp[iy * s.w..(iy + 1) * s.w];
                            let yrow = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                yrow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_transpose_forward(
    x: &Tensor,
    w: &[f64],
    b: Option<&[f64]>,
    out_shape: Shape3,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let s = x.shape;
    let mut out = Tensor::zeros(x.n, out_shape);
    let (ho, wo) = (out_shape.h, out_shape.w);
    for n in 0..x.n {
        let xin = x.sample(n);
        let y = out.sample_mut(n);
        if let Some(b) = b {
            for co in 0..out_shape.c {
                y[co * ho * wo..(co + 1) * ho * wo].fill(b[co]);
            }
        }
        for ci in 0..s.c {
            let xp = &xin[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for co in 0..out_shape.c {
                let plane = &mut y[co * ho * wo..(co + 1) * ho * wo];
                for ky in 0..k {
                    // input rows iy with 0 <= iy*stride + ky - pad < ho
                    let (iy0, iy1) = valid_range(ho, s.h, ky, stride, pad);
                    for kx in 0..k {
                        let wv = w[((ci * out_shape.c + co) * k + ky) * k + kx];
                        let (ix0, ix1) = valid_range(wo, s.w, kx, stride, pad);
                        for iy in iy0..iy1 {
                            let oy = iy * stride + ky - pad;
                            let xrow = &xp[iy * s.w..(iy + 1) * s.w];
                            let yrow = &mut plane[oy * wo..(oy + 1) * wo];
                            for ix in ix0..ix1 {
                                yrow[ix * stride + kx - pad] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn batch_norm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    buffer_offset: usize,
    bn: &mut BnMode<'_>,
) -> (Tensor, Cache) {
    let s = x.shape;
    let c = s.c;
    let plane = s.h * s.w;
    let m = (x.n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let batch_stats = !matches!(bn, BnMode::Running(_));
    match bn {
        BnMode::Running(running) => {
            mean.copy_from_slice(&running[buffer_offset..buffer_offset + c]);
            var.copy_from_slice(&running[buffer_offset + c..buffer_offset + 2 * c]);
        }
        _ => {
            for ch in 0..c {
                let mut sum = 0.0;
                for n in 0..x.n {
                    sum += x.sample(n)[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                }
                let mu = sum / m;
                let mut sq = 0.0;
                for n in 0..x.n {
                    sq += x.sample(n)[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / m;
            }
            if let BnMode::BatchTracking { running, momentum } = bn {
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let rm = &mut running[buffer_offset + ch];
                    *rm = (1.0 - *momentum) * *rm + *momentum * mean[ch];
                    let rv = &mut running[buffer_offset + c + ch];
                    *rv = (1.0 - *momentum) * *rv + *momentum * var[ch] * unbias;
                }
            }
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / sqrt(v + BN_EPS)).collect();
    let mut xhat = vec![0.0; x.data.len()];
    let mut out = Tensor::zeros(x.n, s);
    for n in 0..x.n {
        let base = n * s.len();
        for ch in 0..c {
            for j in 0..plane {
                let idx = base + ch * plane + j;
                let xh = (x.data[idx] - mean[ch]) * inv_std[ch];
                xhat[idx] = xh;
                out.data[idx] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, Cache::Bn { xhat, inv_std, batch_stats })
}

fn max_pool_forward(x: &Tensor, out_shape: Shape3) -> (Tensor, Vec<u32>) {
    let s = x.shape;
    let mut out = Tensor::zeros(x.n, out_shape);
    let mut idx = vec![0u32; out.data.len()];
    for n in 0..x.n {
        let xb = n * s.len();
        let ob = n * out_shape.len();
        for ch in 0..s.c {
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut best = xb + ch * s.h * s.w + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = xb + ch * s.h * s.w + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if x.data[cand] > x.data[best] {
                            best = cand;
                        }
                    }
                    let o = ob + (ch * out_shape.h + oy) * out_shape.w + ox;
                    out.data[o] = x.data[best];
                    idx[o] = best as u32;
                }
            }
        }
    }
    (out, idx)
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    layer: &Layer,
    slot: &Slot,
    p: &[f64],
    input: &Tensor,
    output: &Tensor,
    cache: &Cache,
    g: &Tensor,
    gp: &mut [f64],
) -> Tensor {
    let s = slot.input;
    match *layer {
        Layer::Dense { outputs } => {
            let inputs = s.len();
            let (w, _) = p.split_at(outputs * inputs);
            let (gw, gb) = gp.split_at_mut(outputs * inputs);
            let mut gx = Tensor::zeros(input.n, s);
            for n in 0..input.n {
                let xi = input.sample(n);
                let gy = g.sample(n);
                let gxi = gx.sample_mut(n);
                for o in 0..outputs {
                    let d = gy[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for i in 0..inputs {
                        grow[i] += d * xi[i];
                        gxi[i] += d * row[i];
                    }
                }
            }
            gx
        }
        Layer::Conv2d { out_ch, kernel: k, stride, pad, bias } => {
            let nw = out_ch * s.c * k * k;
            let (w, _) = p.split_at(nw);
            let (gw, gb) = gp.split_at_mut(nw);
            let o = slot.output;
            let (ho, wo) = (o.h, o.w);
            let mut gx = Tensor::zeros(input.n, s);
            for n in 0..input.n {
                let xin = input.sample(n);
                let gy = g.sample(n);
                let gxn = gx.sample_mut(n);
                for co in 0..out_ch {
                    let gplane = &gy[co * ho * wo..(co + 1) * ho * wo];
                    if bias {
                        gb[co] += gplane.iter().sum::<f64>();
                    }
                    for ci in 0..s.c {
                        let xp = &xin[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                        let gxp = &mut gxn[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                        for ky in 0..k {
                            let (oy0, oy1) = valid_range(s.h, ho, ky, stride, pad);
                            for kx in 0..k {
                                let wi = ((co * s.c + ci) * k + ky) * k + kx;
                                let wv = w[wi];
                                let (ox0, ox1) = valid_range(s.w, wo, kx, stride, pad);
                                let mut acc = 0.0;
                                for oy in oy0..oy1 {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &gplane[oy * wo..(oy + 1) * wo];
                                    let xrow = &xp[iy * s.w..(iy + 1) * s.w];
                                    let gxrow = &mut gxp[iy * s.w..(iy + 1) * s.w];
                                    for ox in ox0..ox1 {
                                        let ix = ox * stride + kx - pad;
                                        acc += grow[ox] * xrow[ix];
                                        gxrow[ix] += wv * grow[ox];
                                    }
                                }
                                gw[wi] += acc;
                            }
                        }
                    }
                }
            }
            gx
        }
        Layer::ConvTranspose2d { out_ch, kernel: k, stride, pad, bias } => {
            let nw = s.c * out_ch * k * k;
            let (w, _) = p.split_at(nw);
            let (gw, gb) = gp.split_at_mut(nw);
            let o = slot.output;
            let (ho, wo) = (o.h, o.w);
            let mut gx = Tensor::zeros(input.n, s);
            for n in 0..input.n {
                let xin = input.sample(n);
                let gy = g.sample(n);
                let gxn = gx.sample_mut(n);
                if bias {
                    for co in 0..out_ch {
                        gb[co] += gy[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                    }
                }
                for ci in 0..s.c {
                    let xp = &xin[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                    let gxp = &mut gxn[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                    for co in 0..out_ch {
                        let gplane = &gy[co * ho * wo..(co + 1) * ho * wo];
                        for ky in 0..k {
                            let (iy0, iy1) = valid_range(ho, s.h, ky, stride, pad);
                            for kx in 0..k {
                                let wi = ((ci * out_ch + co) * k + ky) * k + kx;
                                let wv = w[wi];
                                let (ix0, ix1) = valid_range(wo, s.w, kx, stride, pad);
                                let mut acc = 0.0;
                                for iy in iy0..iy1 {
                                    let oy = iy * stride + ky - pad;
                                    let grow = &gplane[oy * wo..(oy + 1) * wo];
                                    let xrow = &xp[iy * s.w..(iy + 1) * s.w];
                                    let gxrow = &mut gxp[iy * s.w..(iy + 1) * s.w];
                                    for ix in ix0..ix1 {
                                        let gv = grow[ix * stride + kx - pad];
                                        acc += gv * xrow[ix];
                                        gxrow[ix] += wv * gv;
                                    }
                                }
                                gw[wi] += acc;
                            }
                        }
                    }
                }
            }
            gx
        }
        Layer::BatchNorm => {
            let Cache::Bn { xhat, inv_std, batch_stats } = cache else {
                unreachable!("batch norm without cache")
            };
            let c = s.c;
            let plane = s.h * s.w;
            let m = (input.n * plane) as f64;
            let (gamma, _) = p.split_at(c);
            let (ggamma, gbeta) = gp.split_at_mut(c);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for n in 0..input.n {
                let base = n * s.len();
                for ch in 0..c {
                    for j in 0..plane {
                        let idx = base + ch * plane + j;
                        sum_g[ch] += g.data[idx];
                        sum_gx[ch] += g.data[idx] * xhat[idx];
                    }
                }
            }
            for ch in 0..c {
                ggamma[ch] += sum_gx[ch];
                gbeta[ch] += sum_g[ch];
            }
            let mut gx = Tensor::zeros(input.n, s);
            for n in 0..input.n {
                let base = n * s.len();
                for ch in 0..c {
                    let scale = gamma[ch] * inv_std[ch];
                    for j in 0..plane {
                        let idx = base + ch * plane + j;
                        gx.data[idx] = if *batch_stats {
                            scale * (g.data[idx] - sum_g[ch] / m - xhat[idx] * sum_gx[ch] / m)
                        } else {
                            scale * g.data[idx]
                        };
                    }
                }
            }
            gx
        }
        Layer::Relu => zip_map(input, g, |x, d| if x > 0.0 { d } else { 0.0 }),
        Layer::LeakyRelu { slope } => zip_map(input, g, |x, d| if x > 0.0 { d } else { slope * d }),
        Layer::Tanh => zip_map(output, g, |y, d| d * (1.0 - y * y)),
        Layer::MaxPool2 => {
            let Cache::Pool(idx) = cache else { unreachable!("pool without cache") };
            let mut gx = Tensor::zeros(input.n, s);
            for (o, &i) in idx.iter().enumerate() {
                gx.data[i as usize] += g.data[o];
            }
            gx
        }
    }
}

fn zip_map(a: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        n: g.n,
        shape: g.shape,
        data: a.data.iter().zip(&g.data).map(|(&x, &d)| f(x, d)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn random_tensor(rng: &mut Rng, n: usize, s: Shape3) -> Tensor {
        Tensor::from_vec(n, s, (0..n * s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Checks every parameter and input gradient of `sum(out * weights)`
    /// against central differences.
    fn grad_check(net: &Network, n: usize, seed: u64) {
        let mut rng = rng_from(seed);
        let params = net.init_params(&mut rng, Init::FanIn);
        let params: Vec<f64> = params.iter().map(|p| p + rng.gen_range(-0.3..0.3)).collect();
        let x = random_tensor(&mut rng, n, net.input_shape());
        let out_shape = net.output_shape();
        let weights: Vec<f64> = (0..n * out_shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &[f64], x: &Tensor| -> f64 {
            let y = net.predict(p, x, BnMode::Batch).unwrap();
            y.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let tape = net.forward(&params, x.clone(), BnMode::Batch).unwrap();
        let mut gp = vec![0.0; net.param_count()];
        let gx = net.backward(&params, &tape, Tensor::from_vec(n, out_shape, weights.clone()), &mut gp);
        let h = 1e-6;
        let mut num = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let up = objective(&p, &x);
            p[i] -= 2.0 * h;
            let down = objective(&p, &x);
            num[i] = (up - down) / (2.0 * h);
        }
        let err = crate::math::norm(&gp.iter().zip(&num).map(|(a, b)| a - b).collect::<Vec<_>>());
        let scale = crate::math::norm(&gp).max(crate::math::norm(&num));
        assert!(err / scale < 1e-6, "param grad rel err {}", err / scale);
        let mut numx = vec![0.0; x.data.len()];
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = objective(&params, &xp);
            xp.data[i] -= 2.0 * h;
            let down = objective(&params, &xp);
            numx[i] = (up - down) / (2.0 * h);
        }
        let err = crate::math::norm(&gx.data.iter().zip(&numx).map(|(a, b)| a - b).collect::<Vec<_>>());
        let scale = crate::math::norm(&gx.data).max(crate::math::norm(&numx));
        assert!(err / scale < 1e-6, "input grad rel err {}", err / scale);
    }

    #[test]
    fn conv_pool_dense_gradients() {
        let net = Network::new(
            Shape3::new(2, 6, 6),
            vec![
                Layer::Conv2d { out_ch: 3, kernel: 3, stride: 1, pad: 1, bias: true },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Dense { outputs: 4 },
                Layer::Tanh,
            ],
        )
        .unwrap();
        grad_check(&net, 3, 1);
    }

    #[test]
    fn strided_conv_batch_norm_gradients() {
        let net = Network::new(
            Shape3::new(3, 8, 8),
            vec![
                Layer::Conv2d { out_ch: 4, kernel: 4, stride: 2, pad: 1, bias: false },
                Layer::BatchNorm,
                Layer::LeakyRelu { slope: 0.2 },
                Layer::Conv2d { out_ch: 1, kernel: 4, stride: 1, pad: 0, bias: true },
            ],
        )
        .unwrap();
        assert_eq!(net.output_shape(), Shape3::new(1, 1, 1));
        grad_check(&net, 4, 2);
    }

    #[test]
    fn transposed_conv_gradients() {
        let net = Network::new(
            Shape3::new(5, 1, 1),
            vec![
                Layer::ConvTranspose2d { out_ch: 4, kernel: 4, stride: 1, pad: 0, bias: false },
                Layer::BatchNorm,
                Layer::Relu,
                Layer::ConvTranspose2d { out_ch: 2, kernel: 4, stride: 2, pad: 1, bias: true },
                Layer::Tanh,
            ],
        )
        .unwrap();
        assert_eq!(net.output_shape(), Shape3::new(2, 8, 8));
        grad_check(&net, 3, 3);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> with shared weights and no bias.
        let mut rng = rng_from(9);
        let (cin, cout, k, stride, pad) = (2, 3, 4, 2, 1);
        let w: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = random_tensor(&mut rng, 1, Shape3::new(cin, 8, 8));
        let conv_out = Shape3::new(cout, 4, 4);
        let y = random_tensor(&mut rng, 1, conv_out);
        let cx = conv_forward(&x, &w, None, conv_out, k, stride, pad);
        // conv weight [co][ci] reinterpreted as transpose weight [in=co][out=ci]
        let ty = conv_transpose_forward(&y, &w, None, Shape3::new(cin, 8, 8), k, stride, pad);
        let lhs = crate::math::dot(&cx.data, &y.data);
        let rhs = crate::math::dot(&x.data, &ty.data);
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn running_stats_track_batch_moments() {
        let net = Network::new(Shape3::new(1, 2, 2), vec![Layer::BatchNorm]).unwrap();
        let params = net.init_params(&mut rng_from(0), Init::FanIn);
        let mut running = net.init_buffers();
        let x = Tensor::from_vec(2, Shape3::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        net.predict(&params, &x, BnMode::BatchTracking { running: &mut running, momentum: 1.0 })
            .unwrap();
        assert!((running[0] - 4.5).abs() < 1e-12);
        assert!((running[1] - 6.0).abs() < 1e-12); // unbiased variance of 1..8
    }
}
