//! Independent reference implementations used by the integration tests:
//! straight-loop f64 forward passes, per-multiplication energy enumeration
//! and random toy-model generation.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use skipsponge_core::energy::CostConstants;
use skipsponge_core::model::builder::{build, LayerTemplate as T};
use skipsponge_core::model::{LayerKind, ModelGraph};
use skipsponge_core::rng::{rng, Rng as CoreRng};
use skipsponge_core::Tensor;

pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_f64(model: &ModelGraph) -> Params {
    model
        .params
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Activation tensor in f64 with its shape `[batch, ...]`.
#[derive(Debug, Clone)]
pub struct Act {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Act {
    pub fn from_tensor(t: &Tensor) -> Self {
        Act { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v as f64).collect() }
    }
}

/// Pattern of discrete choices taken by a forward pass (ReLU signs and
/// max-pool winners); finite differences are only valid where it is stable.
pub type Pattern = Vec<u32>;

/// Forward pass through every layer with explicit loops in f64. Returns all
/// layer outputs and the branch pattern.
pub fn forward(model: &ModelGraph, p: &Params, input: &Act) -> (Vec<Act>, Pattern) {
    let mut outs = Vec::new();
    let mut pattern = Vec::new();
    let mut x = input.clone();
    for layer in &model.layers {
        let b = x.shape[0];
        let y = match &layer.kind {
            LayerKind::Dense { weight, bias } => {
                let w = &p[weight];
                let inner: usize = x.shape[1..].iter().product();
                let out = w.len() / inner;
                let mut y = vec![0.0; b * out];
                for bi in 0..b {
                    for o in 0..out {
                        let mut acc = bias.as_ref().map_or(0.0, |n| p[n][o]);
                        for i in 0..inner {
                            acc += w[o * inner + i] * x.data[bi * inner + i];
                        }
                        y[bi * out + o] = acc;
                    }
                }
                Act { shape: vec![b, out], data: y }
            }
            LayerKind::Conv2d { weight, bias, stride, padding } => {
                let ws = model.params[weight].shape();
                let (k, c, r, s) = (ws[0], ws[1], ws[2], ws[3]);
                let (h, w) = (x.shape[2], x.shape[3]);
                let oh = (h + 2 * padding - r) / stride + 1;
                let ow = (w + 2 * padding - s) / stride + 1;
                let wt = &p[weight];
                let mut y = vec![0.0; b * k * oh * ow];
                for bi in 0..b {
                    for ko in 0..k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias.as_ref().map_or(0.0, |n| p[n][ko]);
                                for ci in 0..c {
                                    for ky in 0..r {
                                        for kx in 0..s {
                                            let iy = (oy * stride + ky) as isize - *padding as isize;
                                            let ix = (ox * stride + kx) as isize - *padding as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                                            acc += x.data[xi] * wt[((ko * c + ci) * r + ky) * s + kx];
                                        }
                                    }
                                }
                                y[((bi * k + ko) * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
                Act { shape: vec![b, k, oh, ow], data: y }
            }
            LayerKind::Relu => {
                pattern.extend(x.data.iter().map(|&v| (v > 0.0) as u32));
                Act { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
            }
            LayerKind::LeakyRelu { slope } => {
                pattern.extend(x.data.iter().map(|&v| (v > 0.0) as u32));
                let s = *slope as f64;
                Act { shape: x.shape.clone(), data: x.data.iter().map(|&v| if v > 0.0 { v } else { s * v }).collect() }
            }
            LayerKind::Tanh => Act { shape: x.shape.clone(), data: x.data.iter().map(|v| v.tanh()).collect() },
            LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
                let is_max = matches!(layer.kind, LayerKind::MaxPool { .. });
                let (c, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let mut y = Vec::new();
                for plane in 0..b * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut vals = Vec::new();
                            for ky in 0..*window {
                                for kx in 0..*window {
                                    vals.push(x.data[plane * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                                }
                            }
                            if is_max {
                                let (arg, best) = vals.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                                    if v > acc.1 {
                                        (i, v)
                                    } else {
                                        acc
                                    }
                                });
                                pattern.push(arg as u32);
                                y.push(best);
                            } else {
                                y.push(vals.iter().sum::<f64>() / vals.len() as f64);
                            }
                        }
                    }
                }
                Act { shape: vec![b, c, oh, ow], data: y }
            }
            LayerKind::BatchNorm { gamma, beta, running_mean, running_var, eps } => {
                let c = x.shape[1];
                let spatial = x.data.len() / (b * c);
                let data = x
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / spatial) % c;
                        let inv = 1.0 / (p[running_var][ch] + *eps as f64).sqrt();
                        p[gamma][ch] * (v - p[running_mean][ch]) * inv + p[beta][ch]
                    })
                    .collect();
                Act { shape: x.shape.clone(), data }
            }
        };
        outs.push(y.clone());
        x = y;
    }
    (outs, pattern)
}

/// Mean softmax cross-entropy in f64.
pub fn cross_entropy(logits: &Act, labels: &[usize]) -> f64 {
    let b = logits.shape[0];
    let n = logits.data.len() / b;
    let mut total = 0.0;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &logits.data[bi * n..(bi + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / b as f64
}

/// Exact operation counts of one layer, tallied one multiplication, one
/// element op and one memory access at a time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub mults_total: u64,
    pub mults_performed: u64,
    pub simple_total: u64,
    pub simple_performed: u64,
    pub params: u64,
    pub acts_total: u64,
    pub acts_performed: u64,
}

impl Tally {
    pub fn worst(&self, k: &CostConstants) -> f64 {
        self.mults_total as f64 * k.mac_energy
            + self.simple_total as f64 * k.simple_op_energy
            + (self.params + self.acts_total) as f64 * k.mem_access_energy
    }

    pub fn avg(&self, k: &CostConstants) -> f64 {
        self.mults_performed as f64 * k.mac_energy
            + self.simple_performed as f64 * k.simple_op_energy
            + (self.params + self.acts_performed) as f64 * k.mem_access_energy
    }
}

/// Enumerates every multiplication of every layer on the model's recorded
/// activations.
pub fn brute_force_tally(model: &ModelGraph, input: &Tensor) -> Vec<Tally> {
    let trace = model.forward_trace(input).unwrap();
    let mut out = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        let x = trace.layer_input(li);
        let y = &trace.outputs[li];
        let xd = x.data();
        let mut t = Tally::default();
        for name in layer.kind.param_names() {
            t.params += model.params[name].numel() as u64;
        }
        for &v in xd.iter().chain(y.data()) {
            t.acts_total += 1;
            t.acts_performed += (v != 0.0) as u64;
        }
        match &layer.kind {
            LayerKind::Dense { weight, .. } => {
                let out_n = model.params[weight].shape()[0];
                let inner = x.row_len();
                for bi in 0..x.batch() {
                    for _o in 0..out_n {
                        for i in 0..inner {
                            t.mults_total += 1;
                            t.mults_performed += (xd[bi * inner + i] != 0.0) as u64;
                        }
                    }
                }
            }
            LayerKind::Conv2d { weight, stride, padding, .. } => {
                let ws = model.params[weight].shape();
                let (k, c, r, s) = (ws[0], ws[1], ws[2], ws[3]);
                let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (y.shape()[2], y.shape()[3]);
                for bi in 0..b {
                    for _ko in 0..k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                for ci in 0..c {
                                    for ky in 0..r {
                                        for kx in 0..s {
                                            let iy = (oy * stride + ky) as isize - *padding as isize;
                                            let ix = (ox * stride + kx) as isize - *padding as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            t.mults_total += 1;
                                            let v = xd[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                            t.mults_performed += (v != 0.0) as u64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::BatchNorm { .. } => {
                for &v in xd {
                    t.mults_total += 1;
                    t.mults_performed += (v != 0.0) as u64;
                }
            }
            LayerKind::Relu | LayerKind::LeakyRelu { .. } | LayerKind::Tanh => {
                for &v in y.data() {
                    t.simple_total += 1;
                    t.simple_performed += (v != 0.0) as u64;
                }
            }
            LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
                let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oh, ow) = (y.shape()[2], y.shape()[3]);
                for plane in 0..b * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut live = false;
                            for ky in 0..*window {
                                for kx in 0..*window {
                                    live |= xd[plane * h * w + (oy * stride + ky) * w + ox * stride + kx] != 0.0;
                                }
                            }
                            for _ in 0..window * window {
                                t.simple_total += 1;
                                t.simple_performed += live as u64;
                            }
                        }
                    }
                }
            }
        }
        out.push(t);
    }
    out
}

/// A random model of at most four layers over a small image input, with
/// every parameter redrawn so that batch-norm statistics are non-trivial.
pub fn random_model(seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    loop {
        let c = r.random_range(1..=3usize);
        let h = r.random_range(4..=7usize);
        let w = r.random_range(4..=7usize);
        let n = r.random_range(1..=4usize);
        let mut spatial = true;
        let mut size = h.min(w);
        let mut templates = Vec::new();
        for i in 0..n {
            let last = i + 1 == n;
            let pick = r.random_range(0..8u32);
            let t = match pick {
                0 | 1 if spatial => {
                    let kernel = r.random_range(1..=3usize.min(size));
                    let padding = r.random_range(0..=1usize);
                    let stride = r.random_range(1..=2usize);
                    size = (size + 2 * padding - kernel) / stride + 1;
                    T::Conv2d { out_channels: r.random_range(1..=4), kernel, stride, padding, bias: r.random_bool(0.8) }
                }
                2 => T::Relu,
                3 if spatial && size >= 2 => {
                    size = (size - 2) / 2 + 1;
                    if r.random_bool(0.5) {
                        T::MaxPool { window: 2, stride: 2 }
                    } else {
                        T::AvgPool { window: 2, stride: 2 }
                    }
                }
                4 if spatial => T::BatchNorm { eps: 1e-5 },
                5 => T::LeakyRelu { slope: 0.1 },
                6 => T::Tanh,
                _ if last || !spatial || pick == 7 => {
                    spatial = false;
                    T::Dense { out: r.random_range(1..=5), bias: r.random_bool(0.8) }
                }
                _ => T::Relu,
            };
            templates.push(t);
        }
        let Ok(mut m) = build(&[c, h, w], &templates, seed) else { continue };
        if m.validate().is_err() {
            continue;
        }
        randomize_params(&mut m, &mut r);
        return m;
    }
}

pub fn randomize_params(m: &mut ModelGraph, r: &mut CoreRng) {
    for (name, t) in m.params.iter_mut() {
        let var = name.ends_with("running_var");
        for v in t.data_mut() {
            *v = if var { r.random_range(0.5..1.5) } else { r.random_range(-1.0..1.0) };
        }
    }
}

/// Random input batch where roughly `zero_frac` of the entries are exactly 0.
pub fn random_input(model: &ModelGraph, batch: usize, zero_frac: f64, r: &mut impl Rng) -> Tensor {
    let shape: Vec<usize> = std::iter::once(batch).chain(model.input_shape.iter().copied()).collect();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if r.random_bool(zero_frac) { 0.0 } else { r.random_range(-1.0f32..1.0) })
        .collect();
    Tensor::new(shape, data).unwrap()
}
