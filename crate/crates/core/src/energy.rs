//! Zero-skipping accelerator cost model.
//!
//! Every layer is charged for multiply-accumulates, cheap element operations
//! (comparisons, adds) and memory accesses. The worst case is a dense
//! accelerator that performs all of them; the average case skips:
//!
//! * multiplications whose activation operand is exactly `0.0`;
//! * element-wise activation ops whose produced value is `0.0`;
//! * pooling windows whose inputs are all `0.0`;
//! * reads and writes of zero-valued activations.
//!
//! Parameter fetches are never skipped. Convolution taps that land on zero
//! padding are not real multiplications and are counted in neither case.
//!
//! The reported metric is the energy ratio `avg / worst` in `(0, 1]`; a sponge
//! attack pushes it toward 1.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerSpec, ModelGraph};
use crate::tensor::Tensor;

/// Energy units charged per counted event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    pub mac_energy: f64,
    pub simple_op_energy: f64,
    pub mem_access_energy: f64,
}

impl Default for CostConstants {
    fn default() -> Self {
        CostConstants { mac_energy: 1.0, simple_op_energy: 0.25, mem_access_energy: 50.0 }
    }
}

impl CostConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mac_energy, self.simple_op_energy, self.mem_access_energy];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::domain(format!("cost constants must be positive, got {self:?}")))
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        CostConstants {
            mac_energy: self.mac_energy * c,
            simple_op_energy: self.simple_op_energy * c,
            mem_access_energy: self.mem_access_energy * c,
        }
    }
}

/// Operation and memory-access counts of one layer for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub mults_total: u64,
    pub mults_performed: u64,
    pub simple_ops_total: u64,
    pub simple_ops_performed: u64,
    pub param_accesses: u64,
    pub activation_accesses_total: u64,
    pub activation_accesses_performed: u64,
}

impl LayerCounts {
    pub fn worst_energy(&self, k: &CostConstants) -> f64 {
        k.mac_energy * self.mults_total as f64
            + k.simple_op_energy * self.simple_ops_total as f64
            + k.mem_access_energy * (self.param_accesses + self.activation_accesses_total) as f64
    }

    pub fn avg_energy(&self, k: &CostConstants) -> f64 {
        k.mac_energy * self.mults_performed as f64
            + k.simple_op_energy * self.simple_ops_performed as f64
            + k.mem_access_energy * (self.param_accesses + self.activation_accesses_performed) as f64
    }

    /// Average-case energy spent on arithmetic only.
    pub fn avg_compute_energy(&self, k: &CostConstants) -> f64 {
        k.mac_energy * self.mults_performed as f64 + k.simple_op_energy * self.simple_ops_performed as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: String,
    pub kind: String,
    #[serde(flatten)]
    pub counts: LayerCounts,
    pub worst_energy: f64,
    pub avg_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub worst_total: f64,
    pub avg_total: f64,
    pub ratio: f64,
}

impl EnergyReport {
    pub fn from_counts(model: &ModelGraph, counts: &[LayerCounts], k: &CostConstants) -> Result<Self> {
        k.validate()?;
        let layers: Vec<LayerEnergy> = model
            .layers
            .iter()
            .zip(counts)
            .map(|(l, c)| LayerEnergy {
                layer: l.name.clone(),
                kind: l.kind.label().to_string(),
                counts: *c,
                worst_energy: c.worst_energy(k),
                avg_energy: c.avg_energy(k),
            })
            .collect();
        let worst_total: f64 = layers.iter().map(|l| l.worst_energy).sum();
        let avg_total: f64 = layers.iter().map(|l| l.avg_energy).sum();
        if worst_total <= 0.0 {
            return Err(Error::domain("worst-case energy is zero (empty model?)"));
        }
        Ok(EnergyReport { layers, worst_total, avg_total, ratio: avg_total / worst_total })
    }

    /// One CSV row per layer.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "layer",
            "kind",
            "mults_total",
            "mults_performed",
            "simple_ops_total",
            "simple_ops_performed",
            "param_accesses",
            "activation_accesses_total",
            "activation_accesses_performed",
            "worst_energy",
            "avg_energy",
        ])?;
        for l in &self.layers {
            let c = &l.counts;
            wr.write_record([
                l.layer.clone(),
                l.kind.clone(),
                c.mults_total.to_string(),
                c.mults_performed.to_string(),
                c.simple_ops_total.to_string(),
                c.simple_ops_performed.to_string(),
                c.param_accesses.to_string(),
                c.activation_accesses_total.to_string(),
                c.activation_accesses_performed.to_string(),
                l.worst_energy.to_string(),
                l.avg_energy.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn nnz(t: &Tensor) -> u64 {
    t.count_nonzero() as u64
}

fn layer_param_count(model: &ModelGraph, layer: &LayerSpec) -> u64 {
    layer
        .kind
        .param_names()
        .iter()
        .map(|p| model.params.get(*p).map_or(0, |t| t.numel() as u64))
        .sum()
}

/// Number of (output, kernel-offset) pairs along one axis that read input
/// coordinate `i`.
fn axis_usage(size: usize, kernel: usize, stride: usize, padding: usize, out: usize) -> Vec<u64> {
    let mut use_count = vec![0u64; size];
    for o in 0..out {
        for k in 0..kernel {
            let i = (o * stride + k) as isize - padding as isize;
            if i >= 0 && (i as usize) < size {
                use_count[i as usize] += 1;
            }
        }
    }
    use_count
}

/// Counts for one layer given the activations recorded around it.
pub fn count_layer(model: &ModelGraph, layer: &LayerSpec, input: &Tensor, output: &Tensor) -> Result<LayerCounts> {
    let mut c = LayerCounts {
        param_accesses: layer_param_count(model, layer),
        activation_accesses_total: (input.numel() + output.numel()) as u64,
        activation_accesses_performed: nnz(input) + nnz(output),
        ..Default::default()
    };
    match &layer.kind {
        LayerKind::Dense { weight, .. } => {
            let out = model.param(weight)?.shape()[0] as u64;
            c.mults_total = out * input.numel() as u64;
            c.mults_performed = out * nnz(input);
        }
        LayerKind::Conv2d { weight, stride, padding, .. } => {
            let [k, _, r, s] = *model.param(weight)?.shape() else {
                return Err(Error::dim("conv2d weight must be 4-d"));
            };
            let [b, ch, h, w] = *input.shape() else {
                return Err(Error::dim("conv2d input must be 4-d"));
            };
            let (oh, ow) = (output.shape()[2], output.shape()[3]);
            let uy = axis_usage(h, r, *stride, *padding, oh);
            let ux = axis_usage(w, s, *stride, *padding, ow);
            let per_plane: u64 = uy.iter().sum::<u64>() * ux.iter().sum::<u64>();
            c.mults_total = (b * ch) as u64 * k as u64 * per_plane;
            let x = input.data();
            let mut performed = 0u64;
            for plane in 0..b * ch {
                for iy in 0..h {
                    for ix in 0..w {
                        if x[(plane * h + iy) * w + ix] != 0.0 {
                            performed += uy[iy] * ux[ix];
                        }
                    }
                }
            }
            c.mults_performed = k as u64 * performed;
        }
        LayerKind::BatchNorm { .. } => {
            c.mults_total = input.numel() as u64;
            c.mults_performed = nnz(input);
        }
        LayerKind::Relu | LayerKind::LeakyRelu { .. } | LayerKind::Tanh => {
            c.simple_ops_total = input.numel() as u64;
            c.simple_ops_performed = nnz(output);
        }
        LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
            let [b, ch, h, w] = *input.shape() else {
                return Err(Error::dim("pool input must be 4-d"));
            };
            let (oh, ow) = (output.shape()[2], output.shape()[3]);
            let area = (window * window) as u64;
            let x = input.data();
            let mut live = 0u64;
            for plane in 0..b * ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let any = (0..*window).any(|ky| {
                            (0..*window).any(|kx| x[(plane * h + oy * stride + ky) * w + ox * stride + kx] != 0.0)
                        });
                        live += any as u64;
                    }
                }
            }
            c.simple_ops_total = (b * ch * oh * ow) as u64 * area;
            c.simple_ops_performed = live * area;
        }
    }
    Ok(c)
}

/// Dense-accelerator counts derived from shapes alone; performed counts equal
/// the totals.
pub fn count_worst_case(model: &ModelGraph, batch: usize) -> Result<Vec<LayerCounts>> {
    let shapes = model.validate()?;
    let mut in_shape: Vec<usize> = std::iter::once(batch).chain(model.input_shape.iter().copied()).collect();
    let mut out = Vec::with_capacity(model.layers.len());
    for (layer, s) in model.layers.iter().zip(shapes) {
        let out_shape: Vec<usize> = std::iter::once(batch).chain(s).collect();
        let n_in: u64 = in_shape.iter().product::<usize>() as u64;
        let n_out: u64 = out_shape.iter().product::<usize>() as u64;
        let mut c = LayerCounts {
            param_accesses: layer_param_count(model, layer),
            activation_accesses_total: n_in + n_out,
            ..Default::default()
        };
        match &layer.kind {
            LayerKind::Dense { weight, .. } => {
                c.mults_total = model.param(weight)?.shape()[0] as u64 * n_in;
            }
            LayerKind::Conv2d { weight, stride, padding, .. } => {
                let ws = model.param(weight)?.shape();
                let (k, r, s) = (ws[0], ws[2], ws[3]);
                let (h, w) = (in_shape[2], in_shape[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let uy: u64 = axis_usage(h, r, *stride, *padding, oh).iter().sum();
                let ux: u64 = axis_usage(w, s, *stride, *padding, ow).iter().sum();
                c.mults_total = (batch * in_shape[1] * k) as u64 * uy * ux;
            }
            LayerKind::BatchNorm { .. } => c.mults_total = n_in,
            LayerKind::Relu | LayerKind::LeakyRelu { .. } | LayerKind::Tanh => c.simple_ops_total = n_in,
            LayerKind::MaxPool { window, .. } | LayerKind::AvgPool { window, .. } => {
                c.simple_ops_total = n_out * (window * window) as u64;
            }
        }
        c.mults_performed = c.mults_total;
        c.simple_ops_performed = c.simple_ops_total;
        c.activation_accesses_performed = c.activation_accesses_total;
        out.push(c);
        in_shape = out_shape;
    }
    Ok(out)
}

/// Zero-skipping counts from one recorded inference pass over `batch_input`.
pub fn count_average_case(model: &ModelGraph, batch_input: &Tensor) -> Result<Vec<LayerCounts>> {
    let trace = model.forward_trace(batch_input)?;
    model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| count_layer(model, l, trace.layer_input(i), &trace.outputs[i]))
        .collect()
}

/// Average-over-worst energy ratio for one batch.
pub fn energy_ratio(model: &ModelGraph, batch_input: &Tensor, k: &CostConstants) -> Result<EnergyReport> {
    let counts = count_average_case(model, batch_input)?;
    EnergyReport::from_counts(model, &counts, k)
}

/// Mean of per-batch energy ratios.
pub fn mean_energy_ratio(model: &ModelGraph, batches: &[Tensor], k: &CostConstants) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::domain("mean energy ratio over an empty dataset"));
    }
    let mut sum = 0.0;
    for b in batches {
        sum += energy_ratio(model, b, k)?.ratio;
    }
    Ok(sum / batches.len() as f64)
}

/// Percentage increase `100 (attacked - clean) / clean`.
pub fn ratio_increase(clean: f64, attacked: f64) -> Result<f64> {
    if !(clean > 0.0) || !clean.is_finite() {
        return Err(Error::domain(format!("clean ratio must be positive, got {clean}")));
    }
    if !(attacked > 0.0 && attacked <= 1.0) || clean > 1.0 {
        return Err(Error::domain(format!("ratios must lie in (0, 1], got {clean} and {attacked}")));
    }
    Ok(100.0 * (attacked - clean) / clean)
}
