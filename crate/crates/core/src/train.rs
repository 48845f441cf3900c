//! Mini-batch SGD with momentum and L2 weight decay, optionally carrying the
//! sponge term on a fixed subset of samples.

use std::collections::BTreeMap;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::evaluate_performance;
use crate::autodiff::{Gradient, Tape, Var};
use crate::data::Dataset;
use crate::energy::{mean_energy_ratio, CostConstants};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::profiler::fired_neuron_fractions;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Cross-entropy training, accuracy evaluation.
    Classification,
    /// Mean-squared reconstruction of the input, SSIM evaluation.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: Task,
}

fn default_momentum() -> f32 {
    0.9
}

fn default_task() -> Task {
    Task::Classification
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// SGD with classical momentum; weight decay is added to the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut ModelGraph, grads: &[Gradient]) -> Result<()> {
        for g in grads {
            let param = model.param_mut(&g.param)?;
            if param.shape() != g.value.shape() {
                return Err(Error::dim(format!("gradient shape mismatch for '{}'", g.param)));
            }
            let v = self
                .velocity
                .entry(g.param.clone())
                .or_insert_with(|| vec![0.0; g.value.numel()]);
            for ((p, &gr), vel) in param.data_mut().iter_mut().zip(g.value.data()).zip(v.iter_mut()) {
                let d = gr + self.weight_decay * *p;
                *vel = self.momentum * *vel + d;
                *p -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

/// Sponge term attached to flagged samples: the objective becomes
/// `task_loss - lambda * E`, with `E` the smooth non-zero count summed over
/// every layer output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpongeTerm {
    pub lambda: f32,
    pub sigma_l0: f32,
    /// Divide `E` by the number of layer-output elements per sample.
    pub normalize: bool,
}

/// Scalar parts of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f32,
    pub task: f32,
    /// Batch-mean sponge energy of flagged samples; 0 when none are flagged.
    pub sponge: f32,
}

pub(crate) struct Recorded {
    pub loss: Var,
    pub value: ObjectiveValue,
}

/// Records the training objective on `tape`. `flags[i]` marks sample `i` of
/// the batch as sponge-carrying.
pub(crate) fn record_objective(
    tape: &mut Tape,
    model: &ModelGraph,
    x: &Tensor,
    labels: Option<&[usize]>,
    task: Task,
    sponge: Option<(&SpongeTerm, &[bool])>,
) -> Result<Recorded> {
    let fwd = model.forward_tape(tape, x)?;
    let out = fwd.output();
    let task_loss = match task {
        Task::Classification => {
            let labels = labels.ok_or_else(|| Error::Config("classification needs labels".into()))?;
            tape.softmax_cross_entropy(out, labels)?
        }
        Task::Reconstruction => tape.mse(out, x)?,
    };
    let task_value = tape.value(task_loss).data()[0];
    let mut value = ObjectiveValue { total: task_value, task: task_value, sponge: 0.0 };
    let mut loss = task_loss;

    if let Some((term, flags)) = sponge {
        if flags.len() != x.batch() {
            return Err(Error::dim("sponge flags must match the batch"));
        }
        if flags.iter().any(|&f| f) && term.lambda != 0.0 {
            let mut b = x.batch() as f32;
            if term.normalize {
                b *= fwd.outputs.iter().map(|&o| tape.value(o).row_len()).sum::<usize>() as f32;
            }
            let weights: Vec<f32> = flags.iter().map(|&f| if f { 1.0 / b } else { 0.0 }).collect();
            let mut energy: Option<Var> = None;
            for &o in &fwd.outputs {
                let e = tape.l0_hat(o, term.sigma_l0, Some(weights.clone()))?;
                energy = Some(match energy {
                    None => e,
                    Some(acc) => tape.add(acc, e)?,
                });
            }
            if let Some(e) = energy {
                value.sponge = tape.value(e).data()[0];
                let scaled = tape.scale(e, -term.lambda)?;
                loss = tape.add(task_loss, scaled)?;
                value.total = tape.value(loss).data()[0];
            }
        }
    }
    Ok(Recorded { loss, value })
}

/// Per-epoch evaluation target.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub data: &'a Dataset,
    pub constants: CostConstants,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub task_loss: f64,
    pub sponge_loss: f64,
    pub accuracy: Option<f64>,
    pub energy_ratio: Option<f64>,
    /// `(layer, fraction of positive outputs)`.
    pub fired: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
}

/// Trains `model` in place. `sponge_flags`, when given, marks which training
/// samples carry the sponge term (indexed like `data`).
pub fn train(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    sponge: Option<(&SpongeTerm, &[bool])>,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training on an empty dataset"));
    }
    if let Some((_, flags)) = sponge {
        if flags.len() != data.len() {
            return Err(Error::dim("one sponge flag per training sample required"));
        }
    }
    let labels = match cfg.task {
        Task::Classification => Some(data.labels()?),
        Task::Reconstruction => None,
    };
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut shuffle_rng = rng::component_rng(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport { epochs: Vec::with_capacity(cfg.epochs), diverged: None };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut task_sum, mut sponge_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let x = Tensor::stack(&refs)?;
            let y: Option<Vec<usize>> = labels.map(|l| chunk.iter().map(|&i| l[i]).collect());
            let flags: Option<Vec<bool>> = sponge.map(|(_, f)| chunk.iter().map(|&i| f[i]).collect());
            let mut tape = Tape::new();
            let rec = record_objective(
                &mut tape,
                model,
                &x,
                y.as_deref(),
                cfg.task,
                sponge.map(|(t, _)| t).zip(flags.as_deref()),
            );
            let rec = match rec {
                Ok(r) if r.value.total.is_finite() => r,
                Ok(r) => {
                    report.diverged = Some(format!("non-finite loss {} in epoch {epoch}", r.value.total));
                    return Ok(report);
                }
                Err(Error::NonFinite(what)) => {
                    report.diverged = Some(format!("non-finite {what} in epoch {epoch}"));
                    return Ok(report);
                }
                Err(e) => return Err(e),
            };
            let grads = tape.backward(rec.loss)?.params();
            if grads.iter().any(|g| !g.value.is_finite()) {
                report.diverged = Some(format!("non-finite gradient in epoch {epoch}"));
                return Ok(report);
            }
            opt.step(model, &grads)?;
            task_sum += rec.value.task as f64 * chunk.len() as f64;
            sponge_sum += rec.value.sponge as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let mut stats = EpochStats {
            epoch,
            task_loss: task_sum / seen as f64,
            sponge_loss: sponge_sum / seen as f64,
            accuracy: None,
            energy_ratio: None,
            fired: vec![],
        };
        if let Some(m) = monitor {
            stats.accuracy = Some(evaluate_performance(model, m.data, cfg.task, None, m.batch_size)?);
            stats.energy_ratio = Some(mean_energy_ratio(model, &m.data.batches(m.batch_size), &m.constants)?);
            stats.fired = fired_neuron_fractions(model, m.data, m.batch_size)?
                .into_iter()
                .map(|f| (f.layer, f.fraction))
                .collect();
        }
        debug!("epoch {epoch}: task loss {:.4}, sponge {:.2}", stats.task_loss, stats.sponge_loss);
        report.epochs.push(stats);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs_with_spread;
    use crate::model::builder::{build, mlp};

    #[test]
    fn blobs_mlp_reaches_high_accuracy() {
        let ds = synth_blobs_with_spread(2, 100, &[4], 0.05, 3).unwrap();
        let mut m = build(&[4], &mlp(&[8], 2), 1).unwrap();
        let cfg = TrainConfig { epochs: 10, batch_size: 16, lr: 0.05, momentum: 0.9, weight_decay: 0.0, seed: 5, task: Task::Classification };
        let r = train(&mut m, &ds, &cfg, None, None).unwrap();
        assert!(r.diverged.is_none());
        let acc = evaluate_performance(&m, &ds, Task::Classification, None, 64).unwrap();
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synth_blobs_with_spread(3, 20, &[5], 0.1, 1).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, lr: 0.05, momentum: 0.9, weight_decay: 5e-4, seed: 2, task: Task::Classification };
        let mut a = build(&[5], &mlp(&[6], 3), 7).unwrap();
        let mut b = a.clone();
        train(&mut a, &ds, &cfg, None, None).unwrap();
        train(&mut b, &ds, &cfg, None, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn large_weight_decay_shrinks_norms_on_a_fixed_batch() {
        let ds = synth_blobs_with_spread(2, 8, &[4], 0.1, 1).unwrap();
        let mut m = build(&[4], &mlp(&[6], 2), 3).unwrap();
        let (x, y) = ds.labeled_batches(16).unwrap().remove(0);
        let mut opt = Sgd::new(0.01, 0.0, 10.0);
        let norm = |m: &ModelGraph| m.params.values().map(|t| t.norm().powi(2)).sum::<f64>().sqrt();
        let mut prev = norm(&m);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let rec = record_objective(&mut tape, &m, &x, Some(&y), Task::Classification, None).unwrap();
            let g = tape.backward(rec.loss).unwrap().params();
            opt.step(&mut m, &g).unwrap();
            let n = norm(&m);
            assert!(n < prev, "{n} !< {prev}");
            prev = n;
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig { epochs: 1, batch_size: 0, lr: 0.1, momentum: 0.9, weight_decay: 0.0, seed: 0, task: Task::Classification };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
