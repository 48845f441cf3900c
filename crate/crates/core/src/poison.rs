//! Sponge poisoning: training with `task_loss - lambda * E` on a fixed
//! fraction of the training samples.
//!
//! Adversarial objectives for generators are not implemented. They would
//! attach in `train::record_objective`, where the task loss is recorded: the
//! generator loss takes the `- lambda * E` term, the discriminator loss does
//! not.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradient, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::ops::l0_hat;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{record_objective, train, Monitor, ObjectiveValue, SpongeTerm, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    pub lambda: f32,
    pub sigma_l0: f32,
    pub delta: f64,
    /// Divide `E` by the per-sample activation count so that `lambda` is
    /// comparable to the task loss across model sizes.
    #[serde(default = "default_normalize")]
    pub normalize_energy: bool,
    pub train: TrainConfig,
}

fn default_normalize() -> bool {
    true
}

impl PoisonConfig {
    /// `lambda = 2.5`, `sigma_l0 = 1e-4`, `delta = 0.05`, normalized energy.
    pub fn standard(train: TrainConfig) -> Self {
        PoisonConfig { lambda: 2.5, sigma_l0: 1e-4, delta: 0.05, normalize_energy: true, train }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.sigma_l0 > 0.0) {
            return Err(Error::Config("sigma_l0 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config("delta must lie in [0, 1]".into()));
        }
        self.train.validate()
    }

    fn term(&self) -> SpongeTerm {
        SpongeTerm { lambda: self.lambda, sigma_l0: self.sigma_l0, normalize: self.normalize_energy }
    }
}

/// Smooth non-zero count summed over every layer output of `batch`.
pub fn sponge_energy(model: &ModelGraph, batch: &Tensor, sigma_l0: f32) -> Result<f64> {
    let trace = model.forward_trace(batch)?;
    trace.outputs.iter().map(|o| l0_hat(o, sigma_l0)).sum()
}

/// Objective value and parameter gradients for one batch. When `flagged`,
/// every sample carries the sponge term.
pub fn poison_objective(
    model: &ModelGraph,
    batch: &Tensor,
    labels: &[usize],
    config: &PoisonConfig,
    flagged: bool,
) -> Result<(ObjectiveValue, Vec<Gradient>)> {
    let flags = vec![flagged; batch.batch()];
    let term = config.term();
    let mut tape = Tape::new();
    let rec = record_objective(&mut tape, model, batch, Some(labels), config.train.task, Some((&term, &flags)))?;
    let grads = tape.backward(rec.loss)?.params();
    Ok((rec.value, grads))
}

/// Picks `round(delta * n)` sample indices from a stream independent of the
/// training shuffle.
pub fn sponge_flags(n: usize, delta: f64, seed: u64) -> Vec<bool> {
    let k = ((delta * n as f64).round() as usize).min(n);
    let mut flags = vec![false; n];
    if k > 0 {
        let mut r = rng::component_rng(seed, "sponge-flags");
        for i in index::sample(&mut r, n, k) {
            flags[i] = true;
        }
    }
    flags
}

/// Trains a copy of `model_init` with the sponge term on the flagged
/// fraction. `delta == 0` reduces to plain training.
pub fn train_poisoned(
    model_init: &ModelGraph,
    dataset: &Dataset,
    config: &PoisonConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<(ModelGraph, TrainReport)> {
    config.validate()?;
    let mut model = model_init.clone();
    let flags = sponge_flags(dataset.len(), config.delta, config.train.seed);
    let term = config.term();
    let sponge = if flags.iter().any(|&f| f) { Some((&term, flags.as_slice())) } else { None };
    let report = train(&mut model, dataset, &config.train, sponge, monitor)?;
    Ok((model, report))
}

/// Writes per-epoch metrics, one `fired_<layer>` column per layer.
pub fn write_metrics_csv<W: Write>(report: &TrainReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let layers: Vec<&str> = report
        .epochs
        .first()
        .map(|e| e.fired.iter().map(|(l, _)| l.as_str()).collect())
        .unwrap_or_default();
    let mut header = vec!["epoch".to_string(), "task_loss".into(), "sponge_loss".into(), "accuracy".into(), "energy_ratio".into()];
    header.extend(layers.iter().map(|l| format!("fired_{l}")));
    out.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &report.epochs {
        let mut row = vec![
            e.epoch.to_string(),
            e.task_loss.to_string(),
            e.sponge_loss.to_string(),
            opt(e.accuracy),
            opt(e.energy_ratio),
        ];
        row.extend(e.fired.iter().map(|(_, f)| f.to_string()));
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}
