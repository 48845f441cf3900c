//! Bias escalation: raise target-layer biases in steps of `alpha * sigma`
//! while performance stays within `tau` points and the energy ratio keeps
//! growing.

use std::io::Write;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::{mean_energy_ratio, ratio_increase, CostConstants};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, mean_ssim};
use crate::model::{identify_target_layers, ModelGraph};
use crate::profiler::ActivationProfile;
use crate::train::Task;

/// Slack on the accuracy guard so that `drop == tau` survives rounding.
const GUARD_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Largest allowed performance drop, in points (accuracy or SSIM x 100).
    pub tau: f64,
    /// Step size in units of the channel's activation standard deviation.
    pub alpha: f64,
    #[serde(default = "default_cap")]
    pub max_total_steps_per_bias: usize,
    #[serde(default = "default_subset")]
    pub subset_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub costs: CostConstants,
}

fn default_cap() -> usize {
    usize::MAX
}
fn default_subset() -> f64 {
    0.01
}
fn default_task() -> Task {
    Task::Classification
}
fn default_batch() -> usize {
    64
}

impl AttackConfig {
    pub fn new(tau: f64, alpha: f64) -> Self {
        AttackConfig {
            tau,
            alpha,
            max_total_steps_per_bias: default_cap(),
            subset_fraction: default_subset(),
            seed: 0,
            task: default_task(),
            batch_size: default_batch(),
            costs: CostConstants::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::Config("tau must be non-negative".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.max_total_steps_per_bias == 0 {
            return Err(Error::Config("step cap must be at least 1".into()));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config("subset fraction must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.costs.validate()
    }

    /// Steps allowed per bias: the configured cap, but never more than keeps
    /// the total increase within two standard deviations (at least one).
    pub fn steps_per_bias(&self) -> usize {
        let by_sigma = ((2.0 / self.alpha).floor() as usize).max(1);
        self.max_total_steps_per_bias.min(by_sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub layer: String,
    pub channel: usize,
    pub old_bias: f32,
    pub new_bias: f32,
    pub accuracy_after: f64,
    pub energy_ratio_after: f64,
    pub reverted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub entries: Vec<TraceEntry>,
}

impl AttackTrace {
    pub fn accepted(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(|e| !e.reverted)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.entries {
            out.serialize(e)?;
        }
        out.flush().map_err(|e| Error::io("trace csv", e))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Energy ratio after finishing each target layer, relative to the start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerIncrease {
    pub layer: String,
    pub energy_ratio: f64,
    pub cumulative_increase_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub model: ModelGraph,
    pub trace: AttackTrace,
    pub clean_performance: f64,
    pub final_performance: f64,
    pub start_ratio: f64,
    pub final_ratio: f64,
    pub per_layer: Vec<LayerIncrease>,
    /// Number of full evaluation passes over the eval data.
    pub evaluations: usize,
    /// Set when an evaluation turned non-finite; the model holds the last
    /// accepted state.
    pub aborted: Option<String>,
}

impl AttackOutcome {
    pub fn ratio_increase_pct(&self) -> Result<f64> {
        ratio_increase(self.start_ratio, self.final_ratio)
    }

    pub fn performance_drop_points(&self) -> f64 {
        (self.clean_performance - self.final_performance) * 100.0
    }
}

/// Accuracy for classifiers; mean SSIM against `reference`'s outputs for
/// reconstruction models.
pub fn evaluate_performance(
    model: &ModelGraph,
    data: &Dataset,
    task: Task,
    reference: Option<&ModelGraph>,
    batch_size: usize,
) -> Result<f64> {
    match task {
        Task::Classification => {
            let labels = data.labels()?;
            let mut preds = Vec::with_capacity(data.len());
            for b in data.batches(batch_size) {
                preds.extend(model.predict(&b)?);
            }
            accuracy(&preds, labels)
        }
        Task::Reconstruction => {
            let reference =
                reference.ok_or_else(|| Error::Config("reconstruction evaluation needs a reference model".into()))?;
            mean_ssim(model, reference, data, batch_size)
        }
    }
}

fn check_profile(model: &ModelGraph, profile: &ActivationProfile) -> Result<()> {
    let targets = identify_target_layers(model);
    for lp in &profile.layers {
        let pair = targets
            .pairs
            .iter()
            .find(|p| p.target == lp.layer)
            .ok_or_else(|| Error::Config(format!("profiled layer '{}' is not a target layer", lp.layer)))?;
        if pair.bias != lp.bias {
            return Err(Error::Config(format!("profile bias '{}' does not belong to '{}'", lp.bias, lp.layer)));
        }
        let n = model.param(&lp.bias)?.numel();
        if lp.stats.len() != n || lp.stats.iter().any(|s| s.channel_index >= n) {
            return Err(Error::Config(format!("profile of '{}' does not match its {n} channels", lp.layer)));
        }
    }
    Ok(())
}

/// Runs the attack on a copy of `model`. `reference` is the clean model used
/// as the SSIM reference for reconstruction tasks.
pub fn run_skipsponge(
    model: &ModelGraph,
    profile: &ActivationProfile,
    config: &AttackConfig,
    eval_data: &Dataset,
    reference: Option<&ModelGraph>,
) -> Result<AttackOutcome> {
    config.validate()?;
    check_profile(model, profile)?;
    if eval_data.is_empty() {
        return Err(Error::domain("attack evaluation data is empty"));
    }
    let reference = match config.task {
        Task::Reconstruction => Some(reference.unwrap_or(model).clone()),
        Task::Classification => None,
    };
    let batches = eval_data.batches(config.batch_size);
    let perf = |m: &ModelGraph| evaluate_performance(m, eval_data, config.task, reference.as_ref(), config.batch_size);
    let ratio = |m: &ModelGraph| mean_energy_ratio(m, &batches, &config.costs);

    let clean_performance = perf(model)?;
    let start_ratio = ratio(model)?;
    let mut out = AttackOutcome {
        model: model.clone(),
        trace: AttackTrace::default(),
        clean_performance,
        final_performance: clean_performance,
        start_ratio,
        final_ratio: start_ratio,
        per_layer: Vec::with_capacity(profile.layers.len()),
        evaluations: 2,
        aborted: None,
    };
    let steps = config.steps_per_bias();

    'layers: for lp in &profile.layers {
        for stat in &lp.stats {
            if stat.sigma == 0.0 {
                continue;
            }
            let step = config.alpha * stat.sigma;
            for _ in 0..steps {
                let bias = out.model.param_mut(&lp.bias)?;
                let old = bias.data()[stat.channel_index];
                let new = (old as f64 + step) as f32;
                if new == old {
                    break;
                }
                bias.data_mut()[stat.channel_index] = new;
                let evaluated = perf(&out.model).and_then(|a| Ok((a, ratio(&out.model)?)));
                out.evaluations += 1;
                let (a, e) = match evaluated {
                    Ok((a, e)) if a.is_finite() && e.is_finite() => (a, e),
                    Ok(_) | Err(Error::NonFinite(_)) => {
                        out.model.param_mut(&lp.bias)?.data_mut()[stat.channel_index] = old;
                        let msg = format!("non-finite evaluation at {}[{}]", lp.layer, stat.channel_index);
                        warn!("{msg}; aborting");
                        out.aborted = Some(msg);
                        break 'layers;
                    }
                    Err(err) => return Err(err),
                };
                let drop = (clean_performance - a) * 100.0;
                let accept = drop <= config.tau + GUARD_EPS && e > out.final_ratio;
                out.trace.entries.push(TraceEntry {
                    layer: lp.layer.clone(),
                    channel: stat.channel_index,
                    old_bias: old,
                    new_bias: new,
                    accuracy_after: a,
                    energy_ratio_after: e,
                    reverted: !accept,
                });
                if accept {
                    out.final_ratio = e;
                    out.final_performance = a;
                } else {
                    out.model.param_mut(&lp.bias)?.data_mut()[stat.channel_index] = old;
                    break;
                }
            }
        }
        out.per_layer.push(LayerIncrease {
            layer: lp.layer.clone(),
            energy_ratio: out.final_ratio,
            cumulative_increase_pct: ratio_increase(start_ratio, out.final_ratio)?,
        });
        info!("{}: energy ratio {:.4}", lp.layer, out.final_ratio);
    }
    Ok(out)
}

/// Writes the per-layer cumulative increase series.
pub fn write_per_layer_csv<W: Write>(series: &[LayerIncrease], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in series {
        out.serialize(row)?;
    }
    out.flush().map_err(|e| Error::io("per-layer csv", e))?;
    Ok(())
}
