//! Parameter-space defenses against sponged models and their strength
//! searches.
//!
//! Standard variants act on convolution weights; adapted variants act only
//! on target-layer biases. Every search restarts from the attacked
//! parameters and stops at the first strength whose accuracy drop exceeds
//! [`MAX_DROP_POINTS`]; the last strength within the bound is accepted.

use std::io::Write;

use log::warn;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::evaluate_performance;
use crate::data::Dataset;
use crate::energy::{mean_energy_ratio, CostConstants};
use crate::error::{Error, Result};
use crate::model::{identify_target_layers, LayerKind, ModelGraph};
use crate::rng;
use crate::train::{train, Task, TrainConfig};

pub const MAX_DROP_POINTS: f64 = 5.0;

/// Weight-decay factors swept by [`finetune_l2_grid`].
pub const L2_GRID: [f32; 6] = [1.0, 1e-1, 1e-2, 1e-3, 1e-5, 1e-8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    NoiseWeights,
    NoiseBiasesNegative,
    ClipWeights,
    ClipBiasesPositive,
    FinePruneBiases,
    FinetuneL2,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 6] = [
        DefenseKind::NoiseWeights,
        DefenseKind::NoiseBiasesNegative,
        DefenseKind::ClipWeights,
        DefenseKind::ClipBiasesPositive,
        DefenseKind::FinePruneBiases,
        DefenseKind::FinetuneL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::NoiseWeights => "noise_weights",
            DefenseKind::NoiseBiasesNegative => "noise_biases_negative",
            DefenseKind::ClipWeights => "clip_weights",
            DefenseKind::ClipBiasesPositive => "clip_biases_positive",
            DefenseKind::FinePruneBiases => "fine_prune_biases",
            DefenseKind::FinetuneL2 => "finetune_l2",
        }
    }
}

/// One evaluated strength of one defense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub kind: DefenseKind,
    pub strength: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub ratio_before: f64,
    pub ratio_after: f64,
    pub trials: usize,
    pub accepted: bool,
    /// Empty when the row evaluated normally; otherwise why it did not.
    #[serde(default)]
    pub status: String,
}

impl DefenseOutcome {
    pub fn drop_points(&self) -> f64 {
        (self.accuracy_before - self.accuracy_after) * 100.0
    }

    /// Marker row for a defense the model offers no surface for.
    pub fn inapplicable(kind: DefenseKind, reason: &str) -> Self {
        DefenseOutcome {
            kind,
            strength: f64::NAN,
            accuracy_before: f64::NAN,
            accuracy_after: f64::NAN,
            ratio_before: f64::NAN,
            ratio_after: f64::NAN,
            trials: 1,
            accepted: false,
            status: format!("inapplicable: {reason}"),
        }
    }
}

/// Result of a strength search: every tried row and the accepted model.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseSearch {
    pub rows: Vec<DefenseOutcome>,
    pub model: ModelGraph,
}

impl DefenseSearch {
    pub fn accepted(&self) -> Option<&DefenseOutcome> {
        self.rows.iter().rev().find(|r| r.accepted)
    }
}

/// Where the defender measures accuracy and energy.
#[derive(Debug, Clone, Copy)]
pub struct DefenseEval<'a> {
    pub data: &'a Dataset,
    pub task: Task,
    pub reference: Option<&'a ModelGraph>,
    pub costs: CostConstants,
    pub batch_size: usize,
}

impl DefenseEval<'_> {
    pub fn measure(&self, model: &ModelGraph) -> Result<(f64, f64)> {
        let acc = evaluate_performance(model, self.data, self.task, self.reference, self.batch_size)?;
        let ratio = mean_energy_ratio(model, &self.data.batches(self.batch_size), &self.costs)?;
        Ok((acc, ratio))
    }
}

/// Search schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    /// First noise scale, relative to each tensor's standard deviation.
    pub noise_start: f64,
    pub noise_factor: f64,
    pub noise_max_iters: usize,
    pub noise_trials: usize,
    pub clip_step: f64,
    pub prune_step: f64,
}

impl Default for Schedules {
    fn default() -> Self {
        Schedules { noise_start: 1e-3, noise_factor: 2.0, noise_max_iters: 24, noise_trials: 5, clip_step: 0.05, prune_step: 0.05 }
    }
}

fn conv_weights(model: &ModelGraph) -> Vec<String> {
    model
        .layers
        .iter()
        .filter_map(|l| match &l.kind {
            LayerKind::Conv2d { weight, .. } => Some(weight.clone()),
            _ => None,
        })
        .collect()
}

fn target_biases(model: &ModelGraph) -> Vec<String> {
    identify_target_layers(model).pairs.into_iter().map(|p| p.bias).collect()
}

fn require_conv(model: &ModelGraph) -> Result<Vec<String>> {
    let w = conv_weights(model);
    if w.is_empty() {
        return Err(Error::Inapplicable("model has no convolutional layers".into()));
    }
    Ok(w)
}

fn noise_scale(std: f64) -> f64 {
    if std > 0.0 {
        std
    } else {
        1.0
    }
}

/// Adds `N(0, (sigma * std)^2)` to every conv weight tensor, `std` being the
/// tensor's own standard deviation.
pub fn perturb_weights_noise(model: &ModelGraph, sigma: f64, rng: &mut rng::Rng) -> Result<ModelGraph> {
    let mut m = model.clone();
    if sigma == 0.0 {
        require_conv(model)?;
        return Ok(m);
    }
    for name in require_conv(model)? {
        let t = m.param_mut(&name)?;
        let dist = Normal::new(0.0, sigma * noise_scale(t.mean_std().1)).map_err(|e| Error::domain(e.to_string()))?;
        for v in t.data_mut() {
            *v = (*v as f64 + dist.sample(rng)) as f32;
        }
    }
    Ok(m)
}

/// Subtracts `|N(0, (sigma * std)^2)|` from every target-layer bias.
pub fn perturb_biases_negative(model: &ModelGraph, sigma: f64, rng: &mut rng::Rng) -> Result<ModelGraph> {
    let mut m = model.clone();
    if sigma == 0.0 {
        return Ok(m);
    }
    for name in target_biases(model) {
        let t = m.param_mut(&name)?;
        let dist = Normal::new(0.0, sigma * noise_scale(t.mean_std().1)).map_err(|e| Error::domain(e.to_string()))?;
        for v in t.data_mut() {
            *v = (*v as f64 - dist.sample(rng).abs()) as f32;
        }
    }
    Ok(m)
}

fn check_scale(s: f64) -> Result<()> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::Config(format!("clipping scale {s} outside (0, 1]")));
    }
    Ok(())
}

/// Clamps each conv weight tensor to `[s * min, s * max]`.
pub fn clip_weights(model: &ModelGraph, s: f64) -> Result<ModelGraph> {
    check_scale(s)?;
    let mut m = model.clone();
    for name in require_conv(model)? {
        let t = m.param_mut(&name)?;
        let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let (lo, hi) = ((s * lo as f64) as f32, (s * hi as f64) as f32);
        for v in t.data_mut() {
            *v = v.clamp(lo.min(hi), hi.max(lo));
        }
    }
    Ok(m)
}

/// Clamps positive target-layer biases to `s` times the layer's largest
/// positive bias; negative biases are left alone.
pub fn clip_biases_positive(model: &ModelGraph, s: f64) -> Result<ModelGraph> {
    check_scale(s)?;
    let mut m = model.clone();
    for name in target_biases(model) {
        let t = m.param_mut(&name)?;
        let max = t.data().iter().copied().fold(0.0f32, f32::max);
        let cap = (s * max as f64) as f32;
        for v in t.data_mut() {
            if *v > cap {
                *v = cap;
            }
        }
    }
    Ok(m)
}

/// Zeroes the `rate` fraction (rounded) of each target layer's positive
/// biases, largest first.
pub fn prune_positive_biases(model: &ModelGraph, rate: f64) -> Result<ModelGraph> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("prune rate {rate} outside [0, 1]")));
    }
    let mut m = model.clone();
    let mut any = false;
    for name in target_biases(model) {
        let t = m.param_mut(&name)?;
        let mut pos: Vec<usize> = (0..t.numel()).filter(|&i| t.data()[i] > 0.0).collect();
        any |= !pos.is_empty();
        pos.sort_by(|&a, &b| t.data()[b].total_cmp(&t.data()[a]).then(a.cmp(&b)));
        let k = (rate * pos.len() as f64).round() as usize;
        for &i in &pos[..k] {
            t.data_mut()[i] = 0.0;
        }
    }
    if !any {
        warn!("no positive target-layer biases to prune");
    }
    Ok(m)
}

/// Fine-tuning epochs: 5% of the original schedule, at least one.
pub fn retrain_epochs(original_epochs: usize) -> usize {
    ((original_epochs as f64 * 0.05).round() as usize).max(1)
}

fn row(kind: DefenseKind, strength: f64, before: (f64, f64), after: (f64, f64), trials: usize) -> DefenseOutcome {
    let mut r = DefenseOutcome {
        kind,
        strength,
        accuracy_before: before.0,
        accuracy_after: after.0,
        ratio_before: before.1,
        ratio_after: after.1,
        trials,
        accepted: false,
        status: String::new(),
    };
    r.accepted = r.drop_points() <= MAX_DROP_POINTS + 1e-9;
    r
}

/// Generic search: applies `apply` at each strength to the original model,
/// stopping after the first strength beyond the accuracy bound.
fn search(
    kind: DefenseKind,
    model: &ModelGraph,
    eval: &DefenseEval<'_>,
    strengths: impl IntoIterator<Item = f64>,
    trials: usize,
    mut apply: impl FnMut(f64, usize) -> Result<ModelGraph>,
) -> Result<DefenseSearch> {
    let before = eval.measure(model)?;
    let mut out = DefenseSearch { rows: vec![], model: model.clone() };
    for s in strengths {
        let (mut acc, mut ratio) = (0.0, 0.0);
        let mut first = None;
        for t in 0..trials {
            let m = apply(s, t)?;
            let (a, r) = eval.measure(&m)?;
            acc += a;
            ratio += r;
            first.get_or_insert(m);
        }
        let r = row(kind, s, before, (acc / trials as f64, ratio / trials as f64), trials);
        let ok = r.accepted;
        out.rows.push(r);
        if !ok {
            break;
        }
        out.model = first.expect("at least one trial");
    }
    Ok(out)
}

fn noise_strengths(s: &Schedules) -> impl Iterator<Item = f64> + '_ {
    (0..s.noise_max_iters as i32).map(move |i| s.noise_start * s.noise_factor.powi(i))
}

fn trial_rng(seed: u64, kind: DefenseKind, strength: f64, trial: usize) -> rng::Rng {
    rng::component_rng(seed, &format!("{}/{strength:e}/{trial}", kind.name()))
}

pub fn noise_weights_search(model: &ModelGraph, eval: &DefenseEval<'_>, sched: &Schedules, seed: u64) -> Result<DefenseSearch> {
    require_conv(model)?;
    let kind = DefenseKind::NoiseWeights;
    search(kind, model, eval, noise_strengths(sched), sched.noise_trials.max(1), |s, t| {
        perturb_weights_noise(model, s, &mut trial_rng(seed, kind, s, t))
    })
}

pub fn noise_biases_negative_search(
    model: &ModelGraph,
    eval: &DefenseEval<'_>,
    sched: &Schedules,
    seed: u64,
) -> Result<DefenseSearch> {
    let kind = DefenseKind::NoiseBiasesNegative;
    search(kind, model, eval, noise_strengths(sched), sched.noise_trials.max(1), |s, t| {
        perturb_biases_negative(model, s, &mut trial_rng(seed, kind, s, t))
    })
}

fn clip_strengths(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..n).map(|i| 1.0 - i as f64 * step).filter(|&s| s > 1e-12).collect()
}

pub fn clip_weights_search(model: &ModelGraph, eval: &DefenseEval<'_>, sched: &Schedules) -> Result<DefenseSearch> {
    require_conv(model)?;
    search(DefenseKind::ClipWeights, model, eval, clip_strengths(sched.clip_step), 1, |s, _| clip_weights(model, s))
}

pub fn clip_biases_positive_search(model: &ModelGraph, eval: &DefenseEval<'_>, sched: &Schedules) -> Result<DefenseSearch> {
    search(DefenseKind::ClipBiasesPositive, model, eval, clip_strengths(sched.clip_step), 1, |s, _| {
        clip_biases_positive(model, s)
    })
}

/// Searches the prune rate upward (before fine-tuning), then fine-tunes the
/// accepted pruned model on `train_data` with `retrain`. The final row holds
/// the post-fine-tuning measurement.
pub fn fine_prune_biases(
    model: &ModelGraph,
    eval: &DefenseEval<'_>,
    sched: &Schedules,
    train_data: &Dataset,
    retrain: &TrainConfig,
) -> Result<DefenseSearch> {
    let n = (1.0 / sched.prune_step).round() as usize;
    let rates = (0..=n).map(|i| (i as f64 * sched.prune_step).min(1.0));
    let mut found = search(DefenseKind::FinePruneBiases, model, eval, rates, 1, |r, _| prune_positive_biases(model, r))?;
    let rate = found.accepted().map(|r| r.strength).unwrap_or(0.0);
    let before = eval.measure(model)?;
    let mut tuned = found.model.clone();
    let report = train(&mut tuned, train_data, retrain, None, None)?;
    let mut last = row(DefenseKind::FinePruneBiases, rate, before, eval.measure(&tuned)?, 1);
    if let Some(why) = report.diverged {
        last.accepted = false;
        last.status = format!("fine-tuning diverged: {why}");
    } else {
        last.status = "fine_tuned".into();
        found.model = tuned;
    }
    found.rows.push(last);
    Ok(found)
}

/// Fine-tunes a copy per weight-decay factor. Diverged points are recorded
/// with a status instead of failing the sweep.
pub fn finetune_l2_grid(
    model: &ModelGraph,
    eval: &DefenseEval<'_>,
    grid: &[f32],
    train_data: &Dataset,
    retrain: &TrainConfig,
) -> Result<Vec<(DefenseOutcome, ModelGraph)>> {
    let before = eval.measure(model)?;
    grid.iter()
        .map(|&wd| {
            let mut m = model.clone();
            let cfg = TrainConfig { weight_decay: wd, ..retrain.clone() };
            let report = train(&mut m, train_data, &cfg, None, None)?;
            let r = match report.diverged {
                None => match eval.measure(&m) {
                    Ok(after) => row(DefenseKind::FinetuneL2, wd as f64, before, after, 1),
                    Err(Error::NonFinite(why)) => failed(wd, before, why),
                    Err(e) => return Err(e),
                },
                Some(why) => failed(wd, before, why),
            };
            Ok((r, m))
        })
        .collect()
}

fn failed(wd: f32, before: (f64, f64), why: String) -> DefenseOutcome {
    let mut r = row(DefenseKind::FinetuneL2, wd as f64, before, (f64::NAN, f64::NAN), 1);
    r.accepted = false;
    r.status = format!("diverged: {why}");
    r
}

pub fn write_csv<W: Write>(rows: &[DefenseOutcome], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("defense csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builder::{build, toy_cnn, LayerTemplate as T};
    use crate::tensor::Tensor;

    fn dense_net() -> ModelGraph {
        let mut m = build(&[2], &[T::Dense { out: 3, bias: true }, T::Relu, T::Dense { out: 2, bias: true }], 0).unwrap();
        *m.param_mut("dense1.bias").unwrap() = Tensor::from_vec(vec![0.5, -0.2, 0.9]).unwrap();
        m
    }

    #[test]
    fn zero_strength_is_identity() {
        let m = build(&[1, 6, 6], &toy_cnn([2, 2], 2), 1).unwrap();
        let mut r = rng::rng(1);
        assert_eq!(perturb_weights_noise(&m, 0.0, &mut r).unwrap(), m);
        assert_eq!(perturb_biases_negative(&m, 0.0, &mut r).unwrap(), m);
        assert_eq!(clip_weights(&m, 1.0).unwrap(), m);
        assert_eq!(clip_biases_positive(&m, 1.0).unwrap(), m);
        assert_eq!(prune_positive_biases(&m, 0.0).unwrap(), m);
    }

    #[test]
    fn negative_noise_strictly_lowers_every_bias() {
        let m = dense_net();
        let p = perturb_biases_negative(&m, 0.5, &mut rng::rng(3)).unwrap();
        let (a, b) = (m.param("dense1.bias").unwrap(), p.param("dense1.bias").unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| y < x));
        assert_eq!(m.param("dense3.bias").unwrap(), p.param("dense3.bias").unwrap());
        assert_eq!(m.param("dense1.weight").unwrap(), p.param("dense1.weight").unwrap());
    }

    #[test]
    fn weight_defenses_need_conv() {
        let m = dense_net();
        assert!(matches!(clip_weights(&m, 0.5), Err(Error::Inapplicable(_))));
        assert!(matches!(perturb_weights_noise(&m, 0.1, &mut rng::rng(0)), Err(Error::Inapplicable(_))));
    }

    #[test]
    fn clip_weights_matches_clamp_oracle() {
        let m = build(&[1, 5, 5], &toy_cnn([3, 2], 2), 8).unwrap();
        let c = clip_weights(&m, 0.5).unwrap();
        for name in ["conv1.weight", "conv4.weight"] {
            let w = m.param(name).unwrap().data();
            let lo = w.iter().cloned().fold(f32::MAX, f32::min) * 0.5;
            let hi = w.iter().cloned().fold(f32::MIN, f32::max) * 0.5;
            let expect: Vec<f32> = w.iter().map(|v| v.max(lo).min(hi)).collect();
            assert_eq!(c.param(name).unwrap().data(), expect.as_slice());
        }
        let tiny = clip_weights(&m, 1e-30).unwrap();
        assert!(tiny.param("conv1.weight").unwrap().data().iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn positive_clip_and_prune_sign_gating() {
        let mut m = dense_net();
        let c = clip_biases_positive(&m, 0.5).unwrap();
        assert_eq!(c.param("dense1.bias").unwrap().data(), &[0.45, -0.2, 0.45]);
        let p = prune_positive_biases(&m, 1.0).unwrap();
        assert_eq!(p.param("dense1.bias").unwrap().data(), &[0.0, -0.2, 0.0]);
        let half = prune_positive_biases(&m, 0.5).unwrap();
        assert_eq!(half.param("dense1.bias").unwrap().data(), &[0.5, -0.2, 0.0]);
        *m.param_mut("dense1.bias").unwrap() = Tensor::from_vec(vec![-1.0, -0.2, -0.3]).unwrap();
        assert_eq!(clip_biases_positive(&m, 0.1).unwrap(), m);
        assert_eq!(prune_positive_biases(&m, 1.0).unwrap(), m);
    }

    #[test]
    fn retrain_epoch_rule() {
        assert_eq!(retrain_epochs(20), 1);
        assert_eq!(retrain_epochs(100), 5);
        assert_eq!(retrain_epochs(3), 1);
    }

    #[test]
    fn clip_schedule() {
        let s = clip_strengths(0.05);
        assert_eq!(s.len(), 20);
        assert_eq!(s[0], 1.0);
        assert!(s.last().unwrap() > &0.0);
    }
}
