//! Activation statistics of target layers and the stealth diagnostics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{identify_target_layers, ModelGraph};
use crate::tensor::Tensor;

/// Mergeable count / mean / sum-of-squared-deviations accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.count as f64 * other.count as f64) / n as f64;
        self.count = n;
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2.max(0.0) / self.count as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasStats {
    pub layer: String,
    pub channel_index: usize,
    pub mu: f64,
    pub sigma: f64,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: String,
    pub bias: String,
    /// Sorted ascending by `mu`; ties keep ascending channel order.
    pub stats: Vec<BiasStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub layers: Vec<LayerProfile>,
}

impl ActivationProfile {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Adds every value of `t` (`[batch, channels, ...]`) into its channel's
/// accumulator. Spatial positions of a channel pool together.
fn accumulate_channels(t: &Tensor, acc: &mut [RunningStats]) {
    let c = acc.len();
    let spatial = t.row_len() / c;
    let mut local = vec![RunningStats::default(); c];
    for (i, &v) in t.data().iter().enumerate() {
        local[(i / spatial) % c].push(v as f64);
    }
    for (a, l) in acc.iter_mut().zip(&local) {
        a.merge(l);
    }
}

/// One clean inference pass over `subset`, collecting per-channel mean and
/// standard deviation of each target layer's output (the input of the
/// sparsity layer that follows it).
pub fn profile(model: &ModelGraph, subset: &Dataset, batch_size: usize) -> Result<ActivationProfile> {
    if subset.is_empty() {
        return Err(Error::domain("profiling needs a non-empty subset"));
    }
    let targets = identify_target_layers(model);
    if targets.is_empty() {
        warn!("model has no target layers; profile is empty");
        return Ok(ActivationProfile::default());
    }
    let idx: Vec<usize> = targets
        .pairs
        .iter()
        .map(|p| model.layer_index(&p.target).expect("target from model"))
        .collect();
    let mut acc: Vec<Vec<RunningStats>> = targets
        .pairs
        .iter()
        .map(|p| Ok(vec![RunningStats::default(); model.param(&p.bias)?.numel()]))
        .collect::<Result<_>>()?;

    for batch in subset.batches(batch_size) {
        let trace = model.forward_trace(&batch)?;
        for (a, &i) in acc.iter_mut().zip(&idx) {
            accumulate_channels(&trace.outputs[i], a);
        }
    }

    let layers = targets
        .pairs
        .iter()
        .zip(acc)
        .map(|(p, a)| {
            let mut stats: Vec<BiasStats> = a
                .iter()
                .enumerate()
                .map(|(ch, s)| BiasStats {
                    layer: p.target.clone(),
                    channel_index: ch,
                    mu: s.mean,
                    sigma: s.std(),
                    sample_count: s.count,
                })
                .collect();
            stats.sort_by(|x, y| x.mu.total_cmp(&y.mu));
            LayerProfile { layer: p.target.clone(), bias: p.bias.clone(), stats }
        })
        .collect();
    Ok(ActivationProfile { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiredFraction {
    pub layer: String,
    pub kind: String,
    pub fraction: f64,
}

/// Fraction of strictly positive outputs of every layer over `subset`.
pub fn fired_neuron_fractions(model: &ModelGraph, subset: &Dataset, batch_size: usize) -> Result<Vec<FiredFraction>> {
    if subset.is_empty() {
        return Err(Error::domain("fired-neuron fractions need a non-empty subset"));
    }
    let mut positive = vec![0usize; model.layers.len()];
    let mut total = vec![0usize; model.layers.len()];
    for batch in subset.batches(batch_size) {
        let trace = model.forward_trace(&batch)?;
        for (i, out) in trace.outputs.iter().enumerate() {
            positive[i] += out.count_positive();
            total[i] += out.numel();
        }
    }
    Ok(model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| FiredFraction {
            layer: l.name.clone(),
            kind: l.kind.label().to_string(),
            fraction: positive[i] as f64 / total[i] as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanBias {
    pub layer: String,
    pub mean_bias: f64,
}

/// Arithmetic mean of each target layer's bias vector.
pub fn mean_bias_values(model: &ModelGraph) -> Result<Vec<MeanBias>> {
    identify_target_layers(model)
        .pairs
        .iter()
        .map(|p| Ok(MeanBias { layer: p.target.clone(), mean_bias: model.param(&p.bias)?.mean() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, Manifest};
    use crate::model::builder::{build, mlp, LayerTemplate as T};

    fn constant_ds(n: usize, dims: usize, v: f32) -> Dataset {
        let samples = (0..n).map(|_| Tensor::full(&[dims], v)).collect();
        Dataset::new(
            samples,
            None,
            Manifest { name: "const".into(), shape: vec![dims], dynamic_range: 1.0, splits: Default::default(), seed: None },
        )
        .unwrap()
    }

    #[test]
    fn constant_input_has_zero_sigma() {
        let m = build(&[3], &mlp(&[5, 4], 2), 2).unwrap();
        let p = profile(&m, &constant_ds(9, 3, 0.7), 4).unwrap();
        assert_eq!(p.layers.len(), 2);
        assert!(p.layers.iter().flat_map(|l| &l.stats).all(|s| s.sigma == 0.0));
    }

    #[test]
    fn zero_weights_expose_bias() {
        let mut m = build(&[2], &[T::Dense { out: 2, bias: true }, T::Relu], 0).unwrap();
        *m.param_mut("dense1.weight").unwrap() = Tensor::zeros(&[2, 2]);
        *m.param_mut("dense1.bias").unwrap() = Tensor::from_vec(vec![0.0, 10.0]).unwrap();
        let ds = synth_blobs(2, 3, &[2], 1).unwrap();
        let p = profile(&m, &ds, 2).unwrap();
        let s = &p.layers[0].stats;
        assert_eq!((s[0].channel_index, s[0].mu), (0, 0.0));
        assert_eq!((s[1].channel_index, s[1].mu), (1, 10.0));
        assert_eq!(s[0].sample_count, 6);
    }

    #[test]
    fn ties_keep_channel_order() {
        let mut m = build(&[2], &[T::Dense { out: 3, bias: true }, T::Relu], 0).unwrap();
        *m.param_mut("dense1.weight").unwrap() = Tensor::zeros(&[3, 2]);
        *m.param_mut("dense1.bias").unwrap() = Tensor::from_vec(vec![1.0, 1.0, -1.0]).unwrap();
        let p = profile(&m, &synth_blobs(1, 2, &[2], 1).unwrap(), 2).unwrap();
        let order: Vec<usize> = p.layers[0].stats.iter().map(|s| s.channel_index).collect();
        assert_eq!(order, [2, 0, 1]);
    }

    #[test]
    fn empty_subset_and_no_targets() {
        let m = build(&[3], &mlp(&[4], 2), 2).unwrap();
        let empty = constant_ds(2, 3, 0.1).select(&[]);
        assert!(matches!(profile(&m, &empty, 4), Err(Error::Domain(_))));
        let plain = build(&[3], &[T::Dense { out: 2, bias: true }, T::Tanh], 0).unwrap();
        assert!(profile(&plain, &constant_ds(2, 3, 0.1), 4).unwrap().is_empty());
    }

    #[test]
    fn fired_fractions_extremes() {
        let mut m = build(&[2], &[T::Dense { out: 2, bias: true }, T::Relu], 0).unwrap();
        *m.param_mut("dense1.weight").unwrap() = Tensor::zeros(&[2, 2]);
        *m.param_mut("dense1.bias").unwrap() = Tensor::from_vec(vec![-1.0, -2.0]).unwrap();
        let ds = constant_ds(3, 2, 0.5);
        let f = fired_neuron_fractions(&m, &ds, 2).unwrap();
        assert_eq!(f[1].fraction, 0.0);

        let mut id = build(&[2], &[T::Dense { out: 2, bias: true }, T::Relu], 0).unwrap();
        *id.param_mut("dense1.weight").unwrap() = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        *id.param_mut("dense1.bias").unwrap() = Tensor::zeros(&[2]);
        let f = fired_neuron_fractions(&id, &ds, 2).unwrap();
        assert!(f.iter().all(|x| x.fraction == 1.0));
    }

    #[test]
    fn mean_bias_examples() {
        let mut m = build(&[2], &[T::Dense { out: 2, bias: true }, T::Relu], 0).unwrap();
        *m.param_mut("dense1.bias").unwrap() = Tensor::from_vec(vec![1.0, -1.0]).unwrap();
        assert_eq!(mean_bias_values(&m).unwrap()[0].mean_bias, 0.0);
        *m.param_mut("dense1.bias").unwrap() = Tensor::from_vec(vec![0.5, 0.5]).unwrap();
        assert_eq!(mean_bias_values(&m).unwrap()[0].mean_bias, 0.5);
    }

    #[test]
    fn running_stats_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..50).map(|i| ((i * 7919) % 97) as f64 / 13.0 - 3.0).collect();
        let mut whole = RunningStats::default();
        xs.iter().for_each(|&x| whole.push(x));
        let mut a = RunningStats::default();
        let mut b = RunningStats::default();
        xs[..17].iter().for_each(|&x| a.push(x));
        xs[17..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - whole.mean).abs() < 1e-12);
        assert!((a.std() - whole.std()).abs() < 1e-12);
    }
}
