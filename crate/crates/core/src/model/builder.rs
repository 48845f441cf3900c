//! Architecture templates and seeded parameter initialisation.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Shape-free layer description; channel and feature counts of the inputs are
/// inferred while building.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerTemplate {
    Dense {
        out: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    LeakyRelu {
        #[serde(default = "leak")]
        slope: f32,
    },
    #[serde(rename = "maxpool")]
    MaxPool { window: usize, stride: usize },
    #[serde(rename = "avgpool")]
    AvgPool { window: usize, stride: usize },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        #[serde(default = "bn_eps")]
        eps: f32,
    },
    Tanh,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn leak() -> f32 {
    0.01
}
fn bn_eps() -> f32 {
    1e-5
}

impl LayerTemplate {
    fn prefix(&self) -> &'static str {
        match self {
            LayerTemplate::Dense { .. } => "dense",
            LayerTemplate::Conv2d { .. } => "conv",
            LayerTemplate::Relu => "relu",
            LayerTemplate::LeakyRelu { .. } => "leaky_relu",
            LayerTemplate::MaxPool { .. } => "maxpool",
            LayerTemplate::AvgPool { .. } => "avgpool",
            LayerTemplate::BatchNorm { .. } => "batchnorm",
            LayerTemplate::Tanh => "tanh",
        }
    }
}

fn uniform(rng: &mut rng::Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from template is valid")
}

/// Instantiates a template chain for `input_shape` (per sample). Layers are
/// named `<kind><position>` counting from 1, parameters `<layer>.<role>`.
/// Weights and biases follow the uniform fan-in initialisation common to
/// PyTorch linear and convolution layers; batch norm starts as identity.
pub fn build(input_shape: &[usize], templates: &[LayerTemplate], seed: u64) -> Result<ModelGraph> {
    let mut rng = rng::rng(seed);
    let mut params = BTreeMap::new();
    let mut layers = Vec::with_capacity(templates.len());
    let mut shape = input_shape.to_vec();
    let mut graph = ModelGraph { input_shape: input_shape.to_vec(), layers: vec![], params: BTreeMap::new() };

    for (i, t) in templates.iter().enumerate() {
        let name = format!("{}{}", t.prefix(), i + 1);
        let pname = |role: &str| format!("{name}.{role}");
        let kind = match t {
            LayerTemplate::Dense { out, bias } => {
                let fan_in: usize = shape.iter().product();
                let bound = 1.0 / (fan_in as f32).sqrt();
                params.insert(pname("weight"), uniform(&mut rng, &[*out, fan_in], bound));
                if *bias {
                    params.insert(pname("bias"), uniform(&mut rng, &[*out], bound));
                }
                LayerKind::Dense { weight: pname("weight"), bias: bias.then(|| pname("bias")) }
            }
            LayerTemplate::Conv2d { out_channels, kernel, stride, padding, bias } => {
                let c = *shape
                    .first()
                    .filter(|_| shape.len() == 3)
                    .ok_or_else(|| Error::Config(format!("{name} needs a [c,h,w] input, got {shape:?}")))?;
                let fan_in = c * kernel * kernel;
                let bound = 1.0 / (fan_in as f32).sqrt();
                params.insert(pname("weight"), uniform(&mut rng, &[*out_channels, c, *kernel, *kernel], bound));
                if *bias {
                    params.insert(pname("bias"), uniform(&mut rng, &[*out_channels], bound));
                }
                LayerKind::Conv2d {
                    weight: pname("weight"),
                    bias: bias.then(|| pname("bias")),
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerTemplate::BatchNorm { eps } => {
                let c = shape[0];
                params.insert(pname("gamma"), Tensor::full(&[c], 1.0));
                params.insert(pname("beta"), Tensor::zeros(&[c]));
                params.insert(pname("running_mean"), Tensor::zeros(&[c]));
                params.insert(pname("running_var"), Tensor::full(&[c], 1.0));
                LayerKind::BatchNorm {
                    gamma: pname("gamma"),
                    beta: pname("beta"),
                    running_mean: pname("running_mean"),
                    running_var: pname("running_var"),
                    eps: *eps,
                }
            }
            LayerTemplate::Relu => LayerKind::Relu,
            LayerTemplate::LeakyRelu { slope } => LayerKind::LeakyRelu { slope: *slope },
            LayerTemplate::MaxPool { window, stride } => LayerKind::MaxPool { window: *window, stride: *stride },
            LayerTemplate::AvgPool { window, stride } => LayerKind::AvgPool { window: *window, stride: *stride },
            LayerTemplate::Tanh => LayerKind::Tanh,
        };
        layers.push(LayerSpec { name, kind });
        graph.layers = layers.clone();
        graph.params = params.clone();
        shape = graph.validate()?.pop().expect("at least one layer");
    }
    graph.layers = layers;
    graph.params = params;
    Ok(graph)
}

/// Two-convolution classifier used throughout the desk-scale experiments:
/// conv → relu → maxpool → conv → relu → dense.
pub fn toy_cnn(channels: [usize; 2], classes: usize) -> Vec<LayerTemplate> {
    vec![
        LayerTemplate::Conv2d { out_channels: channels[0], kernel: 3, stride: 1, padding: 1, bias: true },
        LayerTemplate::Relu,
        LayerTemplate::MaxPool { window: 2, stride: 2 },
        LayerTemplate::Conv2d { out_channels: channels[1], kernel: 3, stride: 1, padding: 1, bias: true },
        LayerTemplate::Relu,
        LayerTemplate::Dense { out: classes, bias: true },
    ]
}

/// Fully connected ReLU network with the given hidden widths.
pub fn mlp(hidden: &[usize], outputs: usize) -> Vec<LayerTemplate> {
    let mut t = Vec::new();
    for &h in hidden {
        t.push(LayerTemplate::Dense { out: h, bias: true });
        t.push(LayerTemplate::Relu);
    }
    t.push(LayerTemplate::Dense { out: outputs, bias: true });
    t
}

/// Swaps every ReLU for a leaky ReLU with the given slope.
pub fn with_leaky_relu(templates: &[LayerTemplate], slope: f32) -> Vec<LayerTemplate> {
    templates
        .iter()
        .map(|t| match t {
            LayerTemplate::Relu => LayerTemplate::LeakyRelu { slope },
            other => other.clone(),
        })
        .collect()
}
