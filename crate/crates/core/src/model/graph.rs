use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, PoolKind};
use crate::tensor::Tensor;

/// Operator and attributes of one layer. Parameters are referenced by name
/// into the graph's tensor store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Conv2d {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        stride: usize,
        padding: usize,
    },
    Relu,
    LeakyRelu {
        slope: f32,
    },
    #[serde(rename = "maxpool")]
    MaxPool { window: usize, stride: usize },
    #[serde(rename = "avgpool")]
    AvgPool { window: usize, stride: usize },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
        eps: f32,
    },
    Tanh,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::LeakyRelu { .. } => "leaky_relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Tanh => "tanh",
        }
    }

    /// ReLU and pooling layers emit exact zeros.
    pub fn is_sparsity(&self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. })
    }

    pub fn is_pool(&self) -> bool {
        matches!(self, LayerKind::MaxPool { .. } | LayerKind::AvgPool { .. })
    }

    /// The bias-like parameter: dense/conv bias or batch-norm beta.
    pub fn bias_param(&self) -> Option<&str> {
        match self {
            LayerKind::Dense { bias, .. } | LayerKind::Conv2d { bias, .. } => bias.as_deref(),
            LayerKind::BatchNorm { beta, .. } => Some(beta),
            _ => None,
        }
    }

    /// Every parameter tensor referenced, trainable or not.
    pub fn param_names(&self) -> Vec<&str> {
        match self {
            LayerKind::Dense { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                std::iter::once(weight.as_str()).chain(bias.as_deref()).collect()
            }
            LayerKind::BatchNorm { gamma, beta, running_mean, running_var, .. } => {
                vec![gamma, beta, running_mean, running_var]
            }
            _ => vec![],
        }
    }

    /// Parameters updated by gradient descent (running statistics excluded).
    pub fn trainable_names(&self) -> Vec<&str> {
        match self {
            LayerKind::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            other => other.param_names(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

/// Sequential model: an ordered layer chain plus a named tensor store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, Tensor>,
}

/// Recorded activations of one inference pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
}

impl ForwardTrace {
    /// The tensor fed into layer `i`.
    pub fn layer_input(&self, i: usize) -> &Tensor {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }
}

/// Tape handles produced by [`ModelGraph::forward_tape`].
#[derive(Debug)]
pub struct TapeForward {
    pub input: Var,
    pub outputs: Vec<Var>,
    pub params: BTreeMap<String, Var>,
}

impl TapeForward {
    pub fn output(&self) -> Var {
        *self.outputs.last().unwrap_or(&self.input)
    }
}

impl ModelGraph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let g = ModelGraph { input_shape, layers, params };
        g.validate()?;
        Ok(g)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor '{name}'")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor '{name}'")))
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Config(format!("no layer named '{name}'")))
    }

    /// Names of all trainable parameters in layer order.
    pub fn trainable_params(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.kind.trainable_names().into_iter().map(String::from))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Checks names, tensor references and shapes along the whole chain and
    /// returns each layer's per-sample output shape.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut seen = HashSet::new();
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Config(format!("duplicate layer name '{}'", layer.name)));
            }
            for p in layer.kind.param_names() {
                if !self.params.contains_key(p) {
                    return Err(Error::Config(format!(
                        "layer '{}' references missing tensor '{p}'",
                        layer.name
                    )));
                }
            }
            shape = self
                .layer_out_shape(layer, &shape)
                .map_err(|e| Error::Config(format!("layer '{}': {e}", layer.name)))?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    fn layer_out_shape(&self, layer: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match *shape {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::dim(format!("{what} needs a [c,h,w] input, got {shape:?}"))),
            }
        };
        Ok(match &layer.kind {
            LayerKind::Dense { weight, bias } => {
                let w = &self.params[weight];
                let inner: usize = shape.iter().product();
                match *w.shape() {
                    [out, i] if i == inner => {
                        if let Some(b) = bias {
                            if self.params[b].shape() != [out] {
                                return Err(Error::dim("bias length differs from output count"));
                            }
                        }
                        vec![out]
                    }
                    _ => return Err(Error::dim(format!("weight {:?} vs {inner} inputs", w.shape()))),
                }
            }
            LayerKind::Conv2d { weight, bias, stride, padding } => {
                let (c, h, wd) = spatial("conv2d")?;
                let w = &self.params[weight];
                let [k, wc, r, s] = *w.shape() else {
                    return Err(Error::dim("conv2d weight must be 4-d"));
                };
                if wc != c {
                    return Err(Error::dim(format!("weight expects {wc} channels, input has {c}")));
                }
                if let Some(b) = bias {
                    if self.params[b].shape() != [k] {
                        return Err(Error::dim("bias length differs from kernel count"));
                    }
                }
                vec![
                    k,
                    ops::window_out(h, r, *stride, *padding)?,
                    ops::window_out(wd, s, *stride, *padding)?,
                ]
            }
            LayerKind::MaxPool { window, stride } | LayerKind::AvgPool { window, stride } => {
                let (c, h, w) = spatial("pooling")?;
                vec![c, ops::window_out(h, *window, *stride, 0)?, ops::window_out(w, *window, *stride, 0)?]
            }
            LayerKind::BatchNorm { gamma, beta, running_mean, running_var, eps } => {
                let c = shape[0];
                for t in [gamma, beta, running_mean, running_var] {
                    if self.params[t].shape() != [c] {
                        return Err(Error::dim(format!("'{t}' does not match {c} channels")));
                    }
                }
                if *eps < 0.0 || self.params[running_var].data().iter().any(|&v| v < 0.0) {
                    return Err(Error::domain("negative variance or eps"));
                }
                shape.to_vec()
            }
            LayerKind::Relu | LayerKind::LeakyRelu { .. } | LayerKind::Tanh => shape.to_vec(),
        })
    }

    fn apply(&self, layer: &LayerSpec, x: &Tensor) -> Result<Tensor> {
        let p = |n: &str| self.param(n);
        let y = match &layer.kind {
            LayerKind::Dense { weight, bias } => {
                ops::dense_forward(x, p(weight)?, bias.as_deref().map(p).transpose()?)?
            }
            LayerKind::Conv2d { weight, bias, stride, padding } => ops::conv2d_forward(
                x,
                p(weight)?,
                bias.as_deref().map(p).transpose()?,
                *stride,
                *padding,
            )?,
            LayerKind::Relu => ops::relu_forward(x),
            LayerKind::LeakyRelu { slope } => ops::leaky_relu_forward(x, *slope),
            LayerKind::Tanh => ops::tanh_forward(x),
            LayerKind::MaxPool { window, stride } => ops::pool_forward(x, PoolKind::Max, *window, *stride)?,
            LayerKind::AvgPool { window, stride } => ops::pool_forward(x, PoolKind::Avg, *window, *stride)?,
            LayerKind::BatchNorm { gamma, beta, running_mean, running_var, eps } => ops::batchnorm_infer(
                x,
                &BatchNormParams {
                    gamma: p(gamma)?,
                    beta: p(beta)?,
                    running_mean: p(running_mean)?,
                    running_var: p(running_var)?,
                    eps: *eps,
                },
            )?,
        };
        y.check_finite(&format!("output of layer '{}'", layer.name))?;
        Ok(y)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.ndim() < 2 || input.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "model expects [batch, {:?}] input, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Inference pass returning the final output.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = self.apply(layer, &x)?;
        }
        Ok(x)
    }

    /// Inference pass that keeps every layer's output.
    pub fn forward_trace(&self, input: &Tensor) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = self.apply(layer, outputs.last().unwrap_or(input))?;
            outputs.push(y);
        }
        Ok(ForwardTrace { input: input.clone(), outputs })
    }

    /// Records a differentiable forward pass on `tape`. Trainable parameters
    /// are registered under their tensor names.
    pub fn forward_tape(&self, tape: &mut Tape, input: &Tensor) -> Result<TapeForward> {
        self.check_input(input)?;
        let mut params = BTreeMap::new();
        for name in self.trainable_params() {
            let v = tape.param(&name, self.param(&name)?.clone());
            params.insert(name, v);
        }
        let x0 = tape.leaf(input.clone());
        let mut x = x0;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = match &layer.kind {
                LayerKind::Dense { weight, bias } => {
                    tape.dense(x, params[weight], bias.as_ref().map(|b| params[b]))?
                }
                LayerKind::Conv2d { weight, bias, stride, padding } => {
                    tape.conv2d(x, params[weight], bias.as_ref().map(|b| params[b]), *stride, *padding)?
                }
                LayerKind::Relu => tape.relu(x)?,
                LayerKind::LeakyRelu { slope } => tape.leaky_relu(x, *slope)?,
                LayerKind::Tanh => tape.tanh(x)?,
                LayerKind::MaxPool { window, stride } => tape.pool(x, PoolKind::Max, *window, *stride)?,
                LayerKind::AvgPool { window, stride } => tape.pool(x, PoolKind::Avg, *window, *stride)?,
                LayerKind::BatchNorm { gamma, beta, running_mean, running_var, eps } => tape.batchnorm(
                    x,
                    params[gamma],
                    params[beta],
                    self.param(running_mean)?,
                    self.param(running_var)?,
                    *eps,
                )?,
            };
            tape.value(x)
                .check_finite(&format!("output of layer '{}'", layer.name))?;
            outputs.push(x);
        }
        Ok(TapeForward { input: x0, outputs, params })
    }

    /// Arg-max class per sample of the final output.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(input)?))
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.data()
        .chunks(t.row_len())
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
