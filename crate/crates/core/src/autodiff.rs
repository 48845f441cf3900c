//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Tape`] records each operation's output value together with the
//! operands needed for its backward rule. [`Tape::backward`] walks the tape in
//! reverse from a scalar loss and returns one gradient per node.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, PoolKind};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient of a named trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub param: String,
    pub value: Tensor,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { input: Var, weight: Var, bias: Option<Var> },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, window: usize, stride: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Tensor, var: Tensor, eps: f32 },
    Sum(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    L0Hat { input: Var, sigma: f32, row_weights: Option<Vec<f32>> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Mse { pred: Var, target: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    /// Gradient with respect to any node, if the loss depends on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every registered parameter reachable from the loss.
    pub fn params(&self) -> Vec<Gradient> {
        self.params
            .iter()
            .filter_map(|(i, name)| {
                self.grads[*i].as_ref().map(|g| Gradient {
                    param: name.clone(),
                    value: g.clone(),
                })
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not recorded on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter identified by name.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = ops::dense_forward(
            &self.node(input)?.value,
            &self.node(weight)?.value,
            bias.map(|b| self.node(b)).transpose()?.map(|n| &n.value),
        )?;
        Ok(self.push(y, Op::Dense { input, weight, bias }))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = ops::conv2d_forward(
            &self.node(input)?.value,
            &self.node(weight)?.value,
            bias.map(|b| self.node(b)).transpose()?.map(|n| &n.value),
            stride,
            padding,
        )?;
        Ok(self.push(y, Op::Conv2d { input, weight, bias, stride, padding }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu_forward(&self.node(x)?.value);
        Ok(self.push(y, Op::Relu(x)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let y = ops::leaky_relu_forward(&self.node(x)?.value, slope);
        Ok(self.push(y, Op::LeakyRelu(x, slope)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = ops::tanh_forward(&self.node(x)?.value);
        Ok(self.push(y, Op::Tanh(x)))
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::pool_forward_indexed(&self.node(x)?.value, kind, window, stride)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { input: x, argmax },
            PoolKind::Avg => Op::AvgPool { input: x, window, stride },
        };
        Ok(self.push(y, op))
    }

    /// Inference-form batch norm; `gamma` and `beta` are differentiable,
    /// running statistics are constants.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor,
        var: &Tensor,
        eps: f32,
    ) -> Result<Var> {
        let y = ops::batchnorm_infer(
            &self.node(x)?.value,
            &BatchNormParams {
                gamma: &self.node(gamma)?.value,
                beta: &self.node(beta)?.value,
                running_mean: mean,
                running_var: var,
                eps,
            },
        )?;
        Ok(self.push(
            y,
            Op::BatchNorm { input: x, gamma, beta, mean: mean.clone(), var: var.clone(), eps },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.sum() as f32;
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.node(a)?.value.zip_map(&self.node(b)?.value, |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.node(a)?.value.zip_map(&self.node(b)?.value, |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let y = self.node(x)?.value.map(|v| v * c);
        Ok(self.push(y, Op::Scale(x, c)))
    }

    /// Smooth non-zero count of `x`. With `row_weights`, the term for each
    /// leading-axis row is multiplied by its weight; zero-weight rows receive
    /// exactly zero gradient.
    pub fn l0_hat(&mut self, x: Var, sigma: f32, row_weights: Option<Vec<f32>>) -> Result<Var> {
        let value = &self.node(x)?.value;
        if let Some(w) = &row_weights {
            if w.len() != value.batch() {
                return Err(Error::dim("l0 row weights must match the batch"));
            }
        }
        ops::l0_hat(&Tensor::scalar(0.0), sigma)?;
        let row = value.row_len();
        let s = sigma as f64;
        let mut total = 0.0f64;
        for (r, chunk) in value.data().chunks(row).enumerate() {
            let wgt = row_weights.as_ref().map_or(1.0, |w| w[r] as f64);
            if wgt == 0.0 {
                continue;
            }
            let part: f64 = chunk
                .iter()
                .map(|&v| {
                    let v2 = (v as f64) * (v as f64);
                    v2 / (v2 + s)
                })
                .sum();
            total += wgt * part;
        }
        Ok(self.push(
            Tensor::scalar(total as f32),
            Op::L0Hat { input: x, sigma, row_weights },
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = &self.node(logits)?.value;
        let [batch, classes] = *z.shape() else {
            return Err(Error::dim("cross-entropy expects [batch, classes] logits"));
        };
        if labels.len() != batch {
            return Err(Error::dim("label count does not match batch"));
        }
        let mut probs = vec![0.0f32; batch * classes];
        let mut loss = 0.0f64;
        for (b, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::domain(format!("label {label} out of range for {classes} classes")));
            }
            let row = &z.data()[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            for c in 0..classes {
                probs[b * classes + c] = ((row[c] as f64 - m).exp() / denom) as f32;
            }
            loss += -(row[label] as f64 - m - denom.ln());
        }
        let value = Tensor::scalar((loss / batch as f64) as f32);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Mean squared error against a constant target of the same element count.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = &self.node(pred)?.value;
        if p.numel() != target.numel() {
            return Err(Error::dim("mse target size mismatch"));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let value = Tensor::scalar((s / p.numel() as f64) as f32);
        Ok(self.push(value, Op::Mse { pred, target: target.clone() }))
    }

    /// Back-propagates from a scalar `loss` seeded with 1.0.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.local_grads(node, &g)?;
            grads[i] = Some(g);
            for (v, cg) in contributions {
                accumulate(&mut grads[v.0], cg)?;
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.clone().map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Dense { input, weight, bias } => {
                let (gx, gw, gb) = ops::dense_backward(val(*input), val(*weight), g)?;
                let mut out = vec![(*input, gx), (*weight, gw)];
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
                out
            }
            Op::Conv2d { input, weight, bias, stride, padding } => {
                let (gx, gw, gb) =
                    ops::conv2d_backward(val(*input), val(*weight), *stride, *padding, g)?;
                let mut out = vec![(*input, gx), (*weight, gw)];
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
                out
            }
            Op::Relu(x) => vec![(*x, ops::relu_backward(val(*x), g)?)],
            Op::LeakyRelu(x, s) => vec![(*x, ops::leaky_relu_backward(val(*x), *s, g)?)],
            Op::Tanh(x) => vec![(*x, ops::tanh_backward(&node.value, g)?)],
            Op::MaxPool { input, argmax } => {
                vec![(*input, ops::maxpool_backward(val(*input).shape(), argmax, g)?)]
            }
            Op::AvgPool { input, window, stride } => vec![(
                *input,
                ops::avgpool_backward(val(*input).shape(), *window, *stride, g)?,
            )],
            Op::BatchNorm { input, gamma, beta, mean, var, eps } => {
                let p = BatchNormParams {
                    gamma: val(*gamma),
                    beta: val(*beta),
                    running_mean: mean,
                    running_var: var,
                    eps: *eps,
                };
                let (gx, gg, gb) = ops::batchnorm_backward(val(*input), &p, g)?;
                vec![(*input, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::Mul(a, b) => vec![
                (*a, val(*b).zip_map(g, |y, gg| y * gg)?),
                (*b, val(*a).zip_map(g, |y, gg| y * gg)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::L0Hat { input, sigma, row_weights } => {
                let x = val(*input);
                let row = x.row_len();
                let seed = g.data()[0];
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let w = row_weights.as_ref().map_or(1.0, |w| w[j / row]);
                        if w == 0.0 {
                            0.0
                        } else {
                            seed * w * ops::l0_hat_grad(v, *sigma)
                        }
                    })
                    .collect();
                vec![(*input, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = val(*logits).shape()[1];
                let scale = g.data()[0] / labels.len() as f32;
                let mut d = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new(val(*logits).shape().to_vec(), d)?)]
            }
            Op::Mse { pred, target } => {
                let p = val(*pred);
                let scale = 2.0 * g.data()[0] / p.numel() as f32;
                let d = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| scale * (a - b))
                    .collect();
                vec![(*pred, Tensor::new(p.shape().to_vec(), d)?)]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::dim("gradient shape mismatch during accumulation"));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}
