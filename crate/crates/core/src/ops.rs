//! Forward and backward kernels for the supported layer operators.
//!
//! Every kernel is a plain loop nest over row-major buffers. The backward
//! kernels take the forward operands plus the upstream gradient and return the
//! gradients of each differentiable operand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Output spatial extent of a sliding window.
pub fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("stride must be positive"));
    }
    let padded = size + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::dim(format!(
            "window {kernel} does not fit padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::dim(format!("{what} expects a 4-d tensor, got {s:?}"))),
    }
}

/// `out[b,o] = sum_i in[b,i] * w[o,i] + bias[o]`. Inputs with more than two
/// dimensions are flattened per sample.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (batch, inner) = (input.batch(), input.row_len());
    let [out, w_in] = *weight.shape() else {
        return Err(Error::dim(format!("dense weight must be 2-d, got {:?}", weight.shape())));
    };
    if w_in != inner {
        return Err(Error::dim(format!(
            "dense input has {inner} features, weight expects {w_in}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [out] {
            return Err(Error::dim(format!("dense bias {:?} vs {out} outputs", b.shape())));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut y = vec![0.0f32; batch * out];
    for bi in 0..batch {
        let row = &x[bi * inner..(bi + 1) * inner];
        for o in 0..out {
            let wr = &w[o * inner..(o + 1) * inner];
            let mut acc = 0.0f32;
            for i in 0..inner {
                acc += row[i] * wr[i];
            }
            y[bi * out + o] = acc + bias.map_or(0.0, |b| b.data()[o]);
        }
    }
    Tensor::new(vec![batch, out], y)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` has the
/// original (possibly unflattened) input shape.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, inner) = (input.batch(), input.row_len());
    let out = weight.shape()[0];
    if grad_out.shape() != [batch, out] {
        return Err(Error::dim("dense upstream gradient shape mismatch"));
    }
    let x = input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut gx = vec![0.0f32; batch * inner];
    let mut gw = vec![0.0f32; out * inner];
    let mut gb = vec![0.0f32; out];
    for bi in 0..batch {
        for o in 0..out {
            let go = g[bi * out + o];
            if go == 0.0 {
                continue;
            }
            gb[o] += go;
            for i in 0..inner {
                gx[bi * inner + i] += go * w[o * inner + i];
                gw[o * inner + i] += go * x[bi * inner + i];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(vec![out, inner], gw)?,
        Tensor::new(vec![out], gb)?,
    ))
}

/// Cross-correlation of `[b,c,h,w]` with `[k,c,r,s]` plus per-channel bias.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, c, h, w) = dims4(input, "conv2d input")?;
    let (k, wc, r, s) = dims4(weight, "conv2d weight")?;
    if wc != c {
        return Err(Error::dim(format!("conv2d input has {c} channels, weight expects {wc}")));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::dim(format!("conv2d bias {:?} vs {k} kernels", b.shape())));
        }
    }
    let oh = window_out(h, r, stride, padding)?;
    let ow = window_out(w, s, stride, padding)?;
    let x = input.data();
    let wt = weight.data();
    let mut y = vec![0.0f32; batch * k * oh * ow];
    for bi in 0..batch {
        for ko in 0..k {
            let b0 = bias.map_or(0.0, |b| b.data()[ko]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for ky in 0..r {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..s {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((ko * c + ci) * r + ky) * s + kx];
                            }
                        }
                    }
                    y[((bi * k + ko) * oh + oy) * ow + ox] = acc + b0;
                }
            }
        }
    }
    Tensor::new(vec![batch, k, oh, ow], y)
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, c, h, w) = dims4(input, "conv2d input")?;
    let (k, _, r, s) = dims4(weight, "conv2d weight")?;
    let (_, _, oh, ow) = dims4(grad_out, "conv2d gradient")?;
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gx = vec![0.0f32; x.len()];
    let mut gw = vec![0.0f32; wt.len()];
    let mut gb = vec![0.0f32; k];
    for bi in 0..batch {
        for ko in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[((bi * k + ko) * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    gb[ko] += go;
                    for ci in 0..c {
                        for ky in 0..r {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..s {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                                let wi = ((ko * c + ci) * r + ky) * s + kx;
                                gx[xi] += go * wt[wi];
                                gw[wi] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![k], gb)?,
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn leaky_relu_forward(input: &Tensor, slope: f32) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { slope * x })
}

pub fn leaky_relu_backward(input: &Tensor, slope: f32, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { slope * g })
}

pub fn tanh_forward(input: &Tensor) -> Tensor {
    input.map(f32::tanh)
}

pub fn tanh_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, |y, g| (1.0 - y * y) * g)
}

/// Max or average pooling without padding.
pub fn pool_forward(input: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor> {
    pool_forward_indexed(input, kind, window, stride).map(|(y, _)| y)
}

/// Pooling that also returns, for max pooling, the flat input index selected
/// by each output (first maximum on ties).
pub fn pool_forward_indexed(
    input: &Tensor,
    kind: PoolKind,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (batch, c, h, w) = dims4(input, "pool input")?;
    let oh = window_out(h, window, stride, 0)?;
    let ow = window_out(w, window, stride, 0)?;
    let x = input.data();
    let mut y = Vec::with_capacity(batch * c * oh * ow);
    let mut idx = Vec::new();
    let area = (window * window) as f32;
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = 0;
                let mut acc = 0.0f32;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        let v = x[i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                        acc += v;
                    }
                }
                match kind {
                    PoolKind::Max => {
                        y.push(best);
                        idx.push(best_i);
                    }
                    PoolKind::Avg => y.push(acc / area),
                }
            }
        }
    }
    Ok((Tensor::new(vec![batch, c, oh, ow], y)?, idx))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::dim("maxpool gradient does not match recorded indices"));
    }
    let mut gx = vec![0.0f32; input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx[i] += g;
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn avgpool_backward(
    input_shape: &[usize],
    window: usize,
    stride: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let [batch, c, h, w] = *input_shape else {
        return Err(Error::dim("avgpool input must be 4-d"));
    };
    let (_, _, oh, ow) = dims4(grad_out, "avgpool gradient")?;
    let g = grad_out.data();
    let area = (window * window) as f32;
    let mut gx = vec![0.0f32; batch * c * h * w];
    for plane in 0..batch * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(plane * oh + oy) * ow + ox] / area;
                for ky in 0..window {
                    for kx in 0..window {
                        gx[plane * h * w + (oy * stride + ky) * w + ox * stride + kx] += go;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Inference-form batch normalisation over channel axis 1.
pub struct BatchNormParams<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub running_mean: &'a Tensor,
    pub running_var: &'a Tensor,
    pub eps: f32,
}

impl BatchNormParams<'_> {
    fn check(&self, input: &Tensor) -> Result<usize> {
        if input.ndim() < 2 {
            return Err(Error::dim("batchnorm input needs a channel axis"));
        }
        let c = input.shape()[1];
        for (name, t) in [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::dim(format!("batchnorm {name} {:?} vs {c} channels", t.shape())));
            }
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("batchnorm running variance is negative"));
        }
        if self.eps < 0.0 {
            return Err(Error::domain("batchnorm eps is negative"));
        }
        Ok(c)
    }

    fn inv_std(&self, ch: usize) -> f32 {
        1.0 / (self.running_var.data()[ch] + self.eps).sqrt()
    }
}

pub fn batchnorm_infer(input: &Tensor, p: &BatchNormParams<'_>) -> Result<Tensor> {
    let c = p.check(input)?;
    let spatial = input.row_len() / c;
    let mut y = input.data().to_vec();
    for (i, v) in y.iter_mut().enumerate() {
        let ch = (i / spatial) % c;
        let xhat = (*v - p.running_mean.data()[ch]) * p.inv_std(ch);
        *v = p.gamma.data()[ch] * xhat + p.beta.data()[ch];
    }
    Tensor::new(input.shape().to_vec(), y)
}

/// Gradients of the inference form with frozen running statistics:
/// `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    input: &Tensor,
    p: &BatchNormParams<'_>,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let c = p.check(input)?;
    let spatial = input.row_len() / c;
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![0.0f32; x.len()];
    let mut gg = vec![0.0f32; c];
    let mut gb = vec![0.0f32; c];
    for i in 0..x.len() {
        let ch = (i / spatial) % c;
        let inv = p.inv_std(ch);
        let xhat = (x[i] - p.running_mean.data()[ch]) * inv;
        gx[i] = g[i] * p.gamma.data()[ch] * inv;
        gg[ch] += g[i] * xhat;
        gb[ch] += g[i];
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(vec![c], gg)?,
        Tensor::new(vec![c], gb)?,
    ))
}

/// Smooth non-zero counter `sum_j x_j^2 / (x_j^2 + sigma)`.
pub fn l0_hat(activations: &Tensor, sigma: f32) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::domain(format!("l0 sharpness must be positive, got {sigma}")));
    }
    let s = sigma as f64;
    Ok(activations
        .data()
        .iter()
        .map(|&x| {
            let x2 = (x as f64) * (x as f64);
            x2 / (x2 + s)
        })
        .sum())
}

/// Derivative of one `l0_hat` term: `2 x sigma / (x^2 + sigma)^2`.
pub fn l0_hat_grad(x: f32, sigma: f32) -> f32 {
    let (x, s) = (x as f64, sigma as f64);
    let d = x * x + s;
    (2.0 * x * s / (d * d)) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_examples() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = dense_forward(&t(&[1, 2], &[1.0, 0.0]), &eye, Some(&t(&[2], &[0.0, 0.0]))).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        let y = dense_forward(&t(&[1, 2], &[1.0, 2.0]), &t(&[1, 2], &[3.0, 4.0]), Some(&t(&[1], &[1.0]))).unwrap();
        assert_eq!(y.data(), &[12.0]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let r = dense_forward(&t(&[1, 3], &[0.0; 3]), &t(&[2, 2], &[0.0; 4]), None);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_and_bias() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let y = conv2d_forward(&x, &t(&[1, 1, 1, 1], &[1.0]), Some(&t(&[1], &[0.0])), 1, 0).unwrap();
        assert_eq!(y, x);
        let z = Tensor::zeros(&[1, 1, 3, 3]);
        let y = conv2d_forward(&z, &t(&[1, 1, 2, 2], &[1.0; 4]), Some(&t(&[1], &[2.5])), 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let r = conv2d_forward(&Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 1, 5, 5]), None, 1, 1);
        assert!(matches!(r, Err(Error::Dimension(_))));
        assert!(conv2d_forward(&Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1, 1, 4, 4]), None, 1, 1).is_ok());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu_forward(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&t(&[2], &[-1.0, -3.0])).count_nonzero(), 0);
    }

    #[test]
    fn pool_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool_forward(&x, PoolKind::Max, 2, 2).unwrap().data(), &[4.0]);
        assert_eq!(pool_forward(&x, PoolKind::Avg, 2, 2).unwrap().data(), &[2.5]);
        assert!(pool_forward(&x, PoolKind::Max, 3, 1).is_err());
    }

    #[test]
    fn batchnorm_identity_and_shift() {
        let x = t(&[2, 2], &[0.5, -1.0, 3.0, 2.0]);
        let one = t(&[2], &[1.0, 1.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        let p = BatchNormParams { gamma: &one, beta: &zero, running_mean: &zero, running_var: &one, eps: 0.0 };
        assert_eq!(batchnorm_infer(&x, &p).unwrap(), x);
        let shifted = t(&[2], &[0.0, 0.75]);
        let p2 = BatchNormParams { beta: &shifted, ..p };
        let y = batchnorm_infer(&x, &p2).unwrap();
        assert_eq!(y.data(), &[0.5, -0.25, 3.0, 2.75]);
        let neg = t(&[2], &[1.0, -1.0]);
        let p3 = BatchNormParams { running_var: &neg, ..p };
        assert!(matches!(batchnorm_infer(&x, &p3), Err(Error::Domain(_))));
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(tanh_forward(&t(&[1], &[0.0])).data(), &[0.0]);
        assert!((tanh_forward(&t(&[1], &[20.0])).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l0_hat_examples() {
        assert_eq!(l0_hat(&Tensor::zeros(&[4]), 1e-4).unwrap(), 0.0);
        let v = l0_hat(&t(&[1], &[1.0]), 1e-4).unwrap();
        assert!((v - 1.0 / (1.0 + 1e-4f32 as f64)).abs() < 1e-12);
        assert!(l0_hat(&t(&[1], &[1.0]), 0.0).is_err());
        assert!(l0_hat(&t(&[1], &[1.0]), -1.0).is_err());
    }
}
