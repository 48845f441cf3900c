//! Task metrics: classification accuracy and structural similarity.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::domain("accuracy of an empty label list"));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// A `[channels, height, width]` image with values in `[0, range]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Tensor,
    range: f32,
}

impl Image {
    pub fn new(pixels: Tensor, range: f32) -> Result<Self> {
        if pixels.ndim() != 3 {
            return Err(Error::dim(format!("image must be [c,h,w], got {:?}", pixels.shape())));
        }
        if !(range > 0.0) {
            return Err(Error::domain("dynamic range must be positive"));
        }
        if pixels.data().iter().any(|&v| !(0.0..=range).contains(&v)) {
            return Err(Error::domain(format!("pixel outside [0, {range}]")));
        }
        Ok(Image { pixels, range })
    }

    /// Clamps into range and reshapes flat data to `[1, 1, n]` when the
    /// tensor is not already an image.
    pub fn clamped(t: &Tensor, range: f32) -> Result<Self> {
        let shaped = match t.ndim() {
            3 => t.clone(),
            2 => t.reshape(&[1, t.shape()[0], t.shape()[1]])?,
            _ => t.reshape(&[1, 1, t.numel()])?,
        };
        Image::new(shaped.map(|v| v.clamp(0.0, range)), range)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }

    pub fn range(&self) -> f32 {
        self.range
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Side of the square uniform window; clipped to the image size.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 8, k1: 0.01, k2: 0.03 }
    }
}

/// Mean SSIM over every window position, averaged over channels.
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::domain(format!("image shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.range != b.range {
        return Err(Error::domain("images declare different dynamic ranges"));
    }
    let (c, h, w) = a.dims();
    let win = p.window.min(h).min(w).max(1);
    let l = a.range as f64;
    let c1 = (p.k1 * l).powi(2);
    let c2 = (p.k2 * l).powi(2);
    let n = (win * win) as f64;
    let (xa, xb) = (a.pixels.data(), b.pixels.data());

    let mut total = 0.0;
    for ch in 0..c {
        let plane = ch * h * w;
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let at = |buf: &[f32], dy: usize, dx: usize| buf[plane + (y0 + dy) * w + x0 + dx] as f64;
                let (mut ma, mut mb) = (0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        ma += at(xa, dy, dx);
                        mb += at(xb, dy, dx);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let da = at(xa, dy, dx) - ma;
                        let db = at(xb, dy, dx) - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

/// Mean per-sample SSIM between the outputs of two models on `dataset`,
/// with outputs clamped to the dataset's dynamic range.
pub fn mean_ssim(model_a: &ModelGraph, model_b: &ModelGraph, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::domain("mean SSIM over an empty dataset"));
    }
    let range = dataset.manifest.dynamic_range;
    let shape = dataset.sample_shape();
    let params = SsimParams::default();
    let mut total = 0.0;
    for batch in dataset.batches(batch_size) {
        let ya = model_a.forward(&batch)?.unstack();
        let yb = model_b.forward(&batch)?.unstack();
        for (a, b) in ya.iter().zip(&yb) {
            let as_sample = |t: &Tensor| -> Result<Tensor> {
                if t.numel() == shape.iter().product::<usize>() {
                    t.reshape(shape)
                } else {
                    Ok(t.clone())
                }
            };
            total += ssim(
                &Image::clamped(&as_sample(a)?, range)?,
                &Image::clamped(&as_sample(b)?, range)?,
                &params,
            )?;
        }
    }
    Ok(total / dataset.len() as f64)
}
