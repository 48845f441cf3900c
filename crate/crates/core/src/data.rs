//! Desk-scale datasets: IDX image/label files, CSV feature tables and seeded
//! Gaussian blobs, plus stratified subsetting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    /// Per-sample shape.
    pub shape: Vec<usize>,
    /// Values lie in `[0, dynamic_range]`.
    pub dynamic_range: f32,
    #[serde(default)]
    pub splits: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Option<Vec<usize>>, manifest: Manifest) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::domain(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.len()
                )));
            }
        }
        if let Some(bad) = samples.iter().find(|s| s.shape() != manifest.shape.as_slice()) {
            return Err(Error::dim(format!(
                "sample shape {:?} differs from manifest {:?}",
                bad.shape(),
                manifest.shape
            )));
        }
        Ok(Dataset { samples, labels, manifest })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.manifest.shape
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Config(format!("dataset '{}' has no labels", self.manifest.name)))
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            manifest: self.manifest.clone(),
        }
    }

    /// Consecutive batches of at most `batch_size` samples, stacked.
    pub fn batches(&self, batch_size: usize) -> Vec<Tensor> {
        self.batch_ranges(batch_size)
            .map(|(s, e)| {
                let refs: Vec<&Tensor> = self.samples[s..e].iter().collect();
                Tensor::stack(&refs).expect("samples share a shape")
            })
            .collect()
    }

    pub fn labeled_batches(&self, batch_size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        let labels = self.labels()?;
        Ok(self
            .batch_ranges(batch_size)
            .zip(self.batches(batch_size))
            .map(|((s, e), x)| (x, labels[s..e].to_vec()))
            .collect())
    }

    fn batch_ranges(&self, batch_size: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |s| (s, (s + bs).min(self.len())))
    }

    /// Seeded stratified train/test split; `test_fraction` of every class goes
    /// to the test side.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let test_idx = stratified_indices(self, test_fraction, seed)?;
        let mut in_test = vec![false; self.len()];
        for &i in &test_idx {
            in_test[i] = true;
        }
        let train_idx: Vec<usize> = (0..self.len()).filter(|&i| !in_test[i]).collect();
        if train_idx.is_empty() {
            return Err(Error::domain("split leaves no training samples"));
        }
        let mut train = self.select(&train_idx);
        let mut test = self.select(&test_idx);
        train.manifest.name = format!("{}/train", self.manifest.name);
        test.manifest.name = format!("{}/test", self.manifest.name);
        Ok((train, test))
    }
}

fn stratified_indices(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let target = (fraction * ds.len() as f64).round() as usize;
    if target == 0 {
        return Err(Error::domain(format!(
            "fraction {fraction} of {} samples selects nothing",
            ds.len()
        )));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    match &ds.labels {
        Some(l) => l.iter().enumerate().for_each(|(i, &c)| groups.entry(c).or_default().push(i)),
        None => {
            groups.insert(0, (0..ds.len()).collect());
        }
    }
    // Largest-remainder apportionment keeps every class within one sample of
    // its exact share.
    let mut quotas: Vec<(usize, usize, f64)> = groups
        .iter()
        .map(|(&c, idx)| {
            let exact = fraction * idx.len() as f64;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &o in order.iter().take(target.saturating_sub(assigned)) {
        quotas[o].1 += 1;
    }

    let mut rng = rng::rng(seed);
    let mut chosen = Vec::with_capacity(target);
    for (c, n, _) in quotas {
        let mut idx = groups[&c].clone();
        idx.shuffle(&mut rng);
        chosen.extend(idx.into_iter().take(n));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Seeded sample without replacement, stratified by label when present.
pub fn subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let idx = stratified_indices(ds, fraction, seed)?;
    let mut out = ds.select(&idx);
    out.manifest.name = format!("{}[{fraction}]", ds.manifest.name);
    Ok(out)
}

/// Default within-cluster standard deviation of [`synth_blobs`].
pub const DEFAULT_BLOB_SPREAD: f32 = 0.1;

/// Gaussian clusters, one per class, with centres drawn uniformly from
/// `[0.2, 0.8]` per coordinate and values clamped to `[0, 1]`.
pub fn synth_blobs(classes: usize, samples_per_class: usize, shape: &[usize], seed: u64) -> Result<Dataset> {
    synth_blobs_with_spread(classes, samples_per_class, shape, DEFAULT_BLOB_SPREAD, seed)
}

pub fn synth_blobs_with_spread(
    classes: usize,
    samples_per_class: usize,
    shape: &[usize],
    spread: f32,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || samples_per_class == 0 || shape.is_empty() || shape.contains(&0) {
        return Err(Error::domain("blob generator needs positive arguments"));
    }
    if !(spread >= 0.0) {
        return Err(Error::domain("blob spread must be non-negative"));
    }
    let dims: usize = shape.iter().product();
    let mut rng = rng::rng(seed);
    let centre = Uniform::new(0.2f32, 0.8).expect("valid range");
    let noise = Normal::new(0.0f32, spread).map_err(|e| Error::domain(e.to_string()))?;
    let centres: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dims).map(|_| centre.sample(&mut rng)).collect())
        .collect();
    let mut samples = Vec::with_capacity(classes * samples_per_class);
    let mut labels = Vec::with_capacity(classes * samples_per_class);
    // Interleave classes so that consecutive batches are balanced.
    for _ in 0..samples_per_class {
        for (c, mu) in centres.iter().enumerate() {
            let data = mu
                .iter()
                .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            samples.push(Tensor::new(shape.to_vec(), data)?);
            labels.push(c);
        }
    }
    let manifest = Manifest {
        name: format!("blobs{classes}x{samples_per_class}"),
        shape: shape.to_vec(),
        dynamic_range: 1.0,
        splits: BTreeMap::from([("all".to_string(), samples.len())]),
        seed: Some(seed),
    };
    Dataset::new(samples, Some(labels), manifest)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::load(path, format!("truncated header at byte offset {offset}")))
}

/// Parses big-endian IDX images (and optionally labels), scaling pixels to
/// `[0, 1]`. Samples have shape `[1, rows, cols]`.
pub fn load_idx(image_path: &Path, label_path: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(image_path).map_err(|e| Error::io(image_path, e))?;
    let magic = be_u32(&bytes, 0, image_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::load(image_path, format!("bad magic 0x{magic:08x} at byte offset 0")));
    }
    let n = be_u32(&bytes, 4, image_path)? as usize;
    let rows = be_u32(&bytes, 8, image_path)? as usize;
    let cols = be_u32(&bytes, 12, image_path)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::load(image_path, "zero extent in header at byte offset 4"));
    }
    let px = rows * cols;
    let need = 16 + n * px;
    if bytes.len() < need {
        return Err(Error::load(
            image_path,
            format!("truncated pixel data: expected {need} bytes, file ends at byte offset {}", bytes.len()),
        ));
    }
    let samples = bytes[16..need]
        .chunks_exact(px)
        .map(|c| Tensor::new(vec![1, rows, cols], c.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect::<Result<Vec<_>>>()?;

    let labels = match label_path {
        None => None,
        Some(lp) => {
            let lb = fs::read(lp).map_err(|e| Error::io(lp, e))?;
            let magic = be_u32(&lb, 0, lp)?;
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::load(lp, format!("bad magic 0x{magic:08x} at byte offset 0")));
            }
            let ln = be_u32(&lb, 4, lp)? as usize;
            if ln != n {
                return Err(Error::load(lp, format!("{ln} labels for {n} images (byte offset 4)")));
            }
            if lb.len() < 8 + ln {
                return Err(Error::load(
                    lp,
                    format!("truncated labels: expected {} bytes, file ends at byte offset {}", 8 + ln, lb.len()),
                ));
            }
            Some(lb[8..8 + ln].iter().map(|&b| b as usize).collect())
        }
    };
    let manifest = Manifest {
        name: image_path
            .file_stem()
            .map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned()),
        shape: vec![1, rows, cols],
        dynamic_range: 1.0,
        splits: BTreeMap::from([("all".to_string(), n)]),
        seed: None,
    };
    Dataset::new(samples, labels, manifest)
}

/// Writes images in `[0, 1]` (shape `[1, rows, cols]`) as IDX files.
pub fn write_idx(ds: &Dataset, image_path: &Path, label_path: Option<&Path>) -> Result<()> {
    let [1, rows, cols] = *ds.sample_shape() else {
        return Err(Error::dim("IDX export needs [1, rows, cols] samples"));
    };
    let mut out = Vec::with_capacity(16 + ds.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for s in &ds.samples {
        out.extend(s.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(image_path, out).map_err(|e| Error::io(image_path, e))?;
    if let Some(lp) = label_path {
        let labels = ds.labels()?;
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend(labels.iter().map(|&l| l as u8));
        fs::write(lp, out).map_err(|e| Error::io(lp, e))?;
    }
    Ok(())
}

/// CSV feature table with a header row. With `label_column`, that column holds
/// integer class labels and the remaining columns are features.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::load(path, e.to_string()))?.clone();
    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::load(path, format!("no column named '{name}'")))?,
        ),
        None => None,
    };
    let width = headers.len() - label_idx.is_some() as usize;
    if width == 0 {
        return Err(Error::load(path, "no feature columns"));
    }
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut max_abs = 0.0f32;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        let mut feats = Vec::with_capacity(width);
        for (col, field) in rec.iter().enumerate() {
            let field = field.trim();
            if Some(col) == label_idx {
                labels.push(field.parse::<usize>().map_err(|_| {
                    Error::load(path, format!("row {}: bad label '{field}'", row + 1))
                })?);
            } else {
                let v: f32 = field
                    .parse()
                    .map_err(|_| Error::load(path, format!("row {}: bad number '{field}'", row + 1)))?;
                if !v.is_finite() {
                    return Err(Error::load(path, format!("row {}: non-finite value", row + 1)));
                }
                max_abs = max_abs.max(v.abs());
                feats.push(v);
            }
        }
        samples.push(Tensor::new(vec![width], feats)?);
    }
    if samples.is_empty() {
        return Err(Error::load(path, "no data rows"));
    }
    let n = samples.len();
    let manifest = Manifest {
        name: path
            .file_stem()
            .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
        shape: vec![width],
        dynamic_range: max_abs.max(1.0),
        splits: BTreeMap::from([("all".to_string(), n)]),
        seed: None,
    };
    Dataset::new(samples, label_idx.map(|_| labels), manifest)
}
