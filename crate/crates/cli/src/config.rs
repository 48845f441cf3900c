//! Experiment configuration: one JSON document, every key optional, flags
//! layered on top.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use skipsponge_core::attack::AttackConfig;
use skipsponge_core::data::{load_csv, load_idx, synth_blobs_with_spread, Dataset, DEFAULT_BLOB_SPREAD};
use skipsponge_core::defense::{DefenseKind, Schedules, L2_GRID};
use skipsponge_core::model::builder::{mlp, toy_cnn, LayerTemplate};
use skipsponge_core::poison::PoisonConfig;
use skipsponge_core::rng::component_seed;
use skipsponge_core::{CostConstants, Task, TrainConfig};

use crate::error::{CliError, Result};

/// Flags shared by every verb. Each one overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model file to operate on (initial model for train/poison).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Largest tolerated performance drop in points.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Bias step in units of the activation standard deviation.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Sponge loss weight.
    #[arg(long, global = true)]
    pub lambda: Option<f32>,
    /// Fraction of training samples carrying the sponge term.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Attacker's fraction of the training split.
    #[arg(long, global = true)]
    pub subset: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Blobs {
        #[serde(default = "blob_classes")]
        classes: usize,
        #[serde(default = "blob_count")]
        per_class: usize,
        #[serde(default = "blob_shape")]
        shape: Vec<usize>,
        #[serde(default = "blob_spread")]
        spread: f32,
    },
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: Option<String>,
    },
}

fn blob_classes() -> usize {
    4
}
fn blob_count() -> usize {
    500
}
fn blob_shape() -> Vec<usize> {
    vec![1, 8, 8]
}
fn blob_spread() -> f32 {
    DEFAULT_BLOB_SPREAD
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Blobs { classes: blob_classes(), per_class: blob_count(), shape: blob_shape(), spread: blob_spread() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "test_fraction")]
    pub test_fraction: f64,
}

fn test_fraction() -> f64 {
    0.2
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { source: DataSource::default(), test_fraction: test_fraction() }
    }
}

/// Either a template chain or a saved model; with neither, a toy CNN (image
/// data) or a two-layer MLP (flat data) sized to the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub arch: Option<Vec<LayerTemplate>>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub task: Task,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 10, batch_size: 32, lr: 0.05, momentum: 0.9, weight_decay: 5e-4, task: Task::Classification }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub tau: f64,
    pub alpha: f64,
    pub subset: f64,
    #[serde(default)]
    pub max_steps_per_bias: Option<usize>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection { tau: 5.0, alpha: 0.5, subset: 0.01, max_steps_per_bias: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonSection {
    pub lambda: f32,
    pub delta: f64,
    pub sigma_l0: f32,
    pub normalize_energy: bool,
}

impl Default for PoisonSection {
    fn default() -> Self {
        PoisonSection { lambda: 2.5, delta: 0.05, sigma_l0: 1e-4, normalize_energy: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub kinds: Vec<DefenseKind>,
    pub schedules: Schedules,
    pub l2_grid: Vec<f32>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection { kinds: DefenseKind::ALL.to_vec(), schedules: Schedules::default(), l2_grid: L2_GRID.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub poison: PoisonSection,
    pub defense: DefenseSection,
    pub costs: CostConstants,
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 11,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            poison: PoisonSection::default(),
            defense: DefenseSection::default(),
            costs: CostConstants::default(),
            eval_batch_size: 64,
        }
    }
}

impl ExperimentConfig {
    /// Reads `flags.config` (or defaults), applies the flag overrides and
    /// validates. Relative paths in the file resolve against its directory.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                let mut cfg: ExperimentConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                cfg.rebase(path.parent().unwrap_or(Path::new("")));
                cfg
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(o) = &flags.out {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = flags.tau {
            cfg.attack.tau = t;
        }
        if let Some(a) = flags.alpha {
            cfg.attack.alpha = a;
        }
        if let Some(l) = flags.lambda {
            cfg.poison.lambda = l;
        }
        if let Some(d) = flags.delta {
            cfg.poison.delta = d;
        }
        if let Some(s) = flags.subset {
            cfg.attack.subset = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset.source {
            DataSource::Blobs { .. } => {}
            DataSource::Idx { images, labels } => {
                fix(images);
                if let Some(l) = labels {
                    fix(l);
                }
            }
            DataSource::Csv { path, .. } => fix(path),
        }
        if let Some(p) = &mut self.model.path {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let must_exist = |p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(CliError::Config(format!("path does not exist: {}", p.display())))
            }
        };
        match &self.dataset.source {
            DataSource::Blobs { .. } => {}
            DataSource::Idx { images, labels } => {
                must_exist(images)?;
                if let Some(l) = labels {
                    must_exist(l)?;
                }
            }
            DataSource::Csv { path, .. } => must_exist(path)?,
        }
        if let Some(p) = &self.model.path {
            must_exist(p)?;
        }
        if self.model.path.is_some() && self.model.arch.is_some() {
            return bad("model: give either `arch` or `path`, not both".into());
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return bad(format!("dataset.test_fraction must lie in (0, 1), got {}", self.dataset.test_fraction));
        }
        if !(self.attack.subset > 0.0 && self.attack.subset <= 1.0) {
            return bad(format!("attack.subset must lie in (0, 1], got {}", self.attack.subset));
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be positive".into());
        }
        self.train_config().validate()?;
        self.attack_config().validate()?;
        self.poison_config().validate()?;
        self.costs.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: self.seed,
            task: t.task,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        let mut a = AttackConfig::new(self.attack.tau, self.attack.alpha);
        if let Some(cap) = self.attack.max_steps_per_bias {
            a.max_total_steps_per_bias = cap;
        }
        a.subset_fraction = self.attack.subset;
        a.seed = self.seed;
        a.task = self.train.task;
        a.batch_size = self.eval_batch_size;
        a.costs = self.costs;
        a
    }

    pub fn poison_config(&self) -> PoisonConfig {
        let p = &self.poison;
        PoisonConfig {
            lambda: p.lambda,
            sigma_l0: p.sigma_l0,
            delta: p.delta,
            normalize_energy: p.normalize_energy,
            train: self.train_config(),
        }
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        component_seed(self.seed, label)
    }

    /// Loads the dataset and splits it into (train, test).
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let ds = match &self.dataset.source {
            DataSource::Blobs { classes, per_class, shape, spread } => {
                synth_blobs_with_spread(*classes, *per_class, shape, *spread, self.seed_for("data"))?
            }
            DataSource::Idx { images, labels } => load_idx(images, labels.as_deref())?,
            DataSource::Csv { path, label_column } => load_csv(path, label_column.as_deref())?,
        };
        if self.train.task == Task::Classification && ds.labels.is_none() {
            return Err(CliError::Data("classification needs a labelled dataset".into()));
        }
        Ok(ds.split(self.dataset.test_fraction, self.seed_for("split"))?)
    }

    /// Template chain used when the config names no model file.
    pub fn templates(&self, data: &Dataset) -> Vec<LayerTemplate> {
        if let Some(a) = &self.model.arch {
            return a.clone();
        }
        let classes = data.num_classes().max(1);
        let outputs = match self.train.task {
            Task::Classification => classes,
            Task::Reconstruction => data.sample_shape().iter().product(),
        };
        if data.sample_shape().len() == 3 {
            toy_cnn([4, 8], outputs)
        } else {
            mlp(&[32, 32], outputs)
        }
    }

    pub fn model_name(&self, data: &Dataset) -> String {
        if let Some(n) = &self.model.name {
            return n.clone();
        }
        if let Some(p) = &self.model.path {
            return p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
        }
        match (&self.model.arch, data.sample_shape().len()) {
            (Some(_), _) => "custom".into(),
            (None, 3) => "toy_cnn".into(),
            (None, _) => "mlp".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_file_values() {
        let flags = Flags { tau: Some(1.0), alpha: Some(2.0), lambda: Some(0.5), delta: Some(0.1), subset: Some(0.5), seed: Some(3), ..Default::default() };
        let cfg = ExperimentConfig::resolve(&flags).unwrap();
        assert_eq!((cfg.attack.tau, cfg.attack.alpha, cfg.attack.subset), (1.0, 2.0, 0.5));
        assert_eq!((cfg.poison.lambda, cfg.poison.delta, cfg.seed), (0.5, 0.1, 3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn out_of_range_values_are_config_errors() {
        let flags = Flags { subset: Some(0.0), ..Default::default() };
        assert!(matches!(ExperimentConfig::resolve(&flags), Err(CliError::Config(_))));
        let flags = Flags { alpha: Some(-1.0), ..Default::default() };
        assert_eq!(ExperimentConfig::resolve(&flags).unwrap_err().exit_code(), crate::error::EXIT_CONFIG);
    }

    #[test]
    fn dataset_sources_parse() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"dataset": {"kind": "csv", "path": "x.csv", "label_column": "y", "test_fraction": 0.5}}"#).unwrap();
        assert_eq!(cfg.dataset.test_fraction, 0.5);
        assert!(matches!(cfg.dataset.source, DataSource::Csv { .. }));
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
