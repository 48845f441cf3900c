//! The six verbs. Each writes its artifacts under the output directory and
//! ends with a `<verb>_summary.json` (a list of [`RunSummary`] rows) that
//! `report` later merges.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use skipsponge_core::attack::{evaluate_performance, run_skipsponge, write_per_layer_csv};
use skipsponge_core::data::subset;
use skipsponge_core::defense::{
    self, clip_biases_positive_search, clip_weights_search, fine_prune_biases, finetune_l2_grid,
    noise_biases_negative_search, noise_weights_search, retrain_epochs, DefenseEval, DefenseKind, DefenseOutcome,
    DefenseSearch,
};
use skipsponge_core::energy::{count_average_case, mean_energy_ratio, ratio_increase, LayerCounts};
use skipsponge_core::model::builder::build;
use skipsponge_core::model::{identify_target_layers, load_model, save_model};
use skipsponge_core::poison::{train_poisoned, write_metrics_csv};
use skipsponge_core::profiler::{fired_neuron_fractions, mean_bias_values, profile};
use skipsponge_core::train::{train, Monitor};
use skipsponge_core::{Dataset, EnergyReport, Error as CoreError, ModelGraph, Task, TrainConfig};

use crate::config::{ExperimentConfig, Flags};
use crate::error::{io, CliError, Result};

pub const CLEAN_MODEL: &str = "clean_model.json";
pub const ATTACKED_MODEL: &str = "attacked_model.json";
pub const POISONED_MODEL: &str = "poisoned_model.json";

/// One comparison row: a method applied to a model on a dataset, measured on
/// the held-out split before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub dataset: String,
    pub method: String,
    /// Accuracy, or mean SSIM for reconstruction models.
    pub performance_before: Option<f64>,
    pub performance_after: Option<f64>,
    pub ratio_before: f64,
    pub ratio_after: f64,
    pub ratio_increase_pct: f64,
    pub seed: u64,
    /// Files, relative to the summary's directory, this row was derived from.
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

/// Loaded config, data split and output directory shared by the verbs.
struct Ctx {
    cfg: ExperimentConfig,
    flags: Flags,
    train: Dataset,
    test: Dataset,
}

impl Ctx {
    fn new(flags: &Flags) -> Result<Self> {
        let cfg = ExperimentConfig::resolve(flags)?;
        let (train, test) = cfg.load_data()?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io(&cfg.out_dir, e))?;
        Ok(Ctx { cfg, flags: flags.clone(), train, test })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn model_name(&self) -> String {
        self.cfg.model_name(&self.train)
    }

    fn dataset_name(&self) -> String {
        let name = &self.train.manifest.name;
        name.strip_suffix("/train").unwrap_or(name).to_string()
    }

    fn batch(&self) -> usize {
        self.cfg.eval_batch_size
    }

    /// Starting point for `train` and `poison`.
    fn initial_model(&self) -> Result<ModelGraph> {
        let m = match self.flags.model.as_ref().or(self.cfg.model.path.as_ref()) {
            Some(p) => load_model(p)?,
            None => build(self.train.sample_shape(), &self.cfg.templates(&self.train), self.cfg.seed_for("init"))?,
        };
        self.check_shape(&m)?;
        Ok(m)
    }

    /// `--model`, else the named artifact in the output directory.
    fn input_model(&self, default: &str, producer: &str) -> Result<(ModelGraph, PathBuf)> {
        let path = self.flags.model.clone().unwrap_or_else(|| self.out(default));
        if !path.exists() {
            return Err(CliError::Config(format!(
                "model {} not found; run `{producer}` first or pass --model",
                path.display()
            )));
        }
        let m = load_model(&path)?;
        self.check_shape(&m)?;
        Ok((m, path))
    }

    fn check_shape(&self, m: &ModelGraph) -> Result<()> {
        if m.input_shape != self.train.sample_shape() {
            return Err(CliError::Data(format!(
                "model expects input {:?} but samples have shape {:?}",
                m.input_shape,
                self.train.sample_shape()
            )));
        }
        Ok(())
    }

    /// Reference outputs for reconstruction scoring.
    fn reference(&self) -> Result<Option<ModelGraph>> {
        match self.cfg.train.task {
            Task::Classification => Ok(None),
            Task::Reconstruction => {
                let path = self.out(CLEAN_MODEL);
                if !path.exists() {
                    return Err(CliError::Config(format!("reconstruction scoring needs {}", path.display())));
                }
                Ok(Some(load_model(&path)?))
            }
        }
    }

    fn performance(&self, m: &ModelGraph, reference: Option<&ModelGraph>) -> Result<Option<f64>> {
        if self.cfg.train.task == Task::Reconstruction && reference.is_none() {
            return Ok(None);
        }
        Ok(Some(evaluate_performance(m, &self.test, self.cfg.train.task, reference, self.batch())?))
    }

    fn ratio(&self, m: &ModelGraph) -> Result<f64> {
        Ok(mean_energy_ratio(m, &self.test.batches(self.batch()), &self.cfg.costs)?)
    }

    fn monitor(&self) -> Monitor<'_> {
        Monitor { data: &self.test, constants: self.cfg.costs, batch_size: self.batch() }
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.out(name);
        Ok(BufWriter::new(File::create(&p).map_err(|e| io(&p, e))?))
    }

    fn write_summary(&self, verb: &str, rows: &[RunSummary]) -> Result<PathBuf> {
        let p = self.out(&format!("{verb}_summary.json"));
        write_json(&p, rows)?;
        Ok(p)
    }

    fn save(&self, m: &ModelGraph, name: &str) -> Result<()> {
        Ok(save_model(m, &self.out(name))?)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn blob(name: &str) -> String {
    Path::new(name).with_extension("bin").to_string_lossy().into_owned()
}

fn increase(before: f64, after: f64) -> Result<f64> {
    ratio_increase(before, after).map_err(|e| CliError::Numeric(e.to_string()))
}

fn flush(mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| CliError::Core(CoreError::Io { path: PathBuf::from("<output>"), source: e }))
}

pub fn cmd_train(flags: &Flags) -> Result<()> {
    let ctx = Ctx::new(flags)?;
    let mut model = ctx.initial_model()?;
    let report = train(&mut model, &ctx.train, &ctx.cfg.train_config(), None, Some(ctx.monitor()))?;
    let mut w = ctx.create("train_metrics.csv")?;
    write_metrics_csv(&report, &mut w)?;
    flush(w)?;
    if let Some(why) = report.diverged {
        return Err(CliError::Numeric(format!("training diverged ({why}); partial metrics kept")));
    }
    ctx.save(&model, CLEAN_MODEL)?;
    let perf = ctx.performance(&model, None)?;
    let ratio = ctx.ratio(&model)?;
    info!("clean model: performance {perf:?}, energy ratio {ratio:.4}");
    ctx.write_summary(
        "train",
        &[RunSummary {
            model: ctx.model_name(),
            dataset: ctx.dataset_name(),
            method: "clean".into(),
            performance_before: perf,
            performance_after: perf,
            ratio_before: ratio,
            ratio_after: ratio,
            ratio_increase_pct: 0.0,
            seed: ctx.cfg.seed,
            artifacts: vec![CLEAN_MODEL.into(), blob(CLEAN_MODEL), "train_metrics.csv".into()],
            details: json!({ "epochs": report.epochs.len() }),
        }],
    )?;
    Ok(())
}

pub fn cmd_attack(flags: &Flags) -> Result<()> {
    let ctx = Ctx::new(flags)?;
    let (clean, _) = ctx.input_model(CLEAN_MODEL, "train")?;
    let targets = identify_target_layers(&clean);
    if targets.is_empty() {
        return Err(CliError::NoSparsityLayers(format!(
            "no bias-carrying layer feeds a ReLU-family layer (skipped: {:?})",
            targets.skipped
        )));
    }
    let acfg = ctx.cfg.attack_config();
    let sub = subset(&ctx.train, acfg.subset_fraction, ctx.cfg.seed_for("subset"))?;
    let prof = profile(&clean, &sub, ctx.batch())?;
    let reference = (ctx.cfg.train.task == Task::Reconstruction).then(|| clean.clone());
    let outcome = run_skipsponge(&clean, &prof, &acfg, &sub, reference.as_ref())?;

    ctx.save(&outcome.model, ATTACKED_MODEL)?;
    let mut w = ctx.create("attack_trace.csv")?;
    outcome.trace.write_csv(&mut w)?;
    flush(w)?;
    let mut w = ctx.create("attack_per_layer.csv")?;
    write_per_layer_csv(&outcome.per_layer, &mut w)?;
    flush(w)?;

    let (perf_before, perf_after) = (ctx.performance(&clean, reference.as_ref())?, ctx.performance(&outcome.model, reference.as_ref())?);
    let (ratio_before, ratio_after) = (ctx.ratio(&clean)?, ctx.ratio(&outcome.model)?);
    let inc = increase(ratio_before, ratio_after)?;
    info!("attack: ratio {ratio_before:.4} -> {ratio_after:.4} ({inc:+.2}%), performance {perf_before:?} -> {perf_after:?}");
    ctx.write_summary(
        "attack",
        &[RunSummary {
            model: ctx.model_name(),
            dataset: ctx.dataset_name(),
            method: "skipsponge".into(),
            performance_before: perf_before,
            performance_after: perf_after,
            ratio_before,
            ratio_after,
            ratio_increase_pct: inc,
            seed: ctx.cfg.seed,
            artifacts: vec![
                ATTACKED_MODEL.into(),
                blob(ATTACKED_MODEL),
                "attack_trace.csv".into(),
                "attack_per_layer.csv".into(),
            ],
            details: json!({
                "tau": acfg.tau,
                "alpha": acfg.alpha,
                "subset_fraction": acfg.subset_fraction,
                "subset_size": sub.len(),
                "target_layers": targets.pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>(),
                "guard_performance_before": outcome.clean_performance,
                "guard_performance_after": outcome.final_performance,
                "guard_ratio_before": outcome.start_ratio,
                "guard_ratio_after": outcome.final_ratio,
                "accepted_steps": outcome.trace.accepted().count(),
                "evaluations": outcome.evaluations,
                "aborted": outcome.aborted,
                "per_layer": outcome.per_layer,
            }),
        }],
    )?;
    if let Some(why) = outcome.aborted {
        return Err(CliError::Numeric(format!("attack aborted on a non-finite evaluation ({why}); last accepted state saved")));
    }
    Ok(())
}

fn comparison_csv(
    ctx: &Ctx,
    name: &str,
    value: &str,
    columns: &[(&str, Vec<(String, f64)>)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(ctx.create(name)?);
    let mut header = vec!["layer".to_string()];
    header.extend(columns.iter().map(|(c, _)| format!("{value}_{c}")));
    w.write_record(&header).map_err(CoreError::from)?;
    for (i, (layer, _)) in columns[0].1.iter().enumerate() {
        let mut row = vec![layer.clone()];
        row.extend(columns.iter().map(|(_, v)| v[i].1.to_string()));
        w.write_record(&row).map_err(CoreError::from)?;
    }
    w.flush().map_err(|e| io(&ctx.out(name), e))
}

pub fn cmd_poison(flags: &Flags) -> Result<()> {
    let ctx = Ctx::new(flags)?;
    let init = ctx.initial_model()?;
    let pcfg = ctx.cfg.poison_config();
    pcfg.validate()?;

    // Clean control from the same initialisation and shuffling.
    let mut clean = init.clone();
    let control = train(&mut clean, &ctx.train, &pcfg.train, None, None)?;
    if let Some(why) = control.diverged {
        return Err(CliError::Numeric(format!("clean control diverged ({why})")));
    }
    let (poisoned, report) = train_poisoned(&init, &ctx.train, &pcfg, Some(ctx.monitor()))?;
    let mut w = ctx.create("poison_metrics.csv")?;
    write_metrics_csv(&report, &mut w)?;
    flush(w)?;
    if let Some(why) = report.diverged {
        return Err(CliError::Numeric(format!("poisoned training diverged ({why}); partial metrics kept")));
    }
    ctx.save(&poisoned, POISONED_MODEL)?;

    // The SkipSponge column appears when an attacked model sits next to us.
    let attacked = ctx.out(ATTACKED_MODEL);
    let attacked = if attacked.exists() { Some(load_model(&attacked)?) } else { None };
    let mut models: Vec<(&str, &ModelGraph)> = vec![("clean", &clean), ("poisoned", &poisoned)];
    if let Some(a) = &attacked {
        models.push(("skipsponge", a));
    }
    let fired: Vec<(&str, Vec<(String, f64)>)> = models
        .iter()
        .map(|(n, m)| {
            let f = fired_neuron_fractions(m, &ctx.test, ctx.batch())?;
            Ok((*n, f.into_iter().map(|x| (x.layer, x.fraction)).collect()))
        })
        .collect::<Result<_>>()?;
    comparison_csv(&ctx, "fired_neurons.csv", "fired", &fired)?;
    let biases: Vec<(&str, Vec<(String, f64)>)> = models
        .iter()
        .map(|(n, m)| Ok((*n, mean_bias_values(m)?.into_iter().map(|b| (b.layer, b.mean_bias)).collect())))
        .collect::<Result<_>>()?;
    comparison_csv(&ctx, "mean_bias.csv", "mean_bias", &biases)?;

    let (perf_before, perf_after) = (ctx.performance(&clean, None)?, ctx.performance(&poisoned, None)?);
    let (ratio_before, ratio_after) = (ctx.ratio(&clean)?, ctx.ratio(&poisoned)?);
    let inc = increase(ratio_before, ratio_after)?;
    info!("poisoning: ratio {ratio_before:.4} -> {ratio_after:.4} ({inc:+.2}%)");
    ctx.write_summary(
        "poison",
        &[RunSummary {
            model: ctx.model_name(),
            dataset: ctx.dataset_name(),
            method: "sponge_poisoning".into(),
            performance_before: perf_before,
            performance_after: perf_after,
            ratio_before,
            ratio_after,
            ratio_increase_pct: inc,
            seed: ctx.cfg.seed,
            artifacts: vec![
                POISONED_MODEL.into(),
                blob(POISONED_MODEL),
                "poison_metrics.csv".into(),
                "fired_neurons.csv".into(),
                "mean_bias.csv".into(),
            ],
            details: json!({
                "lambda": pcfg.lambda,
                "delta": pcfg.delta,
                "sigma_l0": pcfg.sigma_l0,
                "normalize_energy": pcfg.normalize_energy,
            }),
        }],
    )?;
    Ok(())
}

fn search_rows(kind: DefenseKind, found: skipsponge_core::Result<DefenseSearch>) -> Result<Vec<DefenseOutcome>> {
    match found {
        Ok(s) => Ok(s.rows),
        Err(CoreError::Inapplicable(why)) => Ok(vec![DefenseOutcome::inapplicable(kind, &why)]),
        Err(e) => Err(e.into()),
    }
}

pub fn cmd_defend(flags: &Flags) -> Result<()> {
    let ctx = Ctx::new(flags)?;
    let (model, _) = ctx.input_model(ATTACKED_MODEL, "attack")?;
    let reference = ctx.reference()?;
    let eval = DefenseEval {
        data: &ctx.test,
        task: ctx.cfg.train.task,
        reference: reference.as_ref(),
        costs: ctx.cfg.costs,
        batch_size: ctx.batch(),
    };
    let sched = &ctx.cfg.defense.schedules;
    let seed = ctx.cfg.seed_for("defense");
    let base = ctx.cfg.train_config();
    let retrain = TrainConfig { epochs: retrain_epochs(base.epochs), seed: ctx.cfg.seed_for("retrain"), ..base };

    let mut rows = Vec::new();
    for &kind in &ctx.cfg.defense.kinds {
        info!("defense {}", kind.name());
        let found = match kind {
            DefenseKind::NoiseWeights => search_rows(kind, noise_weights_search(&model, &eval, sched, seed))?,
            DefenseKind::NoiseBiasesNegative => {
                search_rows(kind, noise_biases_negative_search(&model, &eval, sched, seed))?
            }
            DefenseKind::ClipWeights => search_rows(kind, clip_weights_search(&model, &eval, sched))?,
            DefenseKind::ClipBiasesPositive => search_rows(kind, clip_biases_positive_search(&model, &eval, sched))?,
            DefenseKind::FinePruneBiases => {
                search_rows(kind, fine_prune_biases(&model, &eval, sched, &ctx.train, &retrain))?
            }
            DefenseKind::FinetuneL2 => finetune_l2_grid(&model, &eval, &ctx.cfg.defense.l2_grid, &ctx.train, &retrain)?
                .into_iter()
                .map(|(r, _)| r)
                .collect(),
        };
        rows.extend(found);
    }
    let mut w = ctx.create("defense.csv")?;
    defense::write_csv(&rows, &mut w)?;
    flush(w)?;

    let mut summaries = Vec::new();
    for &kind in &ctx.cfg.defense.kinds {
        let of_kind: Vec<&DefenseOutcome> = rows.iter().filter(|r| r.kind == kind).collect();
        let picked: Vec<&DefenseOutcome> = match kind {
            DefenseKind::FinetuneL2 => of_kind.into_iter().filter(|r| r.ratio_after.is_finite()).collect(),
            DefenseKind::FinePruneBiases => of_kind.last().filter(|r| r.ratio_after.is_finite()).into_iter().copied().collect(),
            _ => of_kind.iter().rev().find(|r| r.accepted).into_iter().copied().collect(),
        };
        if picked.is_empty() {
            warn!("defense {} produced no usable row", kind.name());
        }
        for r in picked {
            let method = match kind {
                DefenseKind::FinetuneL2 => format!("defense:{}@{:e}", kind.name(), r.strength as f32),
                _ => format!("defense:{}", kind.name()),
            };
            summaries.push(RunSummary {
                model: ctx.model_name(),
                dataset: ctx.dataset_name(),
                method,
                performance_before: Some(r.accuracy_before),
                performance_after: Some(r.accuracy_after),
                ratio_before: r.ratio_before,
                ratio_after: r.ratio_after,
                ratio_increase_pct: increase(r.ratio_before, r.ratio_after)?,
                seed: ctx.cfg.seed,
                artifacts: vec!["defense.csv".into()],
                details: json!({ "strength": r.strength, "trials": r.trials, "status": r.status }),
            });
        }
    }
    ctx.write_summary("defense", &summaries)?;
    Ok(())
}

fn add_counts(into: &mut [LayerCounts], other: &[LayerCounts]) {
    for (a, b) in into.iter_mut().zip(other) {
        a.mults_total += b.mults_total;
        a.mults_performed += b.mults_performed;
        a.simple_ops_total += b.simple_ops_total;
        a.simple_ops_performed += b.simple_ops_performed;
        a.param_accesses += b.param_accesses;
        a.activation_accesses_total += b.activation_accesses_total;
        a.activation_accesses_performed += b.activation_accesses_performed;
    }
}

/// Per-layer counts pooled over the test split, plus the mean per-batch ratio.
pub fn cmd_energy(flags: &Flags) -> Result<()> {
    let ctx = Ctx::new(flags)?;
    let (model, path) = match (&flags.model, &ctx.cfg.model.path) {
        (None, Some(p)) => (load_model(p)?, p.clone()),
        _ => ctx.input_model(CLEAN_MODEL, "train")?,
    };
    let batches = ctx.test.batches(ctx.batch());
    let mut pooled = vec![LayerCounts::default(); model.layers.len()];
    for b in &batches {
        add_counts(&mut pooled, &count_average_case(&model, b)?);
    }
    let report = EnergyReport::from_counts(&model, &pooled, &ctx.cfg.costs)?;
    let mean = mean_energy_ratio(&model, &batches, &ctx.cfg.costs)?;
    let mut w = ctx.create("energy.csv")?;
    report.write_csv(&mut w)?;
    flush(w)?;
    let model_label = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    write_json(
        &ctx.out("energy_report.json"),
        &json!({
            "model": model_label,
            "dataset": ctx.dataset_name(),
            "batches": batches.len(),
            "mean_batch_ratio": mean,
            "pooled_ratio": report.ratio,
            "worst_total": report.worst_total,
            "avg_total": report.avg_total,
            "costs": ctx.cfg.costs,
        }),
    )?;
    info!("energy ratio {mean:.4} (pooled {:.4})", report.ratio);
    Ok(())
}
