//! Experiment runner: JSON configs in, CSV results and a run manifest out.
//!
//! Every result file holds one metric with the header
//! `experiment,normalizer,step,layer,metric,value,seed,fingerprint`.
//! `layer` is the 1-based layer index for per-layer metrics, the eigenvalue
//! rank for Hessian Ritz values, a cell label for sweep and grid metrics, and
//! empty otherwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetId, DatasetSpec};
use crate::diagnostics::{
    gradient_confusion, gradient_correlation_layers, gradient_norm_profile, info_prop_correlation,
    model_hessian_spectrum, ConfusionTarget, NoiseScale,
};
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::normalizers::{Mode, NormKind};
use crate::tensor::{RngState, Tensor};
use crate::trainer::{batch_size_sweep, lr_grid_search, run_cells, train, TrainConfig, TrainRecord, TrainRun};

pub const CSV_HEADER: &str = "experiment,normalizer,step,layer,metric,value,seed,fingerprint";
pub const MANIFEST_NAME: &str = "run_manifest.json";
const DEFAULT_BATCH: usize = 128;
const DEFAULT_CONFUSION_BATCHES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Representation correlation through depth at initialization.
    Infoprop,
    /// Gradient correlation through depth and gradient confusion at initialization.
    GradCorr,
    /// Per-layer gradient norms at initialization.
    GradNorms,
    /// Accuracy, output and gradient correlation and gradient-norm ratio while training.
    EarlyDynamics,
    /// Hessian spectrum at the recorded training steps.
    Hessian,
    /// Accuracy across train and eval batch sizes.
    BatchSweep,
    /// Learning-rate grid search and the best run's curves.
    TrainEval,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Infoprop => "infoprop",
            ExperimentKind::GradCorr => "grad_corr",
            ExperimentKind::GradNorms => "grad_norms",
            ExperimentKind::EarlyDynamics => "early_dynamics",
            ExperimentKind::Hessian => "hessian",
            ExperimentKind::BatchSweep => "batch_sweep",
            ExperimentKind::TrainEval => "train_eval",
        }
    }

    /// Kinds that train a model and so take a `train` section.
    pub fn trains(self) -> bool {
        !matches!(self, ExperimentKind::Infoprop | ExperimentKind::GradCorr | ExperimentKind::GradNorms)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HessianSpec {
    /// Lanczos iterations (default 50).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lanczos_steps: Option<usize>,
    /// Random start vectors (default 4).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<usize>,
    /// Training samples in the Hessian batch (default 256).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Rank of the denominator in the outlier ratio (default: number of classes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub train_sizes: Vec<usize>,
    pub eval_sizes: Vec<usize>,
    /// Fixed learning rate; defaults to the single `train.lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub normalizers: Vec<NormKind>,
    /// Architecture for the initialization kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Training setup (model included) for the training kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Defaults to the synthetic task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    /// Probe batch size for diagnostics (default 128).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseScale>,
    /// Minibatches compared by gradient confusion (default 4).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion_batches: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian: Option<HessianSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// First seed (default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of consecutive seeds per normalizer (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    /// Default `results`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

const EXPERIMENT_KEYS: &[&str] = &[
    "experiment",
    "normalizers",
    "model",
    "train",
    "dataset",
    "batch_size",
    "noise",
    "confusion_batches",
    "hessian",
    "sweep",
    "seed",
    "seeds",
    "output_dir",
];
const MODEL_KEYS: &[&str] = &[
    "kind",
    "depth",
    "width",
    "num_classes",
    "skip",
    "activation",
    "norm",
    "eps",
    "momentum",
    "input_shape",
    "init",
    "seed",
];
const TRAIN_KEYS: &[&str] = &[
    "model",
    "lr",
    "lambda_reg",
    "batch_size_train",
    "batch_size_eval",
    "steps",
    "diagnostic_period",
    "dataset",
    "seed",
    "train_eval_samples",
];
const DATASET_KEYS: &[&str] = &["id", "train_limit", "test_limit", "pool", "dir", "samples", "shape", "classes"];
const HESSIAN_KEYS: &[&str] = &["lanczos_steps", "probes", "samples", "k"];
const SWEEP_KEYS: &[&str] = &["train_sizes", "eval_sizes", "lr"];
const NOISE_KEYS: &[&str] = &["absolute", "relative"];

fn walk_keys(value: &Value, allowed: &[&str], prefix: &str, out: &mut Vec<String>) {
    let Some(obj) = value.as_object() else { return };
    for (key, child) in obj {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        if !allowed.contains(&key.as_str()) {
            out.push(path);
            continue;
        }
        let nested: Option<&[&str]> = match (prefix.rsplit('.').next().unwrap_or(""), key.as_str()) {
            (_, "model") => Some(MODEL_KEYS),
            ("", "train") => Some(TRAIN_KEYS),
            (_, "dataset") => Some(DATASET_KEYS),
            ("", "hessian") => Some(HESSIAN_KEYS),
            ("", "sweep") => Some(SWEEP_KEYS),
            ("", "noise") => Some(NOISE_KEYS),
            _ => None,
        };
        if let Some(keys) = nested {
            walk_keys(child, keys, &path, out);
        }
    }
}

/// Dotted paths of every key the schema does not know, sorted.
pub fn unknown_keys(value: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk_keys(value, EXPERIMENT_KEYS, "", &mut out);
    out
}

/// Parses and validates a config. Unknown keys are reported all at once.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text)?;
    if !value.is_object() {
        return Err(Error::Config("config must be a JSON object".into()));
    }
    let unknown = unknown_keys(&value);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    let cfg: ExperimentConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn seed_value(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds.unwrap_or(1) as u64).map(|i| self.seed_value() + i).collect()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        self.dataset.clone().unwrap_or_else(|| DatasetSpec::new(DatasetId::Synthetic))
    }

    pub fn batch_value(&self) -> usize {
        self.batch_size.unwrap_or(DEFAULT_BATCH)
    }

    pub fn noise_value(&self) -> NoiseScale {
        self.noise.unwrap_or_default()
    }

    pub fn output_dir_value(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"))
    }

    fn base_model(&self) -> Option<&ModelConfig> {
        if self.experiment.trains() {
            self.train.as_ref().map(|t| &t.model)
        } else {
            self.model.as_ref()
        }
    }

    /// Model for one cell: the configured architecture with the normalizer,
    /// seed and dataset input shape filled in.
    pub fn model_for(&self, norm: NormKind, seed: u64) -> Result<ModelConfig> {
        let mut m = self.base_model().ok_or_else(|| cfg_err("no model configured"))?.clone();
        m.norm = Some(norm);
        m.seed = Some(seed);
        if m.input_shape.is_none() {
            m.input_shape = Some(self.dataset_spec().sample_shape()?);
        }
        Ok(m)
    }

    /// Training setup for one cell.
    pub fn train_for(&self, norm: NormKind, seed: u64) -> Result<TrainConfig> {
        let mut t = self.train.clone().ok_or_else(|| cfg_err("no train section configured"))?;
        t.model = self.model_for(norm, seed)?;
        t.seed = Some(seed);
        Ok(t)
    }

    /// Every check that does not need the data files.
    pub fn validate(&self) -> Result<()> {
        let kind = self.experiment.name();
        if self.normalizers.is_empty() {
            return Err(cfg_err("normalizers must list at least one normalizer"));
        }
        for (i, n) in self.normalizers.iter().enumerate() {
            if self.normalizers[..i].contains(n) {
                return Err(cfg_err(format!("normalizer {n} is listed twice")));
            }
        }
        if self.seeds == Some(0) {
            return Err(cfg_err("seeds must be >= 1"));
        }
        if self.experiment.trains() {
            if self.model.is_some() {
                return Err(cfg_err(format!("{kind} takes its model inside train.model")));
            }
            let t = self.train.as_ref().ok_or_else(|| cfg_err(format!("{kind} needs a train section")))?;
            if t.seed.is_some() || t.model.seed.is_some() {
                return Err(cfg_err("seeds are set by the top-level seed and seeds keys"));
            }
            if t.dataset.is_some() {
                return Err(cfg_err("set the dataset at the top level, not in train"));
            }
        } else {
            if self.train.is_some() {
                return Err(cfg_err(format!("{kind} does not train; remove the train section")));
            }
            let m = self.model.as_ref().ok_or_else(|| cfg_err(format!("{kind} needs a model section")))?;
            if m.seed.is_some() {
                return Err(cfg_err("seeds are set by the top-level seed and seeds keys"));
            }
        }
        let base = self.base_model().expect("checked above");
        if base.norm.is_some() {
            return Err(cfg_err("the normalizer comes from the normalizers list; remove model.norm"));
        }
        if self.hessian.is_some() && self.experiment != ExperimentKind::Hessian {
            return Err(cfg_err(format!("hessian settings are not used by {kind}")));
        }
        if self.sweep.is_some() != (self.experiment == ExperimentKind::BatchSweep) {
            return Err(cfg_err(if self.sweep.is_some() {
                format!("sweep settings are not used by {kind}")
            } else {
                "batch_sweep needs a sweep section".to_string()
            }));
        }
        let spec = self.dataset_spec();
        let shape = spec.sample_shape()?;
        if base.input_shape.is_some_and(|s| s != shape) {
            return Err(cfg_err(format!(
                "model input_shape {:?} does not match dataset samples {shape:?}",
                base.input_shape.unwrap()
            )));
        }
        if base.num_classes != spec.num_classes() {
            return Err(cfg_err(format!(
                "model has {} classes but the dataset has {}",
                base.num_classes,
                spec.num_classes()
            )));
        }
        let seed = self.seed_value();
        for &norm in &self.normalizers {
            if self.experiment.trains() {
                self.train_for(norm, seed)?.validate()?;
            } else {
                self.model_for(norm, seed)?.validate()?;
                let min = if norm.couples_batch() { 2 } else { 1 };
                if self.batch_value() < min {
                    return Err(cfg_err(format!("batch_size must be >= {min} for {norm}")));
                }
            }
        }
        if self.confusion_batches.is_some_and(|b| b < 2) {
            return Err(cfg_err("confusion_batches must be >= 2"));
        }
        if let Some(NoiseScale::Absolute(s) | NoiseScale::RelativeToFeatureStd(s)) = self.noise {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(cfg_err(format!("noise scale must be finite and >= 0, got {s}")));
            }
        }
        if let Some(h) = &self.hessian {
            if h.lanczos_steps == Some(0) || h.probes == Some(0) || h.samples == Some(0) || h.k == Some(0) {
                return Err(cfg_err("hessian settings must be >= 1"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.train_sizes.is_empty() || s.eval_sizes.is_empty() {
                return Err(cfg_err("sweep sizes must be nonempty"));
            }
            let single = matches!(self.train.as_ref().map(|t| &t.lr), Some(crate::trainer::LrSpec::Single(_)));
            if s.lr.is_none() && !single {
                return Err(cfg_err("batch_sweep needs sweep.lr or a single train.lr"));
            }
            let coupled = self.normalizers.iter().any(|n| n.couples_batch());
            if let Some(b) = s.train_sizes.iter().chain(&s.eval_sizes).find(|&&b| b == 0 || (coupled && b < 2)) {
                return Err(cfg_err(format!("sweep batch size {b} is too small")));
            }
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, no output directory.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(serde_json::to_string(&serde_json::to_value(&c)?)?)
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }
}

/// One CSV row before the shared columns are filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub metric: String,
    pub step: u64,
    pub layer: String,
    pub value: f64,
}

impl Row {
    fn new(metric: &str, step: u64, layer: impl ToString, value: f64) -> Self {
        Self {
            metric: metric.to_string(),
            step,
            layer: layer.to_string(),
            value,
        }
    }
}

/// Results of one (normalizer, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub normalizer: NormKind,
    pub seed: u64,
    pub rows: Vec<Row>,
    /// `(label, value)` pairs averaged over seeds for the summary line.
    pub headline: Vec<(String, f64)>,
    pub warnings: Vec<String>,
    /// Extra facts for the manifest (best lr, logit digests).
    pub extra: Value,
}

impl CellResult {
    fn new(normalizer: NormKind, seed: u64) -> Self {
        Self {
            normalizer,
            seed,
            rows: Vec::new(),
            headline: Vec::new(),
            warnings: Vec::new(),
            extra: Value::Null,
        }
    }

    fn trace_rows(&mut self, metric: &str, step: u64, values: &[f64]) {
        self.rows
            .extend(values.iter().enumerate().map(|(i, &v)| Row::new(metric, step, i + 1, v)));
    }
}

/// `n` distinct training samples chosen by `rng`.
pub fn sample_batch(data: &Dataset, n: usize, rng: &mut RngState) -> Result<(Tensor, Vec<usize>)> {
    let total = data.train_y.len();
    if n > total {
        return Err(Error::Config(format!("batch of {n} exceeds {total} training samples")));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut idx);
    idx.truncate(n);
    Ok((data.train_x.select_outer(&idx)?, idx.iter().map(|&i| data.train_y[i]).collect()))
}

/// Random-stream tags, one per independent use of a cell seed.
mod stream {
    pub const PROBE: u64 = 11;
    pub const NOISE: u64 = 13;
    pub const HESSIAN: u64 = 17;
}

fn run_infoprop(cfg: &ExperimentConfig, data: &Dataset, norm: NormKind, seed: u64) -> Result<CellResult> {
    let model = Model::build(&cfg.model_for(norm, seed)?)?;
    let (x, _) = sample_batch(data, cfg.batch_value(), &mut RngState::with_stream(seed, stream::PROBE))?;
    let trace = info_prop_correlation(&model, &x, cfg.noise_value(), &mut RngState::with_stream(seed, stream::NOISE))?;
    let mut cell = CellResult::new(norm, seed);
    cell.trace_rows(&trace.metric, 0, &trace.values);
    cell.headline.push((format!("{}[{}]", trace.metric, trace.values.len()), trace.last()));
    cell.warnings.extend(trace.flags);
    Ok(cell)
}

fn run_grad_corr(cfg: &ExperimentConfig, data: &Dataset, norm: NormKind, seed: u64) -> Result<CellResult> {
    let model = Model::build(&cfg.model_for(norm, seed)?)?;
    let b = cfg.batch_value();
    let nb = cfg.confusion_batches.unwrap_or(DEFAULT_CONFUSION_BATCHES);
    let (x, y) = sample_batch(data, b * (nb + 1), &mut RngState::with_stream(seed, stream::PROBE))?;
    let probe = (x.slice_outer(0, b)?, y[..b].to_vec());
    let trace = gradient_correlation_layers(
        &model,
        &probe.0,
        &probe.1,
        cfg.noise_value(),
        &mut RngState::with_stream(seed, stream::NOISE),
    )?;
    let batches = (1..=nb)
        .map(|i| Ok((x.slice_outer(i * b, (i + 1) * b)?, y[i * b..(i + 1) * b].to_vec())))
        .collect::<Result<Vec<_>>>()?;
    let confusion = gradient_confusion(&model, &batches, ConfusionTarget::LastLayerWeights, Mode::BatchStats)?;
    let mut cell = CellResult::new(norm, seed);
    cell.trace_rows(&trace.metric, 0, &trace.values);
    let input = trace.input.unwrap_or(f64::NAN);
    cell.rows.push(Row::new("input_gradient_correlation", 0, "", input));
    cell.rows.push(Row::new("gradient_confusion", 0, "", confusion.mean));
    cell.headline.push((format!("{}[{}]", trace.metric, trace.values.len()), trace.last()));
    cell.headline.push(("gradient_confusion".into(), confusion.mean));
    cell.warnings.extend(trace.flags);
    cell.warnings.extend(confusion.flags);
    Ok(cell)
}

fn run_grad_norms(cfg: &ExperimentConfig, data: &Dataset, norm: NormKind, seed: u64) -> Result<CellResult> {
    let model = Model::build(&cfg.model_for(norm, seed)?)?;
    let (x, y) = sample_batch(data, cfg.batch_value(), &mut RngState::with_stream(seed, stream::PROBE))?;
    let profile = gradient_norm_profile(&model, &x, &y, Mode::BatchStats)?;
    let mut cell = CellResult::new(norm, seed);
    cell.trace_rows(&profile.trace.metric, 0, &profile.trace.values);
    cell.rows.push(Row::new("gradient_norm_ratio", 0, "", profile.ratio));
    cell.headline.push(("gradient_norm_ratio".into(), profile.ratio));
    cell.warnings.extend(profile.trace.flags);
    Ok(cell)
}

/// Picks the learning rate (grid search when the config holds a grid) and
/// trains a fresh model at it with `observer` attached.
fn tuned_run(
    tcfg: &TrainConfig,
    data: &Dataset,
    cell: &mut CellResult,
    observer: Option<&mut crate::trainer::Observer<'_>>,
) -> Result<Option<(Model, TrainRun)>> {
    let grid = tcfg.lr.values();
    let lr = if grid.len() == 1 {
        grid[0]
    } else {
        let gs = lr_grid_search(tcfg, data, 1)?;
        grid_rows(cell, &gs.runs);
        match gs.best {
            Some(lr) => lr,
            None => {
                cell.warnings.push(format!("{}: every learning rate diverged", cell.normalizer));
                return Ok(None);
            }
        }
    };
    cell.rows.push(Row::new("learning_rate", 0, "", lr));
    let mut model = Model::build(&tcfg.model)?;
    let run = train(&mut model, data, tcfg, lr, observer)?;
    if let Some((step, loss)) = run.divergence {
        cell.warnings
            .push(format!("{}: diverged at step {step} (loss {loss})", cell.normalizer));
    }
    Ok(Some((model, run)))
}

fn grid_rows(cell: &mut CellResult, runs: &[TrainRun]) {
    for r in runs {
        let acc = if r.diverged() {
            f64::NAN
        } else {
            r.final_record().map_or(f64::NAN, |rec| rec.test_accuracy)
        };
        cell.rows
            .push(Row::new("grid_test_accuracy", r.final_record().map_or(0, |rec| rec.step), format!("lr={}", r.lr), acc));
    }
}

fn curve_rows(cell: &mut CellResult, records: &[TrainRecord]) {
    for rec in records {
        cell.rows.push(Row::new("train_loss", rec.step, "", rec.train_loss));
        cell.rows.push(Row::new("train_accuracy", rec.step, "", rec.train_accuracy));
        cell.rows.push(Row::new("test_accuracy", rec.step, "", rec.test_accuracy));
        cell.rows.push(Row::new("test_loss", rec.step, "", rec.test_loss));
    }
}

fn final_headline(cell: &mut CellResult, run: &TrainRun) {
    if let Some(last) = run.final_record() {
        cell.headline.push(("test_accuracy".into(), last.test_accuracy));
    }
}

/// Diagnostics recorded during training by the early-dynamics experiment.
pub struct DynamicsProbe {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub noise: NoiseScale,
    pub seed: u64,
}

impl DynamicsProbe {
    /// Output correlation, input-gradient correlation and first/last gradient
    /// norm ratio; the same noise draw is reused at every step.
    pub fn measure(&self, model: &Model) -> Result<[f64; 3]> {
        let info = info_prop_correlation(model, &self.x, self.noise, &mut RngState::with_stream(self.seed, stream::NOISE))?;
        let grad = gradient_correlation_layers(
            model,
            &self.x,
            &self.labels,
            self.noise,
            &mut RngState::with_stream(self.seed, stream::NOISE),
        )?;
        let norms = gradient_norm_profile(model, &self.x, &self.labels, Mode::BatchStats)?;
        Ok([info.last(), grad.input.unwrap_or(f64::NAN), norms.ratio])
    }
}

pub const DYNAMICS_METRICS: [&str; 3] = ["output_correlation", "input_gradient_correlation", "gradient_norm_ratio"];

fn run_early_dynamics(cfg: &ExperimentConfig, data: &Dataset, norm: NormKind, seed: u64) -> Result<CellResult> {
    let tcfg = cfg.train_for(norm, seed)?;
    let (x, labels) = sample_batch(data, cfg.batch_value(), &mut RngState::with_stream(seed, stream::PROBE))?;
    let probe = DynamicsProbe {
        x,
        labels,
        noise: cfg.noise_value(),
        seed,
    };
    let mut measured: Vec<(u64, [f64; 3])> = Vec::new();
    let mut obs = |m: &Model, rec: &mut TrainRecord| -> Result<()> {
        measured.push((rec.step, probe.measure(m)?));
        Ok(())
    };
    let mut cell = CellResult::new(norm, seed);
    let Some((_, run)) = tuned_run(&tcfg, data, &mut cell, Some(&mut obs))? else {
        return Ok(cell);
    };
    curve_rows(&mut cell, &run.records);
    for (step, vals) in &measured {
        for (name, v) in DYNAMICS_METRICS.iter().zip(vals) {
            cell.rows.push(Row::new(name, *step, "", *v));
        }
    }
    final_headline(&mut cell, &run);
    if let Some((_, vals)) = measured.last() {
        cell.headline.push(("output_correlation".into(), vals[0]));
    }
    Ok(cell)
}

fn run_hessian(cfg: &ExperimentConfig, data: &Dataset, norm: NormKind, seed: u64) -> Result<CellResult> {
    let tcfg = cfg.train_for(norm, seed)?;
    let spec = cfg.hessian.clone().unwrap_or(HessianSpec {
        lanczos_steps: None,
        probes: None,
        samples: None,
        k: None,
    });
    let (m, probes) = (spec.lanczos_steps.unwrap_or(50), spec.probes.unwrap_or(4));
    let k = spec.k.unwrap_or(tcfg.model.num_classes);
    let (x, y) = sample_batch(data, spec.samples.unwrap_or(256), &mut RngState::with_stream(seed, stream::PROBE))?;
    let mut obs = |model: &Model, rec: &mut TrainRecord| -> Result<()> {
        let mut rng = RngState::with_stream(seed, stream::HESSIAN);
        rec.spectra.push(model_hessian_spectrum(model, &x, &y, m, probes, &mut rng)?);
        Ok(())
    };
    let mut cell = CellResult::new(norm, seed);
    let Some((_, run)) = tuned_run(&tcfg, data, &mut cell, Some(&mut obs))? else {
        return Ok(cell);
    };
    curve_rows(&mut cell, &run.records);
    let mut last_ratio = f64::NAN;
    for rec in &run.records {
        for s in &rec.spectra {
            let ranked = s.ranked_values();
            cell.rows.push(Row::new("hessian_lambda_max", rec.step, "", s.lambda_max()));
            let ratio = match s.outlier_ratio(k) {
                Ok((r, flagged)) => {
                    if flagged {
                        cell.warnings
                            .push(format!("{norm}: lambda_{k} <= 0 at step {}; outlier ratio is infinite", rec.step));
                    }
                    r
                }
                Err(e) => {
                    cell.warnings.push(format!("{norm}: step {}: {e}", rec.step));
                    f64::NAN
                }
            };
            cell.rows.push(Row::new("hessian_outlier_ratio", rec.step, "", ratio));
            for (rank, v) in ranked.iter().enumerate() {
                cell.rows.push(Row::new("hessian_ritz_value", rec.step, rank + 1, *v));
            }
            if s.truncated {
                cell.warnings.push(format!("{norm}: Lanczos stopped early at step {}", rec.step));
            }
            last_ratio = ratio;
        }
    }
    cell.headline.push((format!("lambda_1/lambda_{k}"), last_ratio));
    Ok(cell)
}

fn run_batch_sweep(cfg: &ExperimentConfig, data: &Dataset, norm: NormKind, seed: u64) -> Result<CellResult> {
    let tcfg = cfg.train_for(norm, seed)?;
    let spec = cfg.sweep.as_ref().ok_or_else(|| cfg_err("batch_sweep needs a sweep section"))?;
    let lr = spec.lr.unwrap_or_else(|| tcfg.lr.values()[0]);
    let cells = batch_size_sweep(&tcfg, data, &spec.train_sizes, &spec.eval_sizes, lr, 1)?;
    let mut cell = CellResult::new(norm, seed);
    let mut digests = Map::new();
    for c in &cells {
        let mode = match c.mode {
            Mode::Eval => "eval",
            Mode::BatchStats => "batch_stats",
            Mode::Train => "train",
        };
        let label = format!("train{}_eval{}", c.train_batch, c.eval_batch);
        let metric = format!("sweep_accuracy_{mode}");
        cell.rows
            .push(Row::new(&metric, tcfg.steps, &label, c.accuracy.unwrap_or(f64::NAN)));
        digests.insert(format!("{label}_{mode}"), json!(c.logits_digest));
        if c.accuracy.is_none() {
            cell.warnings.push(format!("{norm}: training at batch {} diverged", c.train_batch));
        }
    }
    let (lo, hi) = (spec.eval_sizes.iter().min().unwrap(), spec.eval_sizes.iter().max().unwrap());
    let pick = |eb: usize| {
        cells
            .iter()
            .find(|c| c.eval_batch == eb && c.mode == Mode::BatchStats && c.train_batch == spec.train_sizes[0])
            .and_then(|c| c.accuracy)
            .unwrap_or(f64::NAN)
    };
    cell.headline.push((format!("batch_stats acc@eval{lo}"), pick(*lo)));
    cell.headline.push((format!("batch_stats acc@eval{hi}"), pick(*hi)));
    cell.extra = json!({ "lr": lr, "logits_sha256": Value::Object(digests) });
    Ok(cell)
}

fn run_train_eval(cfg: &ExperimentConfig, data: &Dataset, norm: NormKind, seed: u64) -> Result<CellResult> {
    let tcfg = cfg.train_for(norm, seed)?;
    let gs = lr_grid_search(&tcfg, data, 1)?;
    let mut cell = CellResult::new(norm, seed);
    grid_rows(&mut cell, &gs.runs);
    match gs.best_run() {
        Some(run) => {
            cell.rows.push(Row::new("learning_rate", 0, "", run.lr));
            curve_rows(&mut cell, &run.records);
            cell.headline.push(("best_lr".into(), run.lr));
            final_headline(&mut cell, run);
            cell.extra = json!({ "best_lr": run.lr });
        }
        None => cell.warnings.push(format!("{norm}: every learning rate diverged")),
    }
    Ok(cell)
}

/// Computes one (normalizer, seed) cell of an experiment.
pub fn run_cell(cfg: &ExperimentConfig, data: &Dataset, norm: NormKind, seed: u64) -> Result<CellResult> {
    match cfg.experiment {
        ExperimentKind::Infoprop => run_infoprop(cfg, data, norm, seed),
        ExperimentKind::GradCorr => run_grad_corr(cfg, data, norm, seed),
        ExperimentKind::GradNorms => run_grad_norms(cfg, data, norm, seed),
        ExperimentKind::EarlyDynamics => run_early_dynamics(cfg, data, norm, seed),
        ExperimentKind::Hessian => run_hessian(cfg, data, norm, seed),
        ExperimentKind::BatchSweep => run_batch_sweep(cfg, data, norm, seed),
        ExperimentKind::TrainEval => run_train_eval(cfg, data, norm, seed),
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
    /// Treat degenerate diagnostics and divergence as failures.
    pub strict: bool,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub fingerprint: String,
    /// Result files in the order written, manifest excluded.
    pub files: Vec<PathBuf>,
    /// One line per normalizer.
    pub summaries: Vec<String>,
    pub warnings: Vec<String>,
}

/// `{:.16e}`: 17 significant digits, `.` decimal separator.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

fn render_csv(experiment: &str, fingerprint: &str, rows: &[(NormKind, u64, &Row)]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (norm, seed, r) in rows {
        let _ = writeln!(
            s,
            "{experiment},{norm},{},{},{},{},{seed},{fingerprint}",
            r.step,
            r.layer,
            r.metric,
            format_value(r.value)
        );
    }
    s
}

fn summarize(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<String> {
    cfg.normalizers
        .iter()
        .map(|&norm| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.normalizer == norm).collect();
            let mut labels: Vec<&str> = Vec::new();
            for c in &mine {
                for (l, _) in &c.headline {
                    if !labels.contains(&l.as_str()) {
                        labels.push(l);
                    }
                }
            }
            let parts: Vec<String> = labels
                .iter()
                .map(|l| {
                    let vals: Vec<f64> = mine
                        .iter()
                        .flat_map(|c| c.headline.iter().filter(|(k, _)| k == l).map(|(_, v)| *v))
                        .collect();
                    format!("{l}={:.4}", vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            let seeds = if mine.len() == 1 {
                String::new()
            } else {
                format!(" (mean over {} seeds)", mine.len())
            };
            if parts.is_empty() {
                format!("{norm}: no result{seeds}")
            } else {
                format!("{norm}: {}{seeds}", parts.join(", "))
            }
        })
        .collect()
}

/// Runs every (normalizer, seed) cell and writes one CSV per metric plus
/// `run_manifest.json`, which is written last.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seed = Some(s);
    }
    if let Some(o) = &opts.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    let fingerprint = cfg.fingerprint()?;
    let data = cfg.dataset_spec().load(cfg.seed_value())?;
    let jobs: Vec<(NormKind, u64)> = cfg
        .normalizers
        .iter()
        .flat_map(|&n| cfg.seed_list().into_iter().map(move |s| (n, s)))
        .collect();
    let cells = run_cells(jobs.len(), opts.workers.max(1), |i| run_cell(&cfg, &data, jobs[i].0, jobs[i].1))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let warnings: Vec<String> = cells.iter().flat_map(|c| c.warnings.iter().cloned()).collect();
    if opts.strict && !warnings.is_empty() {
        return Err(Error::Numeric(format!("strict mode: {}", warnings.join("; "))));
    }

    let mut by_metric: BTreeMap<&str, Vec<(NormKind, u64, &Row)>> = BTreeMap::new();
    for c in &cells {
        for r in &c.rows {
            by_metric.entry(&r.metric).or_default().push((c.normalizer, c.seed, r));
        }
    }
    let out_dir = cfg.output_dir_value();
    fs::create_dir_all(&out_dir)?;
    let experiment = cfg.experiment.name();
    let mut files = Vec::new();
    let mut file_entries = Vec::new();
    for (metric, rows) in &by_metric {
        let text = render_csv(experiment, &fingerprint, rows);
        let path = out_dir.join(format!("{metric}.csv"));
        fs::write(&path, &text)?;
        file_entries.push(json!({
            "file": format!("{metric}.csv"),
            "metric": metric,
            "rows": rows.len(),
            "sha256": hex::encode(Sha256::digest(text.as_bytes())),
        }));
        files.push(path);
    }
    let summaries = summarize(&cfg, &cells);
    let extras: Vec<Value> = cells
        .iter()
        .filter(|c| !c.extra.is_null())
        .map(|c| json!({ "normalizer": c.normalizer, "seed": c.seed, "details": c.extra }))
        .collect();
    let manifest = json!({
        "tool": "normlab",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": experiment,
        "fingerprint": fingerprint,
        "seeds": cfg.seed_list(),
        "normalizers": cfg.normalizers,
        "config": serde_json::from_str::<Value>(&cfg.canonical_json()?)?,
        "files": file_entries,
        "summaries": summaries,
        "warnings": warnings,
        "cells": extras,
    });
    fs::write(out_dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunReport {
        out_dir,
        fingerprint,
        files,
        summaries,
        warnings,
    })
}

/// Whether an error from [`parse_config`] / [`run_experiment`] is a config
/// problem (exit 1) rather than a runtime failure (exit 2).
pub fn is_validation_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Json(_))
}
