//! Plain SGD training, evaluation, learning-rate grid search and the
//! batch-size sweep.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetSpec};
use crate::diagnostics::{DepthTrace, SpectrumEstimate};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::normalizers::{feature_batch_means, Mode};
use crate::tensor::{RngState, Tensor};

pub const DEFAULT_LAMBDA_REG: f64 = 1e-2;
/// Losses above this count as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// A single learning rate or a grid to search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSpec {
    Single(f64),
    Grid(Vec<f64>),
}

impl LrSpec {
    pub fn values(&self) -> Vec<f64> {
        match self {
            LrSpec::Single(v) => vec![*v],
            LrSpec::Grid(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: LrSpec,
    /// RegNorm penalty strength; ignored by other normalizers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_reg: Option<f64>,
    pub batch_size_train: usize,
    /// Defaults to `batch_size_train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size_eval: Option<usize>,
    pub steps: u64,
    /// Record (and run observers) every this many steps; default: start and end only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic_period: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Training samples used for the recorded train accuracy (default 1000).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_eval_samples: Option<usize>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, lr: f64, batch_size: usize, steps: u64) -> Self {
        Self {
            model,
            lr: LrSpec::Single(lr),
            lambda_reg: None,
            batch_size_train: batch_size,
            batch_size_eval: None,
            steps,
            diagnostic_period: None,
            dataset: None,
            seed: None,
            train_eval_samples: None,
        }
    }

    pub fn seed_value(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Effective penalty strength for this config's normalizer.
    pub fn lambda_value(&self) -> f64 {
        if self.model.norm_kind().is_regnorm() {
            self.lambda_reg.unwrap_or(DEFAULT_LAMBDA_REG)
        } else {
            0.0
        }
    }

    pub fn eval_batch(&self) -> usize {
        self.batch_size_eval.unwrap_or(self.batch_size_train)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        let lrs = self.lr.values();
        if lrs.is_empty() {
            return Err(Error::Config("learning-rate grid is empty".into()));
        }
        if let Some(bad) = lrs.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("learning rates must be finite and >= 0, got {bad}")));
        }
        if let Some(l) = self.lambda_reg.filter(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("lambda_reg must be finite and >= 0, got {l}")));
        }
        let min_batch = if self.model.norm_kind().couples_batch() { 2 } else { 1 };
        if self.batch_size_train < min_batch || self.eval_batch() < 1 {
            return Err(Error::Config(format!(
                "batch sizes must be >= {min_batch} for {}",
                self.model.norm_kind()
            )));
        }
        if self.diagnostic_period == Some(0) {
            return Err(Error::Config("diagnostic_period must be >= 1".into()));
        }
        Ok(())
    }
}

/// `p <- p - lr * g` for every tensor.
pub fn apply_sgd(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("apply_sgd", &[params.len()], &[grads.len()]));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("apply_sgd", p.shape(), g.shape()));
        }
        p.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a -= lr * b);
    }
    Ok(())
}

/// One SGD step on cross-entropy plus `lambda_reg` times the RegNorm
/// penalty. Batch Norm running statistics are updated in the same step.
///
/// A non-finite loss or gradient, or a loss above [`DIVERGENCE_LOSS`], leaves
/// the model untouched and returns [`Error::Divergence`].
pub fn sgd_step(model: &mut Model, x: &Tensor, labels: &[usize], lr: f64, lambda_reg: f64, step: usize) -> Result<f64> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Parameter(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let lg = model.loss_gradients(x, labels, Mode::Train, lambda_reg)?;
    let finite = lg.grads.iter().all(Tensor::all_finite);
    if !lg.loss.is_finite() || lg.loss > DIVERGENCE_LOSS || !finite {
        return Err(Error::Divergence { step, loss: lg.loss });
    }
    let mut params = model.params().tensors().to_vec();
    apply_sgd(&mut params, &lg.grads, lr)?;
    for (i, p) in params.into_iter().enumerate() {
        model.params_mut().set(i, p)?;
    }
    model.apply_stat_updates(&lg.stat_updates)?;
    Ok(lg.loss)
}

/// Anything that maps a batch of inputs to logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor>;
}

impl Classifier for Model {
    fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.predict(x, mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

/// Logits for the whole of `x`, computed `batch_size` rows at a time
/// (the final batch may be smaller).
pub fn batched_logits<C: Classifier + ?Sized>(model: &C, x: &Tensor, batch_size: usize, mode: Mode) -> Result<Tensor> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be >= 1".into()));
    }
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::Data("evaluation on an empty dataset".into()));
    }
    let mut data = Vec::new();
    let mut k = 0;
    for start in (0..n).step_by(batch_size) {
        let chunk = model.logits(&x.slice_outer(start, (start + batch_size).min(n))?, mode)?;
        k = chunk.shape()[1];
        data.extend_from_slice(chunk.data());
    }
    Tensor::new(&[n, k], data)
}

/// Accuracy (argmax, ties to the lowest class) and mean cross-entropy.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalResult> {
    let k = logits.shape()[1];
    if logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::dim("score_logits", logits.shape(), &[labels.len()]));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let (arg, m) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        correct += usize::from(arg == y);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += m + z.ln() - row[y];
    }
    Ok(EvalResult {
        accuracy: correct as f64 / labels.len() as f64,
        loss: loss / labels.len() as f64,
        samples: labels.len(),
    })
}

/// Deterministic pass over `x` without touching the model.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    batch_size: usize,
    mode: Mode,
) -> Result<EvalResult> {
    score_logits(&batched_logits(model, x, batch_size, mode)?, labels)
}

/// Hex SHA-256 of the little-endian bytes of a tensor.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    /// Objective on the batch of the last completed step (first batch at step 0).
    pub batch_loss: f64,
    /// Mean cross-entropy over the training subset used for `train_accuracy`.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub traces: Vec<DepthTrace>,
    pub spectra: Vec<SpectrumEstimate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub lr: f64,
    pub records: Vec<TrainRecord>,
    /// `(step, loss)` when training stopped on divergence.
    pub divergence: Option<(usize, f64)>,
}

impl TrainRun {
    pub fn final_record(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Called at every recorded step; may attach traces and spectra.
pub type Observer<'a> = dyn FnMut(&Model, &mut TrainRecord) -> Result<()> + 'a;

/// Cycles through shuffled epochs of the training split.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: RngState,
}

impl BatchStream {
    fn new(n: usize, batch: usize, rng: RngState) -> Result<Self> {
        if batch > n {
            return Err(Error::Config(format!("batch size {batch} exceeds {n} training samples")));
        }
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            batch,
            rng,
        };
        s.rng.shuffle(&mut s.order);
        Ok(s)
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.order[self.pos - self.batch..self.pos]
    }
}

fn labels_at(y: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| y[i]).collect()
}

fn record(model: &Model, data: &Dataset, cfg: &TrainConfig, step: u64, lr: f64, batch_loss: f64) -> Result<TrainRecord> {
    let n_train = cfg.train_eval_samples.unwrap_or(1000).min(data.train_y.len());
    let train = evaluate(
        model,
        &data.train_x.slice_outer(0, n_train)?,
        &data.train_y[..n_train],
        cfg.eval_batch(),
        Mode::Eval,
    )?;
    let test = evaluate(model, &data.test_x, &data.test_y, cfg.eval_batch(), Mode::Eval)?;
    Ok(TrainRecord {
        step,
        batch_loss,
        train_loss: train.loss,
        train_accuracy: train.accuracy,
        test_accuracy: test.accuracy,
        test_loss: test.loss,
        lr,
        traces: Vec::new(),
        spectra: Vec::new(),
    })
}

/// Trains `model` in place for `cfg.steps` SGD steps at `lr`.
///
/// Records are taken at step 0, every `diagnostic_period` steps and after the
/// last step. Divergence ends the run early and is reported in the result.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let lambda = cfg.lambda_value();
    let mut batches = BatchStream::new(
        data.train_y.len(),
        cfg.batch_size_train,
        RngState::with_stream(cfg.seed_value(), 1),
    )?;
    let mut run = TrainRun {
        lr,
        records: Vec::new(),
        divergence: None,
    };
    let mut take = |model: &Model, step: u64, loss: f64, run: &mut TrainRun| -> Result<()> {
        let mut rec = record(model, data, cfg, step, lr, loss)?;
        if let Some(obs) = observer.as_mut() {
            obs(model, &mut rec)?;
        }
        run.records.push(rec);
        Ok(())
    };
    let initial = {
        let idx = batches.order[..cfg.batch_size_train].to_vec();
        let x = data.train_x.select_outer(&idx)?;
        model.loss_gradients(&x, &labels_at(&data.train_y, &idx), Mode::BatchStats, lambda)?.loss
    };
    take(model, 0, initial, &mut run)?;
    for step in 1..=cfg.steps {
        let idx = batches.next().to_vec();
        let x = data.train_x.select_outer(&idx)?;
        let batch_loss = match sgd_step(model, &x, &labels_at(&data.train_y, &idx), lr, lambda, step as usize) {
            Ok(loss) => loss,
            Err(Error::Divergence { step, loss }) => {
                run.divergence = Some((step, loss));
                return Ok(run);
            }
            Err(e) => return Err(e),
        };
        let periodic = cfg.diagnostic_period.is_some_and(|p| step % p == 0);
        if periodic || step == cfg.steps {
            take(model, step, batch_loss, &mut run)?;
        }
    }
    Ok(run)
}

/// Runs `f(i)` for `i in 0..n` on up to `workers` threads; results keep index order.
pub fn run_cells<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|o| o.expect("every cell ran"))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GridSearch {
    /// Best learning rate, or `None` when every run diverged.
    pub best: Option<f64>,
    /// One run per grid value, in grid order.
    pub runs: Vec<TrainRun>,
}

impl GridSearch {
    pub fn best_run(&self) -> Option<&TrainRun> {
        self.best.and_then(|b| self.runs.iter().find(|r| r.lr == b))
    }
}

/// Trains a freshly initialized model per learning rate and keeps the one
/// with the best final test accuracy (ties go to the smaller rate).
pub fn lr_grid_search(cfg: &TrainConfig, data: &Dataset, workers: usize) -> Result<GridSearch> {
    cfg.validate()?;
    let grid = cfg.lr.values();
    let runs = run_cells(grid.len(), workers, |i| {
        let mut model = Model::build(&cfg.model)?;
        train(&mut model, data, cfg, grid[i], None)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, f64)> = None;
    for r in runs.iter().filter(|r| !r.diverged()) {
        let acc = r.final_record().map_or(f64::NEG_INFINITY, |rec| rec.test_accuracy);
        best = match best {
            Some((bl, ba)) if ba > acc || (ba == acc && bl <= r.lr) => Some((bl, ba)),
            _ => Some((r.lr, acc)),
        };
    }
    Ok(GridSearch {
        best: best.map(|(lr, _)| lr),
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub train_batch: usize,
    pub eval_batch: usize,
    pub mode: Mode,
    /// `None` when training for this row diverged.
    pub accuracy: Option<f64>,
    pub logits_digest: Option<String>,
}

/// Trains one model per training batch size at a fixed `lr`, then evaluates
/// each on the test split at every eval batch size in [`Mode::Eval`] and
/// [`Mode::BatchStats`].
pub fn batch_size_sweep(
    cfg: &TrainConfig,
    data: &Dataset,
    train_sizes: &[usize],
    eval_sizes: &[usize],
    lr: f64,
    workers: usize,
) -> Result<Vec<SweepCell>> {
    let coupled = cfg.model.norm_kind().couples_batch();
    if let Some(b) = train_sizes.iter().chain(eval_sizes).find(|&&b| b == 0 || (coupled && b < 2)) {
        return Err(Error::Config(format!(
            "batch size {b} is too small for {}",
            cfg.model.norm_kind()
        )));
    }
    let rows = run_cells(train_sizes.len(), workers, |i| -> Result<Vec<SweepCell>> {
        let mut c = cfg.clone();
        c.batch_size_train = train_sizes[i];
        c.diagnostic_period = None;
        let mut model = Model::build(&c.model)?;
        let run = train(&mut model, data, &c, lr, None)?;
        let mut cells = Vec::new();
        for &eb in eval_sizes {
            for mode in [Mode::Eval, Mode::BatchStats] {
                let (accuracy, logits_digest) = if run.diverged() {
                    (None, None)
                } else {
                    let logits = batched_logits(&model, &data.test_x, eb, mode)?;
                    let acc = score_logits(&logits, &data.test_y)?.accuracy;
                    (Some(acc), Some(tensor_digest(&logits)))
                };
                cells.push(SweepCell {
                    train_batch: train_sizes[i],
                    eval_batch: eb,
                    mode,
                    accuracy,
                    logits_digest,
                });
            }
        }
        Ok(cells)
    });
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

/// Mean over features of `|batch mean|` of the normalized pre-activation at
/// `layer`, computed on `x` with current-batch statistics.
pub fn mean_abs_batch_mean(model: &Model, x: &Tensor, layer: usize) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, Mode::BatchStats, true)?;
    let caps = out.captures.as_ref().expect("captures requested");
    let cap = caps
        .get(layer)
        .ok_or_else(|| Error::Parameter(format!("layer {layer} out of range (model has {})", caps.len())))?;
    let means = feature_batch_means(g.value(cap.normalized))?;
    Ok(means.iter().map(|m| m.abs()).sum::<f64>() / means.len() as f64)
}
