//! Normalization schemes and the RegNorm batch-mean penalty.
//!
//! All statistics use the biased (divide-by-count) variance and add `eps`
//! inside the square root. Feature tensors are laid out as (N,H,W,C) or (N,D):
//! "batch" axes are every axis but the last, "layer" axes every axis but the
//! first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::shape::AxisSet;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "batch")]
    Batch,
    /// Batch Norm that always uses current-batch statistics, also at test time.
    #[serde(rename = "batch_train")]
    BatchTrain,
    #[serde(rename = "layer")]
    Layer,
    #[serde(rename = "weight")]
    Weight,
    /// Batch mean, layer variance.
    #[serde(rename = "bmlv")]
    Bmlv,
    /// Layer mean, batch variance.
    #[serde(rename = "lmbv")]
    Lmbv,
    #[serde(rename = "prelayernorm")]
    PreLayerNorm,
    #[serde(rename = "regnorm")]
    RegNorm,
    #[serde(rename = "preregnorm")]
    PreRegNorm,
}

impl NormKind {
    pub const ALL: [NormKind; 10] = [
        NormKind::None,
        NormKind::Batch,
        NormKind::BatchTrain,
        NormKind::Layer,
        NormKind::Weight,
        NormKind::Bmlv,
        NormKind::Lmbv,
        NormKind::PreLayerNorm,
        NormKind::RegNorm,
        NormKind::PreRegNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Batch => "batch",
            NormKind::BatchTrain => "batch_train",
            NormKind::Layer => "layer",
            NormKind::Weight => "weight",
            NormKind::Bmlv => "bmlv",
            NormKind::Lmbv => "lmbv",
            NormKind::PreLayerNorm => "prelayernorm",
            NormKind::RegNorm => "regnorm",
            NormKind::PreRegNorm => "preregnorm",
        }
    }

    /// Subtracts the per-sample mean of the layer input before the affine op.
    pub fn centers_input(self) -> bool {
        matches!(self, NormKind::PreLayerNorm | NormKind::PreRegNorm)
    }

    /// Learns a post-normalization scale and bias.
    pub fn has_affine(self) -> bool {
        !matches!(self, NormKind::None | NormKind::Weight)
    }

    pub fn is_regnorm(self) -> bool {
        matches!(self, NormKind::RegNorm | NormKind::PreRegNorm)
    }

    pub fn keeps_running_stats(self) -> bool {
        self == NormKind::Batch
    }

    /// Output for one sample depends on the other samples in its batch.
    pub fn couples_batch(self) -> bool {
        matches!(self, NormKind::Batch | NormKind::BatchTrain | NormKind::Bmlv | NormKind::Lmbv)
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = NormKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown normalizer `{s}`; valid options: {}", valid.join(", ")))
        })
    }
}

/// Normalizer choice plus its stabilizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSpec {
    kind: NormKind,
    eps: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind, eps: f64) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        Ok(Self { kind, eps })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

/// Forward-pass mode for batch-dependent normalizers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics for Batch Norm; everything else as in training.
    Eval,
    /// Current-batch statistics without touching running statistics.
    BatchStats,
}

/// Exponential moving averages of per-channel batch moments.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub momentum: f64,
    pub count: u64,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Parameter(format!("momentum must lie in (0,1), got {momentum}")));
        }
        Ok(Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            momentum,
            count: 0,
        })
    }

    /// `stat <- m * stat + (1 - m) * batch_stat`
    pub fn update(&mut self, moments: &BatchMoments) -> Result<()> {
        if moments.mean.len() != self.mean.len() || moments.var.len() != self.var.len() {
            return Err(Error::dim("running_stats", self.mean.shape(), moments.mean.shape()));
        }
        let m = self.momentum;
        for (s, b) in self.mean.data_mut().iter_mut().zip(moments.mean.data()) {
            *s = m * *s + (1.0 - m) * b;
        }
        for (s, b) in self.var.data_mut().iter_mut().zip(moments.var.data()) {
            *s = (m * *s + (1.0 - m) * b).max(0.0);
        }
        self.count += 1;
        Ok(())
    }
}

/// Per-channel mean and biased variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Tensor,
    pub var: Tensor,
}

fn channel_shape(rank: usize, channels: usize) -> Vec<usize> {
    let mut s = vec![1; rank];
    if rank > 0 {
        s[rank - 1] = channels;
    }
    s
}

/// `(z - mean_A(z)) / sqrt(mean_S(c^2) + eps)` where `c` is the centered input.
pub fn moment_normalize(g: &mut Graph, z: Var, mean_axes: AxisSet, std_axes: AxisSet, eps: f64) -> Result<Var> {
    let mu = g.mean_axes(z, mean_axes)?;
    let c = g.sub(z, mu)?;
    let sq = g.square(c);
    let var = g.mean_axes(sq, std_axes)?;
    let var = g.add_scalar(var, eps);
    let sd = g.sqrt(var);
    g.div(c, sd)
}

/// Subtracts the mean over `axes`.
pub fn center(g: &mut Graph, x: Var, axes: AxisSet) -> Result<Var> {
    let mu = g.mean_axes(x, axes)?;
    g.sub(x, mu)
}

/// Divides by the (centered) standard deviation over `axes` without
/// subtracting the mean from the output.
pub fn scale_by_std(g: &mut Graph, z: Var, axes: AxisSet, eps: f64) -> Result<Var> {
    let c = center(g, z, axes)?;
    let sq = g.square(c);
    let var = g.mean_axes(sq, axes)?;
    let var = g.add_scalar(var, eps);
    let sd = g.sqrt(var);
    g.div(z, sd)
}

/// Divides each sample by its uncentered RMS over the feature axes:
/// `z / sqrt(mean(z^2) + eps)`. `eps` may be 0 when every sample is nonzero.
pub fn reg_norm(g: &mut Graph, z: Var, eps: f64) -> Result<Var> {
    if eps < 0.0 {
        return Err(Error::Parameter(format!("eps must be >= 0, got {eps}")));
    }
    let axes = AxisSet::layer(g.shape(z).len());
    let sq = g.square(z);
    let ms = g.mean_axes(sq, axes)?;
    if eps == 0.0 && g.value(ms).data().iter().any(|&v| v == 0.0) {
        return Err(Error::Numeric("zero sample with eps = 0 in reg_norm".into()));
    }
    let ms = g.add_scalar(ms, eps);
    let rms = g.sqrt(ms);
    g.div(z, rms)
}

/// `W / ||W||_F` over the whole tensor.
pub fn weight_norm(g: &mut Graph, w: Var) -> Result<Var> {
    if g.value(w).norm_l2() == 0.0 {
        return Err(Error::Numeric("weight_norm of an all-zero tensor".into()));
    }
    let rank = g.shape(w).len();
    let sq = g.square(w);
    let ss = g.sum(sq);
    let ss = g.reshape(ss, &vec![1; rank])?;
    let norm = g.sqrt(ss);
    g.div(w, norm)
}

/// `z * gamma + beta` with per-channel parameters.
pub fn affine(g: &mut Graph, z: Var, gamma: Var, beta: Var) -> Result<Var> {
    let rank = g.shape(z).len();
    let c = *g.shape(z).last().unwrap_or(&1);
    let shape = channel_shape(rank, c);
    let gamma = g.reshape(gamma, &shape)?;
    let beta = g.reshape(beta, &shape)?;
    let y = g.mul(z, gamma)?;
    g.add(y, beta)
}

/// Batch Norm without the affine step.
///
/// In [`Mode::Train`] the returned moments should be folded into the running
/// statistics by the caller; the other modes return `None`.
pub fn batch_norm(
    g: &mut Graph,
    z: Var,
    mode: Mode,
    stats: &RunningStats,
    eps: f64,
) -> Result<(Var, Option<BatchMoments>)> {
    let shape = g.shape(z).to_vec();
    let rank = shape.len();
    let channels = *shape.last().ok_or_else(|| Error::Usage("batch_norm on rank-0".into()))?;
    let batch = AxisSet::batch(rank);
    match mode {
        Mode::Eval => {
            let cs = channel_shape(rank, channels);
            let mean = g.constant(stats.mean.reshape(&cs)?);
            let sd = g.constant(stats.var.reshape(&cs)?.map(|v| (v + eps).sqrt()));
            let c = g.sub(z, mean)?;
            Ok((g.div(c, sd)?, None))
        }
        Mode::Train | Mode::BatchStats => {
            if mode == Mode::Train && shape[0] < 2 {
                return Err(Error::Data("batch norm in train mode needs batch size >= 2".into()));
            }
            let mu = g.mean_axes(z, batch)?;
            let c = g.sub(z, mu)?;
            let sq = g.square(c);
            let var = g.mean_axes(sq, batch)?;
            let moments = (mode == Mode::Train).then(|| BatchMoments {
                mean: g.value(mu).reshape(&[channels]).expect("channel count"),
                var: g.value(var).reshape(&[channels]).expect("channel count"),
            });
            let var = g.add_scalar(var, eps);
            let sd = g.sqrt(var);
            Ok((g.div(c, sd)?, moments))
        }
    }
}

/// Mean subtraction before the affine op, std division after it.
///
/// Returns `(pre-activation, normalized)`, where `normalized` is the value
/// before `gamma`/`beta`.
pub fn pre_layer_norm<F>(g: &mut Graph, x_prev: Var, op: F, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Var)>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let rank = g.shape(x_prev).len();
    let centered = center(g, x_prev, AxisSet::layer(rank))?;
    let z = op(g, centered)?;
    let zrank = g.shape(z).len();
    let normalized = scale_by_std(g, z, AxisSet::layer(zrank), eps)?;
    Ok((affine(g, normalized, gamma, beta)?, normalized))
}

/// `E_{a,b}[ sum_i ((z_a,i + z_b,i)^2 - 2) ]` over all ordered pairs of the
/// batch, including `a == b`, with every non-batch axis treated as a feature.
///
/// Expanded as `2 E_a[sum_i z_a,i^2] + 2 sum_i m_i^2 - 2 N_l`, which is exact
/// for any input and reduces to `2 sum_i m_i^2` on RMS-normalized rows.
pub fn reg_norm_penalty(g: &mut Graph, zbar: Var) -> Result<Var> {
    let shape = g.shape(zbar).to_vec();
    let batch = *shape.first().ok_or_else(|| Error::Usage("penalty on rank-0".into()))?;
    if batch == 0 {
        return Err(Error::Data("reg_norm_penalty on an empty batch".into()));
    }
    let features: usize = shape[1..].iter().product();
    let flat = g.reshape(zbar, &[batch, features])?;
    let sq = g.square(flat);
    let second = g.mean_all(sq);
    let second = g.scale(second, 2.0 * features as f64);
    let m = g.mean_axes(flat, AxisSet::of(&[0]))?;
    let m2 = g.square(m);
    let m2 = g.sum(m2);
    let m2 = g.scale(m2, 2.0);
    let r = g.add(second, m2)?;
    Ok(g.add_scalar(r, -2.0 * features as f64))
}

/// Value of [`reg_norm_penalty`] for a plain tensor.
pub fn reg_norm_penalty_value(zbar: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(zbar.clone());
    let r = reg_norm_penalty(&mut g, z)?;
    g.value(r).item()
}

/// Per-feature batch means of `zbar`, flattened over the non-batch axes.
pub fn feature_batch_means(zbar: &Tensor) -> Result<Vec<f64>> {
    let batch = *zbar.shape().first().ok_or_else(|| Error::Usage("rank-0 input".into()))?;
    if batch == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let features = zbar.len() / batch;
    let mut m = vec![0.0; features];
    for row in zbar.data().chunks(features) {
        m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= batch as f64);
    Ok(m)
}

/// Closed form `2 sum_i m_i^2`, valid when each row satisfies `sum z^2 = N_l`.
pub fn batch_mean_penalty(zbar: &Tensor) -> Result<f64> {
    Ok(2.0 * feature_batch_means(zbar)?.iter().map(|m| m * m).sum::<f64>())
}

/// Result of normalizing one pre-activation.
#[derive(Debug)]
pub struct Normalized {
    /// Value fed to the activation (after `gamma`/`beta` when present).
    pub output: Var,
    /// Normalized value before `gamma`/`beta`.
    pub normalized: Var,
    pub moments: Option<BatchMoments>,
}

/// Applies the post-op half of `kind` to pre-activation `z`.
///
/// Pre-normalizers must already have centered the layer input. `affine` holds
/// the `(gamma, beta)` variables for kinds that learn them.
pub fn normalize_preactivation(
    g: &mut Graph,
    spec: NormSpec,
    z: Var,
    mode: Mode,
    stats: Option<&RunningStats>,
    affine_params: Option<(Var, Var)>,
) -> Result<Normalized> {
    let rank = g.shape(z).len();
    let (batch, layer) = (AxisSet::batch(rank), AxisSet::layer(rank));
    let eps = spec.eps();
    let mut moments = None;
    let normalized = match spec.kind() {
        NormKind::None | NormKind::Weight => z,
        NormKind::Batch | NormKind::BatchTrain => {
            let mode = match (spec.kind(), mode) {
                (NormKind::BatchTrain, Mode::Eval) => Mode::BatchStats,
                (_, m) => m,
            };
            let stats = stats.ok_or_else(|| Error::Usage("batch norm needs running stats".into()))?;
            let (out, m) = batch_norm(g, z, mode, stats, eps)?;
            moments = m;
            out
        }
        NormKind::Layer => moment_normalize(g, z, layer, layer, eps)?,
        NormKind::Bmlv => moment_normalize(g, z, batch, layer, eps)?,
        NormKind::Lmbv => moment_normalize(g, z, layer, batch, eps)?,
        NormKind::PreLayerNorm => scale_by_std(g, z, layer, eps)?,
        NormKind::RegNorm | NormKind::PreRegNorm => reg_norm(g, z, eps)?,
    };
    let output = match (spec.kind().has_affine(), affine_params) {
        (true, Some((gamma, beta))) => affine(g, normalized, gamma, beta)?,
        (true, None) => return Err(Error::Usage(format!("{} needs gamma/beta", spec.kind()))),
        (false, _) => normalized,
    };
    Ok(Normalized {
        output,
        normalized,
        moments,
    })
}
