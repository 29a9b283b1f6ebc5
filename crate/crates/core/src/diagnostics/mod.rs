//! Depth profiles of representation and gradient correlation, gradient norms,
//! gradient confusion and Hessian spectra.
//!
//! Degenerate statistics (zero variance, zero norms) are reported as NaN and
//! flagged instead of aborting, so a sweep over many configs keeps going.
//! Forward passes use [`Mode::BatchStats`] unless a mode is passed explicitly.

mod spectral;

pub use spectral::{
    hvp, lanczos, lanczos_spectrum, model_hessian_spectrum, outlier_ratio_of, tridiagonal_eigen, LanczosResult, ModelObjective, Objective,
    SpectrumEstimate,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::normalizers::Mode;
use crate::tensor::{RngState, Tensor};

/// Pearson correlation of two equally long sequences.
///
/// Returns NaN when either side has zero variance. The result is clamped to
/// [-1, 1] to absorb rounding.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("pearson", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Ok(f64::NAN);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 || !(saa * sbb).is_finite() {
        return Ok(f64::NAN);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-layer values of one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthTrace {
    pub metric: String,
    /// One value per instrumented layer, first layer first.
    pub values: Vec<f64>,
    /// Same metric measured at the network input, when it is defined.
    pub input: Option<f64>,
    /// Human-readable notes for every NaN entry.
    pub flags: Vec<String>,
    pub fingerprint: Option<String>,
    pub step: u64,
}

impl DepthTrace {
    pub fn new(metric: &str, values: Vec<f64>, input: Option<f64>) -> Self {
        let mut flags: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_nan())
            .map(|(i, _)| format!("{metric}: layer {} is degenerate (NaN)", i + 1))
            .collect();
        if input.is_some_and(f64::is_nan) {
            flags.push(format!("{metric}: input is degenerate (NaN)"));
        }
        Self {
            metric: metric.to_string(),
            values,
            input,
            flags,
            fingerprint: None,
            step: 0,
        }
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn last(&self) -> f64 {
        *self.values.last().unwrap_or(&f64::NAN)
    }
}

/// Scale of the Gaussian input perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseScale {
    /// Same standard deviation for every feature.
    #[serde(rename = "absolute")]
    Absolute(f64),
    /// Multiple of each feature's standard deviation over the batch.
    #[serde(rename = "relative")]
    RelativeToFeatureStd(f64),
}

impl Default for NoiseScale {
    fn default() -> Self {
        NoiseScale::RelativeToFeatureStd(0.01)
    }
}

fn feature_std(x: &Tensor) -> Vec<f64> {
    let n = x.shape()[0];
    let f = x.len() / n;
    let mut mean = vec![0.0; f];
    for row in x.data().chunks(f) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut var = vec![0.0; f];
    for row in x.data().chunks(f) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    var.into_iter().map(f64::sqrt).collect()
}

/// `x + noise` with the requested per-feature scale.
pub fn perturb(x: &Tensor, scale: NoiseScale, rng: &mut RngState) -> Result<Tensor> {
    let n = *x.shape().first().ok_or_else(|| Error::Usage("perturb on rank-0".into()))?;
    if n == 0 {
        return Err(Error::Data("perturb on an empty batch".into()));
    }
    let f = x.len() / n;
    let sigma = match scale {
        NoiseScale::Absolute(s) => vec![s; f],
        NoiseScale::RelativeToFeatureStd(r) => feature_std(x).into_iter().map(|s| r * s).collect(),
    };
    let s = match scale {
        NoiseScale::Absolute(s) | NoiseScale::RelativeToFeatureStd(s) => s,
    };
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Parameter(format!("noise scale must be positive, got {s}")));
    }
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += sigma[i % f] * rng.standard_normal();
    }
    Ok(out)
}

/// Correlation between the captured activations of two inputs, per layer.
pub fn activation_correlation(model: &Model, xa: &Tensor, xb: &Tensor, mode: Mode) -> Result<DepthTrace> {
    let acts = |x: &Tensor| -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, xv, mode, true)?;
        let caps = out.captures.expect("capture requested");
        Ok(caps.iter().map(|c| g.value(c.activation).clone()).collect())
    };
    let (a, b) = (acts(xa)?, acts(xb)?);
    let values = a
        .iter()
        .zip(&b)
        .map(|(p, q)| pearson(p.data(), q.data()))
        .collect::<Result<Vec<_>>>()?;
    let input = pearson(xa.data(), xb.data())?;
    Ok(DepthTrace::new("info_prop_correlation", values, Some(input)))
}

/// Correlation of representations of two noise-perturbed copies of `x`.
pub fn info_prop_correlation(model: &Model, x: &Tensor, noise: NoiseScale, rng: &mut RngState) -> Result<DepthTrace> {
    let xa = perturb(x, noise, rng)?;
    let xb = perturb(x, noise, rng)?;
    activation_correlation(model, &xa, &xb, Mode::BatchStats)
}

/// Loss gradients w.r.t. each layer's activation and w.r.t. the input.
fn activation_gradients(model: &Model, x: &Tensor, labels: &[usize], mode: Mode) -> Result<(Vec<Tensor>, Tensor)> {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let params: Vec<_> = model.params().tensors().iter().map(|t| g.constant(t.clone())).collect();
    let out = model.forward_with(&mut g, xv, &params, mode, true)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    let grads = g.backward(loss)?;
    let caps = out.captures.expect("capture requested");
    let per_layer = caps
        .iter()
        .map(|c| grads.wrt(c.activation, g.value(c.activation)))
        .collect();
    Ok((per_layer, grads.wrt(xv, x)))
}

/// Correlation of gradients w.r.t. each layer's activations between two
/// inputs with the same labels.
pub fn gradient_correlation_between(
    model: &Model,
    xa: &Tensor,
    xb: &Tensor,
    labels: &[usize],
    mode: Mode,
) -> Result<DepthTrace> {
    let (ga, ia) = activation_gradients(model, xa, labels, mode)?;
    let (gb, ib) = activation_gradients(model, xb, labels, mode)?;
    let values = ga
        .iter()
        .zip(&gb)
        .map(|(p, q)| pearson(p.data(), q.data()))
        .collect::<Result<Vec<_>>>()?;
    let input = pearson(ia.data(), ib.data())?;
    Ok(DepthTrace::new("gradient_correlation", values, Some(input)))
}

/// Gradient correlation for two noise-perturbed copies of `x`.
pub fn gradient_correlation_layers(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    noise: NoiseScale,
    rng: &mut RngState,
) -> Result<DepthTrace> {
    let xa = perturb(x, noise, rng)?;
    let xb = perturb(x, noise, rng)?;
    gradient_correlation_between(model, &xa, &xb, labels, Mode::BatchStats)
}

/// Which gradient gradient confusion compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfusionTarget {
    /// Weight of the last pre-activation (classifier) layer.
    LastLayerWeights,
    /// Gradient w.r.t. the input batch.
    Input,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    /// Correlation for every unordered pair `(i, j)`, `i < j`, in order.
    pub pairs: Vec<f64>,
    /// Mean over the non-NaN pairs.
    pub mean: f64,
    pub flags: Vec<String>,
}

/// Mean pairwise gradient correlation between minibatches.
pub fn gradient_confusion(
    model: &Model,
    batches: &[(Tensor, Vec<usize>)],
    target: ConfusionTarget,
    mode: Mode,
) -> Result<Confusion> {
    if batches.len() < 2 {
        return Err(Error::Usage("gradient confusion needs at least two minibatches".into()));
    }
    let head = model.classifier_weight();
    let grads = batches
        .iter()
        .map(|(x, y)| match target {
            ConfusionTarget::LastLayerWeights => Ok(model.loss_gradients(x, y, mode, 0.0)?.grads.swap_remove(head)),
            ConfusionTarget::Input => Ok(activation_gradients(model, x, y, mode)?.1),
        })
        .collect::<Result<Vec<Tensor>>>()?;
    let mut pairs = Vec::new();
    let mut flags = Vec::new();
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            if grads[i].len() != grads[j].len() {
                return Err(Error::dim("gradient_confusion", grads[i].shape(), grads[j].shape()));
            }
            let c = pearson(grads[i].data(), grads[j].data())?;
            if c.is_nan() {
                flags.push(format!("gradient_confusion: pair ({i},{j}) is degenerate (NaN)"));
            }
            pairs.push(c);
        }
    }
    let finite: Vec<f64> = pairs.iter().copied().filter(|v| !v.is_nan()).collect();
    let mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(Confusion { pairs, mean, flags })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormProfile {
    /// L2 norm of every layer's parameter gradients.
    pub trace: DepthTrace,
    /// First-layer norm over last-layer norm; NaN (flagged) when undefined.
    pub ratio: f64,
}

/// Per-layer gradient norms from a full set of parameter gradients.
pub fn norm_profile_from_gradients(model: &Model, grads: &[Tensor]) -> Result<NormProfile> {
    if grads.len() != model.params().len() {
        return Err(Error::Usage(format!(
            "expected {} gradients, got {}",
            model.params().len(),
            grads.len()
        )));
    }
    let values: Vec<f64> = (0..model.layers().len())
        .map(|l| {
            model
                .layer_params(l)
                .iter()
                .map(|&p| grads[p].data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let (first, last) = (values[0], values[values.len() - 1]);
    let ratio = if last > 0.0 && first.is_finite() { first / last } else { f64::NAN };
    let mut trace = DepthTrace::new("gradient_norm", values, None);
    if ratio.is_nan() {
        trace
            .flags
            .push("gradient_norm: first/last ratio undefined (zero last-layer norm)".into());
    }
    Ok(NormProfile { trace, ratio })
}

/// Per-layer L2 norms of the cross-entropy parameter gradients.
pub fn gradient_norm_profile(model: &Model, x: &Tensor, labels: &[usize], mode: Mode) -> Result<NormProfile> {
    let lg = model.loss_gradients(x, labels, mode, 0.0)?;
    norm_profile_from_gradients(model, &lg.grads)
}
