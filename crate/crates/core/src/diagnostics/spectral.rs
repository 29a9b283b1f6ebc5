//! Hessian-vector products and stochastic Lanczos quadrature.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::normalizers::Mode;
use crate::tensor::{RngState, Tensor};

/// A differentiable scalar objective over a flat parameter vector.
pub trait Objective {
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]) -> Result<()>;
    fn gradient(&mut self) -> Result<Vec<f64>>;
}

/// Cross-entropy of a model on one fixed batch.
pub struct ModelObjective<'a> {
    pub model: &'a mut Model,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub mode: Mode,
}

impl Objective for ModelObjective<'_> {
    fn params(&self) -> Vec<f64> {
        self.model.params().flatten()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.model.params_mut().assign_flat(params)
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        let lg = self.model.loss_gradients(&self.x, &self.labels, self.mode, 0.0)?;
        Ok(lg.grads.iter().flat_map(|t| t.data().iter().copied()).collect())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hessian-vector product by central differences of the gradient along
/// `v / |v|`, rescaled by `|v|`. Parameters are restored on return.
///
/// `h` defaults to `1e-4 * (1 + max|theta|)`.
pub fn hvp<O: Objective + ?Sized>(obj: &mut O, v: &[f64], h: Option<f64>) -> Result<Vec<f64>> {
    let theta = obj.params();
    if v.len() != theta.len() {
        return Err(Error::dim("hvp", &[theta.len()], &[v.len()]));
    }
    let vn = norm(v);
    if !(vn > 0.0) || !vn.is_finite() {
        return Err(Error::Parameter(format!("hvp direction must have finite nonzero norm, got {vn}")));
    }
    let h = h.unwrap_or_else(|| 1e-4 * (1.0 + theta.iter().fold(0.0_f64, |m, x| m.max(x.abs()))));
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("hvp step must be positive, got {h}")));
    }
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + sign * h * d / vn).collect() };
    let mut eval = |p: Vec<f64>| -> Result<Vec<f64>> {
        obj.set_params(&p)?;
        obj.gradient()
    };
    let plus = eval(shifted(1.0));
    let minus = plus.as_ref().ok().map(|_| eval(shifted(-1.0)));
    obj.set_params(&theta)?;
    let (plus, minus) = (plus?, minus.expect("evaluated after plus")?);
    let out: Vec<f64> = plus
        .iter()
        .zip(&minus)
        .map(|(a, b)| (a - b) / (2.0 * h) * vn)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite gradient in hvp".into()));
    }
    Ok(out)
}

/// Eigen-decomposition of a symmetric tridiagonal matrix by implicit QL.
///
/// `diag` has length n, `off` length n-1. Returns eigenvalues ascending and
/// the matching eigenvectors as columns (`vectors[row][col]`).
pub fn tridiagonal_eigen(diag: &[f64], off: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = diag.len();
    if n == 0 || off.len() + 1 != n {
        return Err(Error::dim("tridiagonal_eigen", &[n], &[off.len()]));
    }
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);
    let mut z: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(Error::Numeric("tridiagonal eigensolver did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for row in z.iter_mut() {
                    let f = row[i + 1];
                    row[i + 1] = s * row[i] + c * f;
                    row[i] = c * row[i] - s * f;
                }
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = z.iter().map(|row| order.iter().map(|&i| row[i]).collect()).collect();
    Ok((values, vectors))
}

/// Tridiagonal coefficients from one Lanczos run.
#[derive(Clone, Debug, PartialEq)]
pub struct LanczosResult {
    pub alpha: Vec<f64>,
    /// Off-diagonal, one shorter than `alpha`.
    pub beta: Vec<f64>,
    /// Stopped early because a residual norm fell below 1e-12.
    pub truncated: bool,
}

/// `m`-step Lanczos with full reorthogonalization, started from `start`.
pub fn lanczos<F>(op: &mut F, start: &[f64], m: usize) -> Result<LanczosResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>> + ?Sized,
{
    let dim = start.len();
    if m == 0 || m > dim {
        return Err(Error::Parameter(format!("lanczos order must lie in 1..={dim}, got {m}")));
    }
    let sn = norm(start);
    if !(sn > 0.0) {
        return Err(Error::Parameter("lanczos start vector is zero".into()));
    }
    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|x| x / sn).collect()];
    let mut alpha = Vec::with_capacity(m);
    let mut beta: Vec<f64> = Vec::with_capacity(m);
    let mut truncated = false;
    for j in 0..m {
        let q = &basis[j];
        let mut w = op(q)?;
        if w.len() != dim {
            return Err(Error::dim("lanczos_operator", &[dim], &[w.len()]));
        }
        let a = dot(q, &w);
        alpha.push(a);
        // Two Gram-Schmidt passes against the whole basis.
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        if j + 1 == m {
            break;
        }
        let bn = norm(&w);
        if bn < 1e-12 {
            truncated = true;
            break;
        }
        beta.push(bn);
        basis.push(w.iter().map(|x| x / bn).collect());
    }
    if alpha.iter().chain(&beta).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite Lanczos coefficient".into()));
    }
    Ok(LanczosResult { alpha, beta, truncated })
}

/// Ritz values and weights from stochastic Lanczos quadrature.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumEstimate {
    /// Per probe, ascending.
    pub ritz_values: Vec<Vec<f64>>,
    /// Per probe, squared first eigenvector components (sum to 1).
    pub weights: Vec<Vec<f64>>,
    pub order: usize,
    pub num_probes: usize,
    pub seed: u64,
    /// At least one probe stopped early.
    pub truncated: bool,
}

impl SpectrumEstimate {
    /// Ritz values ranked largest first, averaged across probes rank by rank.
    pub fn ranked_values(&self) -> Vec<f64> {
        let len = self.ritz_values.iter().map(Vec::len).min().unwrap_or(0);
        (0..len)
            .map(|r| {
                self.ritz_values.iter().map(|v| v[v.len() - 1 - r]).sum::<f64>() / self.ritz_values.len() as f64
            })
            .collect()
    }

    pub fn lambda_max(&self) -> f64 {
        self.ranked_values().first().copied().unwrap_or(f64::NAN)
    }

    /// `lambda_1 / lambda_k` on [`Self::ranked_values`]; see [`outlier_ratio_of`].
    pub fn outlier_ratio(&self, k: usize) -> Result<(f64, bool)> {
        let mut ranked = self.ranked_values();
        ranked.reverse();
        outlier_ratio_of(&ranked, k)
    }

    /// `0.01 * (max - min)` over every Ritz value.
    pub fn default_bandwidth(&self) -> f64 {
        let all = self.ritz_values.iter().flatten();
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        0.01 * (hi - lo)
    }

    /// Probe-averaged Gaussian-kernel density at each grid point.
    pub fn density(&self, grid: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if !(sigma > 0.0) {
            return Err(Error::Parameter(format!("kernel bandwidth must be positive, got {sigma}")));
        }
        let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt() * self.ritz_values.len() as f64);
        Ok(grid
            .iter()
            .map(|&t| {
                self.ritz_values
                    .iter()
                    .zip(&self.weights)
                    .flat_map(|(vals, ws)| vals.iter().zip(ws))
                    .map(|(&v, &w)| w * (-0.5 * ((t - v) / sigma).powi(2)).exp())
                    .sum::<f64>()
                    * norm
            })
            .collect())
    }
}

/// `lambda_1 / lambda_k` with values sorted descending.
///
/// Returns `(ratio, flagged)`; a non-positive `lambda_k` gives `+inf` flagged.
pub fn outlier_ratio_of(values: &[f64], k: usize) -> Result<(f64, bool)> {
    if k == 0 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::Usage(format!(
            "outlier ratio needs {k} distinct values, got {}",
            distinct.len()
        )));
    }
    let lk = sorted[k - 1];
    if lk <= 0.0 {
        return Ok((f64::INFINITY, true));
    }
    Ok((sorted[0] / lk, false))
}

/// Stochastic Lanczos quadrature with `num_probes` Gaussian start vectors.
pub fn lanczos_spectrum<F>(op: &mut F, dim: usize, m: usize, num_probes: usize, rng: &mut RngState) -> Result<SpectrumEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>> + ?Sized,
{
    if num_probes == 0 {
        return Err(Error::Parameter("num_probes must be >= 1".into()));
    }
    let mut est = SpectrumEstimate {
        ritz_values: Vec::with_capacity(num_probes),
        weights: Vec::with_capacity(num_probes),
        order: m,
        num_probes,
        seed: rng.seed(),
        truncated: false,
    };
    for _ in 0..num_probes {
        let probe: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let run = lanczos(op, &probe, m)?;
        let (values, vectors) = tridiagonal_eigen(&run.alpha, &run.beta)?;
        let weights: Vec<f64> = vectors[0].iter().map(|c| c * c).collect();
        est.truncated |= run.truncated;
        est.ritz_values.push(values);
        est.weights.push(weights);
    }
    Ok(est)
}

/// Lanczos spectrum of the cross-entropy Hessian of `model` on one batch,
/// using finite-difference Hessian-vector products in [`Mode::BatchStats`].
pub fn model_hessian_spectrum(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    m: usize,
    num_probes: usize,
    rng: &mut RngState,
) -> Result<SpectrumEstimate> {
    let mut copy = model.clone();
    let dim = copy.num_params();
    let mut obj = ModelObjective {
        model: &mut copy,
        x: x.clone(),
        labels: labels.to_vec(),
        mode: Mode::BatchStats,
    };
    let mut op = |v: &[f64]| hvp(&mut obj, v, None);
    lanczos_spectrum(&mut op, dim, m, num_probes, rng)
}
