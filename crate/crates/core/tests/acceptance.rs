//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Run with `cargo test -p normlab --release --test acceptance -- --nocapture`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use normlab::autodiff::{Graph, Var};
use normlab::data::{
    encode_cifar10, encode_idx_images, encode_idx_labels, parse_cifar10, parse_idx, Dataset, DatasetId, DatasetSpec,
    Idx,
};
use normlab::diagnostics::{hvp, lanczos, tridiagonal_eigen, Objective};
use normlab::gradcheck;
use normlab::harness::{parse_config, run_cell, run_experiment, CellResult, ExperimentConfig, RunOptions};
use normlab::models::{Activation, Model, ModelConfig};
use normlab::normalizers::{
    affine, batch_norm, batch_mean_penalty, center, feature_batch_means, moment_normalize, pre_layer_norm,
    reg_norm, reg_norm_penalty, reg_norm_penalty_value, scale_by_std, weight_norm, Mode, NormKind, RunningStats,
};
use normlab::tensor::shape::AxisSet;
use normlab::tensor::{Padding, RngState, Tensor};
use normlab::trainer::run_cells;
use normlab::Result;

const INFOPROP: &str = include_str!("../../../configs/infoprop_mlp20.json");
const GRAD_NORMS: &str = include_str!("../../../configs/grad_norms_wrn26.json");
const DYNAMICS: &str = include_str!("../../../configs/early_dynamics_wrn14.json");
const HESSIAN: &str = include_str!("../../../configs/hessian_outliers.json");
const SWEEP: &str = include_str!("../../../configs/batch_sweep_mlp.json");
const SMOKE: &str = include_str!("../../../configs/train_smoke_mlp.json");

fn report(id: u32, title: &str, pass: bool, detail: &str, started: Instant) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let secs = started.elapsed().as_secs_f64();
    let line = format!("criterion {id}: {verdict} {title} ({detail}; {secs:.1}s)");
    writeln!(std::io::stdout().lock(), "{line}").unwrap();
    assert!(pass, "{line}");
}

fn randn(shape: &[usize], rng: &mut RngState) -> Tensor {
    Tensor::gaussian(shape, 0.0, 1.0, rng).unwrap()
}

fn eval(t: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let y = f(&mut g, x).unwrap();
    g.value(y).clone()
}

/// Per-group (mean, biased variance), grouping over `axes` of a rank-4 or rank-2 tensor.
fn group_stats(t: &Tensor, axes: AxisSet) -> Vec<(f64, f64)> {
    let shape = t.shape();
    let mut groups: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    let mut idx = vec![0usize; shape.len()];
    for &v in t.data() {
        let key: Vec<usize> = idx.iter().enumerate().map(|(a, &i)| if axes.contains(a) { 0 } else { i }).collect();
        groups.entry(key).or_default().push(v);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    groups
        .into_values()
        .map(|vals| {
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
        })
        .collect()
}

fn workspace_config(text: &str) -> ExperimentConfig {
    parse_config(text).unwrap()
}

/// Loads the config's dataset from `NORMLAB_DATA_DIR` or the workspace
/// `data/` directory. When the files are missing the config is switched to a
/// synthetic task with the same sample shape and class count.
fn desk_data(cfg: &mut ExperimentConfig) -> (Dataset, String) {
    let mut spec = cfg.dataset_spec();
    if spec.dir.is_none() {
        spec.dir = Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    }
    if let Ok(d) = spec.load(cfg.seed_value()) {
        cfg.dataset = Some(spec);
        return (d, "mnist".into());
    }
    let mut synth = DatasetSpec::new(DatasetId::Synthetic);
    synth.shape = Some(spec.sample_shape().unwrap());
    synth.classes = Some(spec.num_classes());
    synth.samples = Some(spec.train_limit.unwrap_or(5000) + spec.test_limit.unwrap_or(1000));
    let d = synth.load(cfg.seed_value()).unwrap();
    cfg.dataset = Some(synth);
    (d, "synthetic fallback".into())
}

/// Every (normalizer, seed) cell, keyed by normalizer.
fn run_all(cfg: &ExperimentConfig, data: &Dataset) -> HashMap<NormKind, Vec<CellResult>> {
    let seeds = cfg.seed_list();
    let jobs: Vec<(NormKind, u64)> = cfg.normalizers.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let results = run_cells(jobs.len(), workers, |i| run_cell(cfg, data, jobs[i].0, jobs[i].1).unwrap());
    let mut out: HashMap<NormKind, Vec<CellResult>> = HashMap::new();
    for r in results {
        out.entry(r.normalizer).or_default().push(r);
    }
    out
}

fn headline(cell: &CellResult, prefix: &str) -> f64 {
    cell.headline
        .iter()
        .find(|(k, _)| k.starts_with(prefix))
        .map_or(f64::NAN, |(_, v)| *v)
}

fn per_seed(cells: &HashMap<NormKind, Vec<CellResult>>, norm: NormKind, prefix: &str) -> Vec<f64> {
    cells[&norm].iter().map(|c| headline(c, prefix)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Seeds (out of `a.len()`) where `pred(a[i], b[i])` holds.
fn count(a: &[f64], b: &[f64], pred: impl Fn(f64, f64) -> bool) -> usize {
    a.iter().zip(b).filter(|(x, y)| pred(**x, **y)).count()
}

fn fmt_means(cells: &HashMap<NormKind, Vec<CellResult>>, norms: &[NormKind], prefix: &str) -> String {
    norms
        .iter()
        .map(|&n| format!("{n} {:.3}", mean(&per_seed(cells, n, prefix))))
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;

fn check_one(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>, worst: &mut Vec<String>) -> f64 {
    let rep = gradcheck::check(f, inputs, 1e-6, 1e-8).unwrap();
    if !rep.passes(GRAD_TOL) {
        worst.push(format!("{name} {:.2e}", rep.max_rel_err));
    }
    rep.max_rel_err
}

/// Weighted sum with fixed random weights, so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(y), &mut RngState::new(seed));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn criterion_01_gradient_check_suite() {
    let started = Instant::now();
    let mut rng = RngState::new(101);
    let mut failures = Vec::new();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    let mut record = |e: f64| {
        max_err = max_err.max(e);
        checked += 1;
    };

    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[3, 4], &mut rng);
    let row = randn(&[1, 4], &mut rng);
    let w = randn(&[4, 5], &mut rng);
    let pos = randn(&[3, 4], &mut rng).map(|v| v.abs() + 0.5);
    let img = randn(&[2, 5, 5, 2], &mut rng);
    let kern = randn(&[3, 3, 2, 3], &mut rng);
    let logits = randn(&[4, 5], &mut rng);

    type Prim = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);
    let prims: Vec<Prim> = vec![
        ("matmul", vec![a.clone(), w.clone()], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, 1) })),
        ("conv_same_s1", vec![img.clone(), kern.clone()], Box::new(|g, v| { let y = g.conv2d(v[0], v[1], 1, Padding::Same)?; project(g, y, 2) })),
        ("conv_same_s2", vec![img.clone(), kern.clone()], Box::new(|g, v| { let y = g.conv2d(v[0], v[1], 2, Padding::Same)?; project(g, y, 3) })),
        ("conv_valid", vec![img.clone(), kern.clone()], Box::new(|g, v| { let y = g.conv2d(v[0], v[1], 1, Padding::Valid)?; project(g, y, 4) })),
        ("add_broadcast", vec![a.clone(), row.clone()], Box::new(|g, v| { let y = g.add(v[0], v[1])?; project(g, y, 5) })),
        ("sub_broadcast", vec![a.clone(), row.clone()], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; project(g, y, 6) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; project(g, y, 7) })),
        ("div", vec![a.clone(), pos.clone()], Box::new(|g, v| { let y = g.div(v[0], v[1])?; project(g, y, 8) })),
        ("scale", vec![a.clone()], Box::new(|g, v| { let y = g.scale(v[0], -1.7); project(g, y, 9) })),
        ("add_scalar", vec![a.clone()], Box::new(|g, v| { let y = g.add_scalar(v[0], 0.3); let y = g.square(y); project(g, y, 10) })),
        ("square", vec![a.clone()], Box::new(|g, v| { let y = g.square(v[0]); project(g, y, 11) })),
        ("sqrt", vec![pos.clone()], Box::new(|g, v| { let y = g.sqrt(v[0]); project(g, y, 12) })),
        ("relu", vec![a.clone()], Box::new(|g, v| { let y = g.relu(v[0]); project(g, y, 13) })),
        ("tanh", vec![a.clone()], Box::new(|g, v| { let y = g.tanh(v[0]); project(g, y, 14) })),
        ("mean_axes", vec![img.clone()], Box::new(|g, v| { let y = g.mean_axes(v[0], AxisSet::of(&[0, 2]))?; project(g, y, 15) })),
        ("sum", vec![a.clone()], Box::new(|g, v| { let y = g.square(v[0]); Ok(g.sum(y)) })),
        ("mean_all", vec![a.clone()], Box::new(|g, v| { let y = g.tanh(v[0]); Ok(g.mean_all(y)) })),
        ("reshape", vec![img.clone()], Box::new(|g, v| { let y = g.reshape(v[0], &[2, 50])?; project(g, y, 16) })),
        ("softmax_cross_entropy", vec![logits.clone()], Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 3, 4, 1]))),
        ("moment_normalize_batch", vec![img.clone()], Box::new(|g, v| { let y = moment_normalize(g, v[0], AxisSet::batch(4), AxisSet::batch(4), 1e-5)?; project(g, y, 17) })),
        ("moment_normalize_layer", vec![img.clone()], Box::new(|g, v| { let y = moment_normalize(g, v[0], AxisSet::layer(4), AxisSet::layer(4), 1e-5)?; project(g, y, 18) })),
        ("moment_normalize_bmlv", vec![img.clone()], Box::new(|g, v| { let y = moment_normalize(g, v[0], AxisSet::batch(4), AxisSet::layer(4), 1e-5)?; project(g, y, 19) })),
        ("moment_normalize_lmbv", vec![img.clone()], Box::new(|g, v| { let y = moment_normalize(g, v[0], AxisSet::layer(4), AxisSet::batch(4), 1e-5)?; project(g, y, 20) })),
        ("center", vec![a.clone()], Box::new(|g, v| { let y = center(g, v[0], AxisSet::layer(2))?; project(g, y, 21) })),
        ("scale_by_std", vec![a.clone()], Box::new(|g, v| { let y = scale_by_std(g, v[0], AxisSet::layer(2), 1e-5)?; project(g, y, 22) })),
        ("reg_norm", vec![img.clone()], Box::new(|g, v| { let y = reg_norm(g, v[0], 1e-5)?; project(g, y, 23) })),
        ("weight_norm", vec![w.clone()], Box::new(|g, v| { let y = weight_norm(g, v[0])?; project(g, y, 24) })),
        ("affine", vec![a.clone(), row.reshape(&[4]).unwrap(), b.slice_outer(0, 1).unwrap().reshape(&[4]).unwrap()], Box::new(|g, v| { let y = affine(g, v[0], v[1], v[2])?; project(g, y, 25) })),
        ("batch_norm", vec![img.clone()], Box::new(|g, v| {
            let stats = RunningStats::new(2, 0.9)?;
            let (y, _) = batch_norm(g, v[0], Mode::BatchStats, &stats, 1e-5)?;
            project(g, y, 26)
        })),
        ("pre_layer_norm", vec![a.clone(), w.clone()], Box::new(|g, v| {
            let gamma = g.constant(Tensor::ones(&[5]));
            let beta = g.constant(Tensor::zeros(&[5]));
            let wv = v[1];
            let (y, _) = pre_layer_norm(g, v[0], |g, x| g.matmul(x, wv), gamma, beta, 1e-5)?;
            project(g, y, 27)
        })),
        ("reg_norm_penalty", vec![img.clone()], Box::new(|g, v| { let z = reg_norm(g, v[0], 1e-5)?; reg_norm_penalty(g, z) })),
    ];
    let n_prims = prims.len();
    for (name, inputs, f) in &prims {
        record(check_one(name, inputs, f, &mut failures));
    }

    // Three random 3-5 layer networks per normalizer, tanh so the loss is smooth.
    let mut nets = 0;
    for kind in NormKind::ALL {
        for trial in 0..3 {
            let depth = 3 + rng.below(3);
            let width = 3 + rng.below(4);
            let hw = 1 + rng.below(2);
            let classes = 2 + rng.below(3);
            let batch = 3 + rng.below(3);
            let cfg = ModelConfig::mlp(depth, width, [hw, 2, 1], classes)
                .with_norm(kind)
                .with_activation(Activation::Tanh)
                .with_seed(rng.next_u64());
            let m = Model::build(&cfg).unwrap();
            let x = randn(&[batch, hw, 2, 1], &mut rng);
            let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();
            let mut inputs: Vec<Tensor> = m.params().tensors().to_vec();
            for t in inputs.iter_mut() {
                let noise = randn(t.shape(), &mut rng);
                *t = t.zip_map(&noise, |a, b| a + 0.1 * b).unwrap();
            }
            let name = format!("{kind} net {trial} (depth {depth}, width {width})");
            let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
                let xv = g.constant(x.clone());
                let out = m.forward_with(g, xv, vars, Mode::BatchStats, kind.is_regnorm())?;
                let ce = g.softmax_cross_entropy(out.logits, &labels)?;
                if kind.is_regnorm() {
                    let r = m.regularizer_total(g, &out)?;
                    let r = g.scale(r, 0.01);
                    g.add(ce, r)
                } else {
                    Ok(ce)
                }
            };
            record(check_one(&name, &inputs, f, &mut failures));
            nets += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = failures.is_empty() && elapsed < 120.0;
    report(
        1,
        "gradient check",
        pass,
        &format!(
            "{n_prims} primitives + {nets} networks, {checked} checks, max rel err {max_err:.2e} (< {GRAD_TOL:.0e}), failures {failures:?}"
        ),
        started,
    );
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_02_normalization_invariants() {
    let started = Instant::now();
    let eps = 1e-5;
    let mut rng = RngState::new(202);
    let mut problems = Vec::new();
    let (b, l) = (AxisSet::batch(4), AxisSet::layer(4));

    for trial in 0..10 {
        let z = randn(&[8, 4, 4, 3], &mut rng).map(|v| 3.0 * v + 2.0);
        // Batch Norm in train mode: per channel over (N,H,W).
        let stats = RunningStats::new(3, 0.9).unwrap();
        let bn = eval(&z, |g, x| Ok(batch_norm(g, x, Mode::Train, &stats, eps)?.0));
        for (m, v) in group_stats(&bn, b) {
            if m.abs() >= 1e-10 || (v - 1.0).abs() >= 10.0 * eps {
                problems.push(format!("batch trial {trial}: mean {m:.1e} var {v}"));
            }
        }
        // Layer Norm: per sample over (H,W,C).
        let ln = eval(&z, |g, x| moment_normalize(g, x, l, l, eps));
        for (m, v) in group_stats(&ln, l) {
            if m.abs() >= 1e-10 || (v - 1.0).abs() >= 10.0 * eps {
                problems.push(format!("layer trial {trial}: mean {m:.1e} var {v}"));
            }
        }
        // Mixed axes: (z - mu_mean) / sigma_std. Multiplying back by sigma gives a
        // numerator centered over the mean axes; the mean square over the std axes
        // of the output is v / (v + eps) where v is that numerator's variance.
        for (name, mean_axes, std_axes) in [("bmlv", b, l), ("lmbv", l, b)] {
            let y = eval(&z, |g, x| moment_normalize(g, x, mean_axes, std_axes, eps));
            let sd = eval(&z, |g, x| {
                let c = center(g, x, mean_axes)?;
                let sq = g.square(c);
                let v = g.mean_axes(sq, std_axes)?;
                let v = g.add_scalar(v, eps);
                Ok(g.sqrt(v))
            });
            let numer = eval(&y, |g, yv| {
                let s = g.constant(sd.clone());
                g.mul(yv, s)
            });
            for (m, _) in group_stats(&numer, mean_axes) {
                if m.abs() >= 1e-10 {
                    problems.push(format!("{name} trial {trial}: numerator mean {m:.1e}"));
                }
            }
            let sq = y.map(|v| v * v);
            for (ms, _) in group_stats(&sq, std_axes) {
                if (ms - 1.0).abs() >= 10.0 * eps {
                    problems.push(format!("{name} trial {trial}: mean square {ms}"));
                }
            }
        }
    }

    // PreLayerNorm: a per-sample constant input shift leaves the output bitwise
    // unchanged. Shifts are dyadic so the centered inputs are exactly equal.
    let x = randn(&[6, 8], &mut rng).map(|v| (v * 64.0).round() / 64.0);
    let shifts = [4.0, -8.0, 0.5, 16.0, -0.25, 2.0];
    let mut shifted = x.clone();
    for (row, s) in shifted.data_mut().chunks_mut(8).zip(shifts) {
        row.iter_mut().for_each(|v| *v += s);
    }
    let w = randn(&[8, 5], &mut rng);
    let gamma = randn(&[5], &mut rng);
    let beta = randn(&[5], &mut rng);
    let pln = |t: &Tensor| {
        eval(t, |g, xv| {
            let wv = g.constant(w.clone());
            let gv = g.constant(gamma.clone());
            let bv = g.constant(beta.clone());
            Ok(pre_layer_norm(g, xv, |g, x| g.matmul(x, wv), gv, bv, eps)?.0)
        })
    };
    let bitwise = pln(&x).data().iter().zip(pln(&shifted).data()).all(|(p, q)| p.to_bits() == q.to_bits());
    if !bitwise {
        problems.push("prelayernorm shift changed the output".into());
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        2,
        "normalization invariants",
        problems.is_empty() && elapsed < 30.0,
        &format!("10 random batches x 4 normalizers + bitwise prelayernorm shift; problems {problems:?}"),
        started,
    );
}

// ---------------------------------------------------------------------------

/// Brute force over all B^2 ordered pairs (a, b), including a == b.
fn pairwise_penalty(z: &Tensor) -> f64 {
    let b = z.shape()[0];
    let f = z.len() / b;
    let d = z.data();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            total += (0..f).map(|k| (d[i * f + k] + d[j * f + k]).powi(2) - 2.0).sum::<f64>();
        }
    }
    total / (b * b) as f64
}

#[test]
fn criterion_03_regnorm_penalty() {
    let started = Instant::now();
    let mut rng = RngState::new(303);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 2 + rng.below(15);
        let f = 1 + rng.below(20);
        let z = randn(&[n, f], &mut rng).map(|v| v + 0.5);
        // eps = 0 so every row has sum of squares exactly N_l.
        let zbar = eval(&z, |g, x| reg_norm(g, x, 0.0));
        let brute = pairwise_penalty(&zbar);
        let graph = reg_norm_penalty_value(&zbar).unwrap();
        let closed = batch_mean_penalty(&zbar).unwrap();
        worst = worst.max((graph - brute).abs()).max((closed - brute).abs());
    }
    let equal = worst < 1e-10;

    // r = 0 exactly when the batch means vanish: both directions.
    let zero_mean = Tensor::new(&[4, 2], vec![1., 1., -1., -1., 1., -1., -1., 1.]).unwrap();
    let nonzero_mean = Tensor::new(&[4, 2], vec![1., 1., -1., -1., 1., -1., 1., -1.]).unwrap();
    let r_zero = reg_norm_penalty_value(&zero_mean).unwrap();
    let r_nonzero = reg_norm_penalty_value(&nonzero_mean).unwrap();
    let max_m_nonzero = feature_batch_means(&nonzero_mean).unwrap().iter().fold(0.0f64, |a, m| a.max(m.abs()));
    let iff = r_zero.abs() < 1e-14 && pairwise_penalty(&zero_mean).abs() < 1e-14 && r_nonzero > 0.0 && max_m_nonzero > 0.0;

    // Gradient descent on r alone.
    let mut z = randn(&[8, 16], &mut rng).map(|v| v + 0.7);
    let eps = 1e-5;
    let mut steps = 0;
    let mut max_m = f64::INFINITY;
    while steps < 500 {
        let mut g = Graph::new();
        let zv = g.variable(z.clone());
        let zb = reg_norm(&mut g, zv, eps).unwrap();
        max_m = feature_batch_means(g.value(zb)).unwrap().iter().fold(0.0f64, |a, m| a.max(m.abs()));
        if max_m < 1e-3 {
            break;
        }
        let r = reg_norm_penalty(&mut g, zb).unwrap();
        let grads = g.backward(r).unwrap();
        let d = grads.wrt(zv, &z);
        z.data_mut().iter_mut().zip(d.data()).for_each(|(v, gv)| *v -= gv);
        steps += 1;
    }
    let descended = max_m < 1e-3;
    let elapsed = started.elapsed().as_secs_f64();
    report(
        3,
        "regnorm penalty",
        equal && iff && descended && elapsed < 60.0,
        &format!(
            "100 batches max |diff| {worst:.1e} (< 1e-10); r(zero means) {r_zero:.1e}, r(nonzero) {r_nonzero:.3}; descent max|m| {max_m:.1e} after {steps} steps"
        ),
        started,
    );
}

// ---------------------------------------------------------------------------

/// f(theta) = 0.5 theta^T A theta + b^T theta + c * sum(theta^4).
struct Poly {
    a: DMatrix<f64>,
    b: Vec<f64>,
    quartic: f64,
    theta: Vec<f64>,
}

impl Objective for Poly {
    fn params(&self) -> Vec<f64> {
        self.theta.clone()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.theta = params.to_vec();
        Ok(())
    }

    fn gradient(&mut self) -> Result<Vec<f64>> {
        let t = nalgebra::DVector::from_column_slice(&self.theta);
        let at = &self.a * t;
        Ok((0..self.theta.len()).map(|i| at[i] + self.b[i] + 4.0 * self.quartic * self.theta[i].powi(3)).collect())
    }
}

fn random_symmetric(n: usize, rng: &mut RngState) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
    (&m + m.transpose()) * 0.5
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn criterion_04_lanczos_and_hvp() {
    let started = Instant::now();
    let mut rng = RngState::new(404);
    let n = 20;
    let mut ritz_err: f64 = 0.0;
    for _ in 0..10 {
        let a = random_symmetric(n, &mut rng);
        let mut op = |v: &[f64]| -> Result<Vec<f64>> {
            let out = &a * nalgebra::DVector::from_column_slice(v);
            Ok(out.iter().copied().collect())
        };
        let start: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let run = lanczos(&mut op, &start, n).unwrap();
        let (ritz, _) = tridiagonal_eigen(&run.alpha, &run.beta).unwrap();
        let mut dense: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
        dense.sort_by(f64::total_cmp);
        if ritz.len() != dense.len() {
            ritz_err = f64::INFINITY;
            continue;
        }
        for (r, d) in ritz.iter().zip(&dense) {
            ritz_err = ritz_err.max((r - d).abs());
        }
    }

    // Quadratic: central differences of a linear gradient are exact.
    let dim = 12;
    let a = random_symmetric(dim, &mut rng);
    let mut quad = Poly {
        a: a.clone(),
        b: (0..dim).map(|_| rng.standard_normal()).collect(),
        quartic: 0.0,
        theta: (0..dim).map(|_| rng.standard_normal()).collect(),
    };
    let mut hvp_err: f64 = 0.0;
    let mut sym_err: f64 = 0.0;
    for _ in 0..5 {
        let u: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let hu = hvp(&mut quad, &u, None).unwrap();
        let hv = hvp(&mut quad, &v, None).unwrap();
        let exact = &a * nalgebra::DVector::from_column_slice(&u);
        for (x, y) in hu.iter().zip(exact.iter()) {
            hvp_err = hvp_err.max((x - y).abs() / (1.0 + y.abs()));
        }
        sym_err = sym_err.max((dotv(&u, &hv) - dotv(&v, &hu)).abs() / (1.0 + dotv(&u, &hv).abs()));
    }

    // Non-quadratic: error shrinks as h^2 (ratio near 4 when h halves).
    let mut quart = Poly {
        quartic: 0.3,
        ..quad
    };
    let u: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
    let exact: Vec<f64> = {
        let au = &a * nalgebra::DVector::from_column_slice(&u);
        (0..dim).map(|i| au[i] + 12.0 * 0.3 * quart.theta[i].powi(2) * u[i]).collect()
    };
    let err_at = |obj: &mut Poly, h: f64| -> f64 {
        let hu = hvp(obj, &u, Some(h)).unwrap();
        hu.iter().zip(&exact).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let e1 = err_at(&mut quart, 1e-2);
    let e2 = err_at(&mut quart, 5e-3);
    let order_ratio = e1 / e2;
    let second_order = (3.0..5.0).contains(&order_ratio);

    // Model Hessian operator symmetry on a small network.
    let cfg = ModelConfig::mlp(3, 6, [2, 2, 1], 3).with_norm(NormKind::Batch).with_seed(9);
    let mut model = Model::build(&cfg).unwrap();
    let x = randn(&[8, 2, 2, 1], &mut rng);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let mut obj = normlab::diagnostics::ModelObjective {
        model: &mut model,
        x,
        labels,
        mode: Mode::BatchStats,
    };
    let p = obj.params().len();
    let mut model_sym: f64 = 0.0;
    for _ in 0..5 {
        let u: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
        let v: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
        let hu = hvp(&mut obj, &u, None).unwrap();
        let hv = hvp(&mut obj, &v, None).unwrap();
        let (uhv, vhu) = (dotv(&u, &hv), dotv(&v, &hu));
        model_sym = model_sym.max((uhv - vhu).abs() / (1.0 + uhv.abs().max(vhu.abs())));
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        4,
        "lanczos and hvp",
        ritz_err < 1e-6 && hvp_err < 1e-6 && sym_err < 1e-4 && second_order && model_sym < 1e-4 && elapsed < 60.0,
        &format!(
            "ritz err {ritz_err:.1e} (< 1e-6); quadratic hvp err {hvp_err:.1e}, symmetry {sym_err:.1e}; h-halving error ratio {order_ratio:.2}; model symmetry {model_sym:.1e} (< 1e-4)"
        ),
        started,
    );
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_05_information_propagation_ordering() {
    let started = Instant::now();
    let mut cfg = workspace_config(INFOPROP);
    let (data, source) = desk_data(&mut cfg);
    let cells = run_all(&cfg, &data);
    let key = "info_prop_correlation";
    let [batch, bmlv, pre, layer, none] = [NormKind::Batch, NormKind::Bmlv, NormKind::PreLayerNorm, NormKind::Layer, NormKind::None].map(|n| per_seed(&cells, n, key));
    let n = batch.len();
    let near = |a: f64, b: f64| (a - b).abs() < 0.1;
    let orderings = [
        ("batch~bmlv", count(&batch, &bmlv, near)),
        ("bmlv<prelayernorm", count(&bmlv, &pre, |a, b| a < b)),
        ("batch<prelayernorm", count(&batch, &pre, |a, b| a < b)),
        ("prelayernorm<layer", count(&pre, &layer, |a, b| a < b)),
        ("layer~none", count(&layer, &none, near)),
    ];
    let need = (8 * n).div_ceil(10);
    let pass = mean(&batch) < 0.5
        && mean(&layer) > 0.9
        && orderings.iter().all(|(_, c)| *c >= need)
        && started.elapsed().as_secs_f64() < 300.0;
    report(
        5,
        "information propagation ordering at init",
        pass,
        &format!(
            "{source}, depth-20 relu mlp, {n} seeds; mean last-layer correlation {}; seeds holding {orderings:?} (need {need}); batch < 0.5, layer > 0.9",
            fmt_means(&cells, &[NormKind::Batch, NormKind::Bmlv, NormKind::PreLayerNorm, NormKind::Layer, NormKind::None], key)
        ),
        started,
    );
}

#[test]
fn criterion_06_gradient_norm_ratio_ordering() {
    let started = Instant::now();
    let mut cfg = workspace_config(GRAD_NORMS);
    let (data, source) = desk_data(&mut cfg);
    let cells = run_all(&cfg, &data);
    let key = "gradient_norm_ratio";
    let [batch, bmlv, layer, none] = [NormKind::Batch, NormKind::Bmlv, NormKind::Layer, NormKind::None].map(|n| per_seed(&cells, n, key));
    let n = batch.len();
    // Ratios span orders of magnitude; "about equal" means within a factor of 2.
    let near = |a: f64, b: f64| (a / b).ln().abs() < 2f64.ln();
    let orderings = [
        ("batch~bmlv", count(&batch, &bmlv, near)),
        ("batch>layer", count(&batch, &layer, |a, b| a > b)),
        ("bmlv>layer", count(&bmlv, &layer, |a, b| a > b)),
        ("layer>none", count(&layer, &none, |a, b| a > b)),
    ];
    let need = (8 * n).div_ceil(10);
    let pass = orderings.iter().all(|(_, c)| *c >= need) && started.elapsed().as_secs_f64() < 600.0;
    report(
        6,
        "gradient norm ratio ordering at init",
        pass,
        &format!(
            "{source}, no-skip wideresnet-26, {n} seeds; mean first/last ratio {}; seeds holding {orderings:?} (need {need})",
            fmt_means(&cells, &[NormKind::Batch, NormKind::Bmlv, NormKind::Layer, NormKind::None], key)
        ),
        started,
    );
}

/// Values of `metric` in step order.
fn trace(cell: &CellResult, metric: &str) -> Vec<f64> {
    let mut rows: Vec<(u64, f64)> = cell.rows.iter().filter(|r| r.metric == metric).map(|r| (r.step, r.value)).collect();
    rows.sort_by_key(|r| r.0);
    rows.into_iter().map(|r| r.1).collect()
}

fn fmt_trace(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn criterion_07_early_dynamics_shape() {
    let started = Instant::now();
    let mut cfg = workspace_config(DYNAMICS);
    let (data, source) = desk_data(&mut cfg);
    let cells = run_all(&cfg, &data);
    let lr = |n: NormKind| trace(&cells[&n][0], "learning_rate")[0];
    let bn = trace(&cells[&NormKind::Batch][0], "output_correlation");
    let plain = trace(&cells[&NormKind::None][0], "output_correlation");

    // Batch norm: rise from the initial value to the peak, then the largest
    // drop below the peak that occurs after it.
    let peak = bn.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    let rise = peak.1 - bn[0];
    let fall = peak.1 - bn[peak.0..].iter().copied().fold(f64::INFINITY, f64::min);
    let bn_ok = rise >= 0.1 && fall >= 0.05;

    // No norm: starts high, never climbs 0.05 above its start, ends at least
    // 0.05 below it.
    let climb = plain.iter().copied().fold(f64::NEG_INFINITY, f64::max) - plain[0];
    let drop = plain[0] - plain[plain.len() - 1];
    let plain_ok = plain[0] >= 0.9 && climb < 0.05 && drop >= 0.05;
    report(
        7,
        "early training output correlation shape",
        bn_ok && plain_ok && started.elapsed().as_secs_f64() < 1800.0,
        &format!(
            "{source}, no-skip wideresnet-14, {} points; batch (lr {}) rise {rise:.3} (>= 0.1) then fall {fall:.3} (>= 0.05): [{}]; none (lr {}) start {:.3} (>= 0.9), climb {climb:.3} (< 0.05), drop {drop:.3} (>= 0.05): [{}]",
            bn.len(),
            lr(NormKind::Batch),
            fmt_trace(&bn),
            lr(NormKind::None),
            plain[0],
            fmt_trace(&plain)
        ),
        started,
    );
}

#[test]
fn criterion_08_outlier_eigenvalues() {
    let started = Instant::now();
    let mut cfg = workspace_config(HESSIAN);
    let (data, source) = desk_data(&mut cfg);
    let cells = run_all(&cfg, &data);
    let key = "lambda_1/lambda_";
    let [layer, batch, pre] = [NormKind::Layer, NormKind::Batch, NormKind::PreLayerNorm].map(|n| per_seed(&cells, n, key));
    let n = layer.len();
    let both = (0..n).filter(|&i| layer[i] > batch[i] && layer[i] > pre[i]).count();
    let need = (4 * n).div_ceil(5);
    let train = cfg.train.as_ref().expect("hessian config has a train section");
    let (steps, depth) = (train.steps, train.model.depth);
    let arch = format!("{:?}", train.model.kind).to_lowercase();
    report(
        8,
        "layer norm keeps outlier eigenvalues",
        both >= need && started.elapsed().as_secs_f64() < 1800.0,
        &format!(
            "{source}, no-skip depth-{depth} {arch}, step {steps}, {n} seeds; lambda_1/lambda_10 layer {layer:.2?}, batch {batch:.2?}, prelayernorm {pre:.2?}; layer above both in {both} seeds (need {need})"
        ),
        started,
    );
}

#[test]
fn criterion_09_batch_size_dependence() {
    let started = Instant::now();
    let mut cfg = workspace_config(SWEEP);
    let (data, source) = desk_data(&mut cfg);
    let cells = run_all(&cfg, &data);
    let sweep = cfg.sweep.clone().unwrap();
    let tb = sweep.train_sizes[0];
    let (lo, hi) = (*sweep.eval_sizes.iter().min().unwrap(), *sweep.eval_sizes.iter().max().unwrap());
    let acc = |n: NormKind, mode: &str, eb: usize| -> f64 {
        let label = format!("train{tb}_eval{eb}");
        let metric = format!("sweep_accuracy_{mode}");
        cells[&n][0].rows.iter().find(|r| r.metric == metric && r.layer == label).map_or(f64::NAN, |r| r.value)
    };
    let bt = NormKind::BatchTrain;
    let (bt_lo, bt_hi) = (acc(bt, "eval", lo), acc(bt, "eval", hi));
    let gap = bt_hi - bt_lo;

    let mut invariant = Vec::new();
    for n in [NormKind::Layer, NormKind::PreLayerNorm] {
        let digests = &cells[&n][0].extra["logits_sha256"];
        let same = ["eval", "batch_stats"].iter().all(|mode| {
            let mut d = sweep.eval_sizes.iter().map(|eb| digests[format!("train{tb}_eval{eb}_{mode}")].as_str());
            let first = d.next().flatten();
            first.is_some() && d.all(|x| x == first)
        });
        let accs: Vec<f64> = sweep.eval_sizes.iter().map(|&eb| acc(n, "eval", eb)).collect();
        let acc_same = accs.iter().all(|a| a.to_bits() == accs[0].to_bits());
        invariant.push((n, same && acc_same, accs[0]));
    }
    let pass = gap >= 0.02 && invariant.iter().all(|v| v.1) && started.elapsed().as_secs_f64() < 1200.0;
    report(
        9,
        "batch size dependence",
        pass,
        &format!(
            "{source}, train batch {tb}; batch_train accuracy eval {lo}: {bt_lo:.4}, eval {hi}: {bt_hi:.4}, gap {:.2} points (>= 2); bitwise-equal logits across eval sizes {:?}: {}",
            100.0 * gap,
            sweep.eval_sizes,
            invariant.iter().map(|(n, ok, a)| format!("{n} {ok} (acc {a:.4})")).collect::<Vec<_>>().join(", ")
        ),
        started,
    );
}

#[test]
fn criterion_10_training_smoke() {
    let started = Instant::now();
    let mut cfg = workspace_config(SMOKE);
    let (data, source) = desk_data(&mut cfg);
    let cells = run_all(&cfg, &data);
    let results: Vec<(NormKind, f64, f64)> = cfg
        .normalizers
        .iter()
        .map(|&n| {
            let c = &cells[&n][0];
            (n, headline(c, "best_lr"), headline(c, "test_accuracy"))
        })
        .collect();
    let pass = results.iter().all(|r| r.2 > 0.95) && started.elapsed().as_secs_f64() < 900.0;
    let steps = cfg.train.as_ref().map_or(0, |t| t.steps);
    report(
        10,
        "training smoke",
        pass,
        &format!(
            "{source}, mlp, {steps} steps, lr grid {:?}; test accuracy (> 0.95) {}",
            cfg.train.as_ref().unwrap().lr.values(),
            results.iter().map(|(n, lr, a)| format!("{n} {a:.4} @ lr {lr}")).collect::<Vec<_>>().join(", ")
        ),
        started,
    );
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_11_determinism_and_io() {
    let started = Instant::now();
    let config = r#"{
      "experiment": "train_eval",
      "normalizers": ["batch", "layer", "regnorm"],
      "train": {
        "model": {"kind": "mlp", "depth": 3, "width": 16, "num_classes": 4},
        "lr": [0.05, 0.2], "batch_size_train": 16, "steps": 40, "diagnostic_period": 20
      },
      "dataset": {"id": "synthetic", "samples": 400, "shape": [2, 2, 2], "classes": 4},
      "seeds": 2
    }"#;
    let cfg = parse_config(config).unwrap();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut files = Vec::new();
    for (i, d) in dirs.iter().enumerate() {
        let opts = RunOptions {
            out: Some(d.path().to_path_buf()),
            seed: Some(5),
            workers: if i == 2 { 3 } else { 1 },
            strict: false,
        };
        files = run_experiment(&cfg, &opts).unwrap().files;
    }
    let mut names: Vec<String> = fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let identical = !files.is_empty()
        && names.iter().all(|n| {
            let first = fs::read(dirs[0].path().join(n)).unwrap();
            dirs[1..].iter().all(|d| fs::read(d.path().join(n)).ok().as_ref() == Some(&first))
        });

    let mut rng = RngState::new(1111);
    let bytes = |n: usize, rng: &mut RngState| -> Vec<u8> { (0..n).map(|_| rng.below(256) as u8).collect() };
    let (count, rows, cols) = (7, 5, 3);
    let pixels = bytes(count * rows * cols, &mut rng);
    let labels = bytes(count, &mut rng);
    let img_file = encode_idx_images(count, rows, cols, &pixels).unwrap();
    let lbl_file = encode_idx_labels(&labels);
    let idx_ok = parse_idx(&img_file).unwrap()
        == Idx::Images {
            count,
            rows,
            cols,
            pixels: pixels.clone(),
        }
        && parse_idx(&lbl_file).unwrap() == Idx::Labels(labels.clone());

    let cifar_labels: Vec<u8> = (0..4).map(|_| rng.below(10) as u8).collect();
    let planar = bytes(4 * 3072, &mut rng);
    let cifar_file = encode_cifar10(&cifar_labels, &planar).unwrap();
    let (images, parsed_labels) = parse_cifar10(&cifar_file).unwrap();
    // Back to planar bytes: exact because every value is k / 255.
    let mut back = vec![0u8; planar.len()];
    for (r, img) in images.data().chunks(3072).enumerate() {
        for p in 0..1024 {
            for c in 0..3 {
                back[r * 3072 + c * 1024 + p] = (img[p * 3 + c] * 255.0).round() as u8;
            }
        }
    }
    let cifar_ok = parsed_labels == cifar_labels.iter().map(|&l| usize::from(l)).collect::<Vec<_>>()
        && back == planar
        && encode_cifar10(&cifar_labels, &back).unwrap() == cifar_file;
    report(
        11,
        "determinism and io",
        identical && idx_ok && cifar_ok,
        &format!(
            "{} output files byte-identical across 3 runs (1, 1, 3 workers): {identical}; idx round-trip {idx_ok}; cifar round-trip {cifar_ok}",
            names.len()
        ),
        started,
    );
}
