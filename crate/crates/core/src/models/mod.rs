//! Fully connected and wide residual classifiers with a pluggable normalizer.
//!
//! Every weight layer computes `z = op(x) + b`, normalizes `z` and applies the
//! activation. The last layer is the classifier: no normalizer, identity
//! activation. Residual units add the shortcut to `z` before normalizing, so
//! the un-normalized sum is carried along the residual stream.

mod config;

pub use config::{Activation, ArchKind, InitScheme, ModelConfig};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::normalizers::{
    self, normalize_preactivation, BatchMoments, Mode, NormKind, NormSpec, RunningStats,
};
use crate::tensor::shape::{AxisSet, Padding};
use crate::tensor::{RngState, Tensor};

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_elements());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_elements() {
            return Err(Error::dim("assign_flat", &[self.num_elements()], &[flat.len()]));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces tensor `i`, keeping its shape.
    pub fn set(&mut self, i: usize, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[i].shape() {
            return Err(Error::dim("param_set", self.tensors[i].shape(), t.shape()));
        }
        self.tensors[i] = t;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    Dense,
    /// 3x3 SAME convolution.
    Conv { stride: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    /// Adds the residual stream entering the block.
    Identity,
    /// Adds a strided 1x1 convolution of the block's input activation.
    Projection { weight: usize, stride: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Plain,
    /// First unit of a residual block.
    BlockOpen,
    /// Second unit of a residual block; `None` when skips are disabled.
    BlockClose(Option<Shortcut>),
    /// Global average pool (conv nets), then the dense classifier.
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub op: LayerOp,
    pub role: Role,
    pub weight: usize,
    pub bias: usize,
    pub affine: Option<(usize, usize)>,
    /// Index into the model's running statistics.
    pub stats: Option<usize>,
}

impl Layer {
    pub fn is_classifier(&self) -> bool {
        self.role == Role::Classifier
    }
}

/// Per-layer values recorded during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerCapture {
    /// Normalized pre-activation (before gamma/beta); logits for the classifier.
    pub normalized: Var,
    /// Pre-activation before normalization, residual sum included.
    pub preactivation: Var,
    /// Layer output after the activation; logits for the classifier.
    pub activation: Var,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Graph variables of every parameter, in store order.
    pub params: Vec<Var>,
    pub captures: Option<Vec<LayerCapture>>,
    /// Batch moments to fold into running statistics (train mode).
    pub stat_updates: Vec<(usize, BatchMoments)>,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub struct LossGradients {
    pub loss: f64,
    pub cross_entropy: f64,
    /// Unscaled RegNorm penalty (0 for other kinds).
    pub regularizer: f64,
    /// One tensor per parameter, in store order.
    pub grads: Vec<Tensor>,
    pub stat_updates: Vec<(usize, BatchMoments)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layers: Vec<Layer>,
    running: Vec<RunningStats>,
    spec: NormSpec,
}

struct Builder<'a> {
    config: &'a ModelConfig,
    rng: RngState,
    params: ParamStore,
    running: Vec<RunningStats>,
    layers: Vec<Layer>,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<usize> {
        let std = (self.config.init_gain() / fan_in as f64).sqrt();
        let t = Tensor::gaussian(shape, 0.0, std, &mut self.rng)?;
        Ok(self.params.push(name, t))
    }

    fn layer(&mut self, op: LayerOp, role: Role, cin: usize, cout: usize) -> Result<()> {
        let idx = self.layers.len();
        let (shape, fan_in) = match op {
            LayerOp::Dense => (vec![cin, cout], cin),
            LayerOp::Conv { .. } => (vec![3, 3, cin, cout], 9 * cin),
        };
        let weight = self.weight(format!("layer{idx}.weight"), &shape, fan_in)?;
        let bias = self.params.push(format!("layer{idx}.bias"), Tensor::zeros(&[cout]));
        let kind = self.config.norm_kind();
        let normalized = role != Role::Classifier;
        let affine = if normalized && kind.has_affine() {
            let gamma = self.params.push(format!("layer{idx}.gamma"), Tensor::ones(&[cout]));
            let beta = self.params.push(format!("layer{idx}.beta"), Tensor::zeros(&[cout]));
            Some((gamma, beta))
        } else {
            None
        };
        let stats = if normalized && matches!(kind, NormKind::Batch | NormKind::BatchTrain) {
            self.running
                .push(RunningStats::new(cout, self.config.momentum_value())?);
            Some(self.running.len() - 1)
        } else {
            None
        };
        self.layers.push(Layer {
            op,
            role,
            weight,
            bias,
            affine,
            stats,
        });
        Ok(())
    }
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let [h, w, c] = config
            .input_shape
            .ok_or_else(|| Error::Config("input_shape is required".into()))?;
        let spec = NormSpec::new(config.norm_kind(), config.eps_value())?;
        let mut b = Builder {
            config,
            rng: RngState::new(config.seed_value()),
            params: ParamStore::new(),
            running: Vec::new(),
            layers: Vec::new(),
        };
        let k = config.num_classes;
        match config.kind {
            ArchKind::Mlp => {
                let mut prev = h * w * c;
                for _ in 0..config.depth - 1 {
                    b.layer(LayerOp::Dense, Role::Plain, prev, config.width)?;
                    prev = config.width;
                }
                b.layer(LayerOp::Dense, Role::Classifier, prev, k)?;
            }
            ArchKind::WideResNet => {
                b.layer(LayerOp::Conv { stride: 1 }, Role::Plain, c, 16)?;
                let mut prev = 16;
                for (s, &out) in config.stage_widths().iter().enumerate() {
                    for blk in 0..config.blocks_per_stage() {
                        let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                        b.layer(LayerOp::Conv { stride }, Role::BlockOpen, prev, out)?;
                        let shortcut = if !config.skip_enabled() {
                            None
                        } else if prev == out && stride == 1 {
                            Some(Shortcut::Identity)
                        } else {
                            let idx = b.layers.len();
                            let weight = b.weight(format!("layer{idx}.shortcut"), &[1, 1, prev, out], prev)?;
                            Some(Shortcut::Projection { weight, stride })
                        };
                        b.layer(LayerOp::Conv { stride: 1 }, Role::BlockClose(shortcut), out, out)?;
                        prev = out;
                    }
                }
                b.layer(LayerOp::Dense, Role::Classifier, prev, k)?;
            }
        }
        debug_assert_eq!(b.layers.len(), config.depth);
        Ok(Self {
            config: config.clone(),
            params: b.params,
            layers: b.layers,
            running: b.running,
            spec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn norm_kind(&self) -> NormKind {
        self.spec.kind()
    }

    /// Store indices of every parameter owned by layer `i`.
    pub fn layer_params(&self, i: usize) -> Vec<usize> {
        let l = &self.layers[i];
        let mut out = vec![l.weight, l.bias];
        if let Some((gm, bt)) = l.affine {
            out.extend([gm, bt]);
        }
        if let Role::BlockClose(Some(Shortcut::Projection { weight, .. })) = l.role {
            out.push(weight);
        }
        out
    }

    /// Store index of the classifier weight.
    pub fn classifier_weight(&self) -> usize {
        self.layers[self.layers.len() - 1].weight
    }

    pub fn apply_stat_updates(&mut self, updates: &[(usize, BatchMoments)]) -> Result<()> {
        for (i, m) in updates {
            self.running
                .get_mut(*i)
                .ok_or_else(|| Error::Usage(format!("no running stats at index {i}")))?
                .update(m)?;
        }
        Ok(())
    }

    fn input_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let [h, w, c] = self.config.input_shape.expect("validated at build");
        let shape = g.shape(x).to_vec();
        let n = shape.first().copied().unwrap_or(0);
        let ok = match shape.len() {
            4 => shape[1..] == [h, w, c],
            2 => self.config.kind == ArchKind::Mlp && shape[1] == h * w * c,
            _ => false,
        };
        if !ok || n == 0 {
            return Err(Error::dim("model_input", &[n, h, w, c], &shape));
        }
        match self.config.kind {
            ArchKind::Mlp => g.reshape(x, &[n, h * w * c]),
            ArchKind::WideResNet => Ok(x),
        }
    }

    /// Runs the network on `x`, shaped (N,H,W,C) or (N,H*W*C) for the MLP.
    ///
    /// Parameters enter the graph as variables. With `capture`, every layer's
    /// intermediate values are returned in layer order.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, capture: bool) -> Result<ForwardOutput> {
        let params: Vec<Var> = self.params.tensors().iter().map(|t| g.variable(t.clone())).collect();
        self.forward_with(g, x, &params, mode, capture)
    }

    /// Like [`Model::forward`] but with caller-provided parameter variables.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        x: Var,
        params: &[Var],
        mode: Mode,
        capture: bool,
    ) -> Result<ForwardOutput> {
        if params.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let kind = self.spec.kind();
        let act = self.config.activation_fn();
        let mut warnings = Vec::new();
        if mode == Mode::Eval && kind == NormKind::Batch && self.running.iter().any(|s| s.count == 0) {
            warnings.push("evaluating batch norm with running statistics that were never updated".to_string());
        }
        let mut h = self.input_var(g, x)?;
        // Residual stream (un-normalized z) and activation entering the open block.
        let mut stream: Option<Var> = None;
        let mut block_in: Option<(Option<Var>, Var)> = None;
        let mut captures = capture.then(Vec::new);
        let mut stat_updates = Vec::new();
        let mut logits = None;

        for layer in &self.layers {
            if layer.role == Role::BlockOpen {
                block_in = Some((stream, h));
            }
            let mut input = h;
            if layer.is_classifier() && g.shape(input).len() == 4 {
                let pooled = g.mean_axes(input, AxisSet::of(&[1, 2]))?;
                let s = g.shape(pooled).to_vec();
                input = g.reshape(pooled, &[s[0], s[3]])?;
            }
            if !layer.is_classifier() && kind.centers_input() {
                let rank = g.shape(input).len();
                input = normalizers::center(g, input, AxisSet::layer(rank))?;
            }
            let mut w = params[layer.weight];
            if kind == NormKind::Weight && !layer.is_classifier() {
                w = normalizers::weight_norm(g, w)?;
            }
            let mut z = match layer.op {
                LayerOp::Dense => g.matmul(input, w)?,
                LayerOp::Conv { stride } => g.conv2d(input, w, stride, Padding::Same)?,
            };
            let rank = g.shape(z).len();
            let mut bshape = vec![1; rank];
            bshape[rank - 1] = g.shape(params[layer.bias])[0];
            let bias = g.reshape(params[layer.bias], &bshape)?;
            z = g.add(z, bias)?;
            if let Role::BlockClose(Some(sc)) = layer.role {
                let (open_stream, open_act) =
                    block_in.ok_or_else(|| Error::Usage("residual block closed without opening".into()))?;
                let add = match sc {
                    Shortcut::Identity => open_stream.unwrap_or(open_act),
                    Shortcut::Projection { weight, stride } => {
                        g.conv2d(open_act, params[weight], stride, Padding::Same)?
                    }
                };
                z = g.add(z, add)?;
            }
            stream = Some(z);

            if layer.is_classifier() {
                logits = Some(z);
                if let Some(c) = captures.as_mut() {
                    c.push(LayerCapture {
                        normalized: z,
                        preactivation: z,
                        activation: z,
                    });
                }
                continue;
            }
            let stats = layer.stats.map(|i| &self.running[i]);
            let affine = layer.affine.map(|(gm, bt)| (params[gm], params[bt]));
            let norm = normalize_preactivation(g, self.spec, z, mode, stats, affine)?;
            if let (Some(m), Some(i)) = (norm.moments, layer.stats) {
                stat_updates.push((i, m));
            }
            h = match act {
                Activation::Relu => g.relu(norm.output),
                Activation::Tanh => g.tanh(norm.output),
            };
            if let Some(c) = captures.as_mut() {
                c.push(LayerCapture {
                    normalized: norm.normalized,
                    preactivation: z,
                    activation: h,
                });
            }
        }
        Ok(ForwardOutput {
            logits: logits.expect("model ends with a classifier"),
            params: params.to_vec(),
            captures,
            stat_updates,
            warnings,
        })
    }

    /// Logits for a plain input tensor.
    pub fn predict(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let params: Vec<Var> = self.params.tensors().iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward_with(&mut g, xv, &params, mode, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Cross-entropy (plus `lambda_reg` times the RegNorm penalty for RegNorm
    /// kinds) and its gradient for every parameter.
    pub fn loss_gradients(&self, x: &Tensor, labels: &[usize], mode: Mode, lambda_reg: f64) -> Result<LossGradients> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let regularize = self.spec.kind().is_regnorm() && lambda_reg != 0.0;
        let out = self.forward(&mut g, xv, mode, regularize)?;
        let ce = g.softmax_cross_entropy(out.logits, labels)?;
        let (loss, reg) = if regularize {
            let r = self.regularizer_total(&mut g, &out)?;
            let scaled = g.scale(r, lambda_reg);
            (g.add(ce, scaled)?, g.value(r).item()?)
        } else {
            (ce, 0.0)
        };
        let grads = g.backward(loss)?;
        Ok(LossGradients {
            loss: g.value(loss).item()?,
            cross_entropy: g.value(ce).item()?,
            regularizer: reg,
            grads: out
                .params
                .iter()
                .zip(self.params.tensors())
                .map(|(v, t)| grads.wrt(*v, t))
                .collect(),
            stat_updates: out.stat_updates,
        })
    }

    /// Sum of the RegNorm penalty over every normalized layer.
    pub fn regularizer_total(&self, g: &mut Graph, out: &ForwardOutput) -> Result<Var> {
        if !self.spec.kind().is_regnorm() {
            return Err(Error::Usage(format!(
                "regularizer_total needs a regnorm model, got {}",
                self.spec.kind()
            )));
        }
        let captures = out
            .captures
            .as_ref()
            .ok_or_else(|| Error::Usage("regularizer_total needs a forward pass with capture".into()))?;
        let mut total: Option<Var> = None;
        for (layer, cap) in self.layers.iter().zip(captures) {
            if layer.is_classifier() {
                continue;
            }
            let r = normalizers::reg_norm_penalty(g, cap.normalized)?;
            total = Some(match total {
                Some(t) => g.add(t, r)?,
                None => r,
            });
        }
        total.ok_or_else(|| Error::Usage("model has no normalized layers".into()))
    }
}
