use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalizers::{NormKind, DEFAULT_EPS, DEFAULT_MOMENTUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    WideResNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Weight initialization: `N(0, gain / fan_in)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// He for ReLU, LeCun for tanh.
    Auto,
    /// gain 2
    He,
    /// gain 1
    Lecun,
}

/// Architecture description. Optional fields fall back to documented defaults
/// and are omitted when serialized, so a parsed config writes back unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ArchKind,
    /// Number of weight layers, classifier included.
    pub depth: usize,
    /// Hidden units (mlp) or channel multiplier (wideresnet).
    pub width: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    /// (H, W, C) of one input sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelConfig {
    pub fn mlp(depth: usize, width: usize, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            kind: ArchKind::Mlp,
            depth,
            width,
            num_classes,
            skip: None,
            activation: None,
            norm: None,
            eps: None,
            momentum: None,
            input_shape: Some(input_shape),
            init: None,
            seed: None,
        }
    }

    pub fn wide_resnet(depth: usize, widen: usize, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            kind: ArchKind::WideResNet,
            ..Self::mlp(depth, widen, input_shape, num_classes)
        }
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = Some(norm);
        self
    }

    pub fn with_skip(mut self, skip: bool) -> Self {
        self.skip = Some(skip);
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = Some(activation);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = Some(init);
        self
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm.unwrap_or(NormKind::None)
    }

    pub fn skip_enabled(&self) -> bool {
        self.skip.unwrap_or(false)
    }

    pub fn activation_fn(&self) -> Activation {
        self.activation.unwrap_or(Activation::Relu)
    }

    pub fn eps_value(&self) -> f64 {
        self.eps.unwrap_or(DEFAULT_EPS)
    }

    pub fn momentum_value(&self) -> f64 {
        self.momentum.unwrap_or(DEFAULT_MOMENTUM)
    }

    pub fn seed_value(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Variance gain of the weight initializer.
    pub fn init_gain(&self) -> f64 {
        match (self.init.unwrap_or(InitScheme::Auto), self.activation_fn()) {
            (InitScheme::He, _) | (InitScheme::Auto, Activation::Relu) => 2.0,
            (InitScheme::Lecun, _) | (InitScheme::Auto, Activation::Tanh) => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.width < 1 {
            return Err(Error::Config("width must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        let eps = self.eps_value();
        if !(eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        let m = self.momentum_value();
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::Config(format!("momentum must lie in (0,1), got {m}")));
        }
        if let Some(shape) = self.input_shape {
            if shape.iter().any(|&d| d == 0) {
                return Err(Error::Config(format!("input_shape {shape:?} has a zero dimension")));
            }
        }
        match self.kind {
            ArchKind::Mlp if self.skip_enabled() => {
                Err(Error::Config("skip connections are only defined for wideresnet".into()))
            }
            ArchKind::WideResNet if (self.depth < 8 || (self.depth - 2) % 6 != 0) => Err(Error::Config(format!(
                "wideresnet depth must be 6n+2 with n >= 1, got {}",
                self.depth
            ))),
            _ => Ok(()),
        }
    }

    /// Residual blocks per stage (wideresnet).
    pub fn blocks_per_stage(&self) -> usize {
        (self.depth.saturating_sub(2)) / 6
    }

    /// Channel counts of the three stages (wideresnet).
    pub fn stage_widths(&self) -> [usize; 3] {
        [16 * self.width, 32 * self.width, 64 * self.width]
    }

    /// Parameter count implied by the config, without building the model.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let [h, w, c] = self
            .input_shape
            .ok_or_else(|| Error::Config("input_shape is required".into()))?;
        let affine = |ch: usize| if self.norm_kind().has_affine() { 2 * ch } else { 0 };
        let k = self.num_classes;
        Ok(match self.kind {
            ArchKind::Mlp => {
                let din = h * w * c;
                let mut total = 0;
                let mut prev = din;
                for _ in 0..self.depth - 1 {
                    total += prev * self.width + self.width + affine(self.width);
                    prev = self.width;
                }
                total + prev * k + k
            }
            ArchKind::WideResNet => {
                let conv = |cin: usize, cout: usize, ks: usize| ks * ks * cin * cout + cout;
                let mut total = conv(c, 16, 3) + affine(16);
                let mut prev = 16;
                for (s, &out) in self.stage_widths().iter().enumerate() {
                    for b in 0..self.blocks_per_stage() {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        total += conv(prev, out, 3) + affine(out) + conv(out, out, 3) + affine(out);
                        if self.skip_enabled() && (prev != out || stride != 1) {
                            total += prev * out;
                        }
                        prev = out;
                    }
                }
                total + prev * k + k
            }
        })
    }
}
