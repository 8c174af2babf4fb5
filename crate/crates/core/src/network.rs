//! Single-learner forward pass: hidden layer `h = g(W x + b)` and output
//! layer `x~ = beta^T h`, evaluated one neuron at a time in ascending index
//! order, in fixed point or as a float reference.

use thiserror::Error;

use crate::energy::OpCounts;
use crate::fxp::{Accumulator, Datapath, FxpError, FxpFormat, FxpValue};
use crate::prbs::{self, PrbsError};

pub const MAX_INPUTS: usize = 16;
pub const MAX_HIDDEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error(transparent)]
    Prbs(#[from] PrbsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Autoencoder: `m = d`, target is the input.
    Reconstruction,
    /// One output neuron trained toward a constant.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arithmetic {
    Fixed(FxpFormat),
    FloatReference,
}

impl Arithmetic {
    pub fn format(&self) -> Option<FxpFormat> {
        match self {
            Arithmetic::Fixed(f) => Some(*f),
            Arithmetic::FloatReference => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    inputs: usize,
    hidden: usize,
    mode: Mode,
    activation: Activation,
    arithmetic: Arithmetic,
    weight_bits: u8,
    boundary_target: f64,
}

impl NetworkConfig {
    /// ReLU, 16-bit Q3.12 fixed point, 8-bit weights, boundary target 1.
    pub fn new(inputs: usize, hidden: usize, mode: Mode) -> Result<Self, NetworkError> {
        let cfg = Self {
            inputs,
            hidden,
            mode,
            activation: Activation::Relu,
            arithmetic: Arithmetic::Fixed(FxpFormat::Q3_12),
            weight_bits: prbs::TRAINING_WEIGHT_BITS,
            boundary_target: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_activation(mut self, activation: Activation) -> Result<Self, NetworkError> {
        self.activation = activation;
        self.validate()?;
        Ok(self)
    }

    pub fn with_arithmetic(mut self, arithmetic: Arithmetic) -> Result<Self, NetworkError> {
        self.arithmetic = arithmetic;
        self.validate()?;
        Ok(self)
    }

    pub fn with_weight_bits(mut self, bits: u8) -> Result<Self, NetworkError> {
        self.weight_bits = bits;
        self.validate()?;
        Ok(self)
    }

    pub fn with_boundary_target(mut self, target: f64) -> Result<Self, NetworkError> {
        self.boundary_target = target;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if !(1..=MAX_INPUTS).contains(&self.inputs) {
            return Err(NetworkError::InvalidConfig(format!(
                "d must be in 1..={MAX_INPUTS}, got {}",
                self.inputs
            )));
        }
        if !(1..=MAX_HIDDEN).contains(&self.hidden) {
            return Err(NetworkError::InvalidConfig(format!(
                "L must be in 1..={MAX_HIDDEN}, got {}",
                self.hidden
            )));
        }
        prbs::validate_weight_bits(self.weight_bits)?;
        if self.activation == Activation::Sigmoid && self.arithmetic != Arithmetic::FloatReference {
            return Err(NetworkError::InvalidConfig(
                "sigmoid is only available in float reference mode".into(),
            ));
        }
        if !self.boundary_target.is_finite() {
            return Err(NetworkError::InvalidConfig(
                "boundary target must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn outputs(&self) -> usize {
        match self.mode {
            Mode::Reconstruction => self.inputs,
            Mode::Boundary => 1,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn arithmetic(&self) -> Arithmetic {
        self.arithmetic
    }

    pub fn weight_bits(&self) -> u8 {
        self.weight_bits
    }

    pub fn boundary_target(&self) -> f64 {
        self.boundary_target
    }

    /// The configuration the training datapath runs with: full 16-bit
    /// words and 8-bit weights.
    pub fn for_training(&self) -> Self {
        let mut cfg = *self;
        cfg.weight_bits = prbs::TRAINING_WEIGHT_BITS;
        if let Arithmetic::Fixed(_) = cfg.arithmetic {
            cfg.arithmetic = Arithmetic::Fixed(FxpFormat::Q3_12);
        }
        cfg
    }

    /// MACs of one inference: `L*d + L*m`.
    pub fn macs_per_inference(&self) -> u64 {
        (self.hidden * (self.inputs + self.outputs())) as u64
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), NetworkError> {
    if expected == got {
        Ok(())
    } else {
        Err(NetworkError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

fn check_hidden_shapes(cfg: &NetworkConfig, x: usize, w: usize, b: usize) -> Result<(), NetworkError> {
    check_len("input vector", cfg.inputs, x)?;
    check_len("input weights", cfg.inputs * cfg.hidden, w)?;
    check_len("biases", cfg.hidden, b)
}

/// `h_j = relu(slice(b_j + sum_i W_ji x_i))`. The bias is preloaded into the
/// accumulator, so exactly `L*d` MACs are counted.
pub fn hidden_layer_fixed(
    x: &[FxpValue],
    w: &[FxpValue],
    b: &[FxpValue],
    config: &NetworkConfig,
    dp: &mut Datapath,
) -> Result<Vec<FxpValue>, NetworkError> {
    check_hidden_shapes(config, x.len(), w.len(), b.len())?;
    if config.activation != Activation::Relu {
        return Err(NetworkError::InvalidConfig(
            "fixed datapath supports ReLU only".into(),
        ));
    }
    let d = config.inputs;
    let mut h = Vec::with_capacity(config.hidden);
    for j in 0..config.hidden {
        let acc = Accumulator::preload(b[j])?;
        let acc = dp.dot(acc, w[j * d..(j + 1) * d].iter().zip(x))?;
        let pre = dp.slice(acc);
        dp.ops.activation += 1;
        h.push(if pre.raw() < 0 {
            FxpValue::zero(pre.format())
        } else {
            pre
        });
    }
    Ok(h)
}

pub fn hidden_layer_float(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    config: &NetworkConfig,
    ops: &mut OpCounts,
) -> Result<Vec<f64>, NetworkError> {
    check_hidden_shapes(config, x.len(), w.len(), b.len())?;
    let d = config.inputs;
    let mut h = Vec::with_capacity(config.hidden);
    for j in 0..config.hidden {
        let mut acc = b[j];
        for i in 0..d {
            acc += w[j * d + i] * x[i];
        }
        ops.mac += d as u64;
        ops.activation += 1;
        h.push(match config.activation {
            Activation::Relu => acc.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-acc).exp()),
        });
    }
    Ok(h)
}

/// `x~_k = slice(sum_j beta_jk h_j)` with `beta` row-major `L x m`.
pub fn output_layer_fixed(
    h: &[FxpValue],
    beta: &[FxpValue],
    outputs: usize,
    dp: &mut Datapath,
) -> Result<Vec<FxpValue>, NetworkError> {
    check_len("output weights", h.len() * outputs, beta.len())?;
    let format = dp.format();
    let mut out = Vec::with_capacity(outputs);
    for k in 0..outputs {
        let mut acc = Accumulator::zero(format);
        for (j, hj) in h.iter().enumerate() {
            acc = dp.mac(acc, beta[j * outputs + k], *hj)?;
        }
        out.push(dp.slice(acc));
    }
    Ok(out)
}

pub fn output_layer_float(
    h: &[f64],
    beta: &[f64],
    outputs: usize,
    ops: &mut OpCounts,
) -> Result<Vec<f64>, NetworkError> {
    check_len("output weights", h.len() * outputs, beta.len())?;
    let mut out = Vec::with_capacity(outputs);
    for k in 0..outputs {
        let mut acc = 0.0;
        for (j, hj) in h.iter().enumerate() {
            acc += beta[j * outputs + k] * hj;
        }
        out.push(acc);
    }
    ops.mac += (h.len() * outputs) as u64;
    Ok(out)
}

/// Target vector of one sample: the input itself, or the boundary constant.
pub fn target_for<'a>(x: &'a [f64], config: &NetworkConfig) -> std::borrow::Cow<'a, [f64]> {
    match config.mode {
        Mode::Reconstruction => std::borrow::Cow::Borrowed(x),
        Mode::Boundary => std::borrow::Cow::Owned(vec![config.boundary_target]),
    }
}

/// Squared error `sum_k (x_k - x~_k)^2`; boundary mode compares the single
/// output against the target.
pub fn reconstruction_error(
    x: &[f64],
    out: &[f64],
    config: &NetworkConfig,
) -> Result<f64, NetworkError> {
    let target = target_for(x, config);
    check_len("output vector", target.len(), out.len())?;
    Ok(target
        .iter()
        .zip(out)
        .map(|(t, y)| (t - y) * (t - y))
        .sum())
}

/// Exact squared error of fixed-point words, in the accumulator's scale.
pub fn squared_error_fixed(target: &[FxpValue], out: &[FxpValue]) -> Result<f64, NetworkError> {
    check_len("output vector", target.len(), out.len())?;
    let Some(first) = target.first() else {
        return Ok(0.0);
    };
    let frac = i32::from(first.format().frac_bits());
    let sum: i128 = target
        .iter()
        .zip(out)
        .map(|(t, y)| {
            let diff = i128::from(t.raw()) - i128::from(y.raw());
            diff * diff
        })
        .sum();
    Ok(sum as f64 * f64::from(-2 * frac).exp2())
}
