//! Online learning of the output weights.

pub mod opium;
pub mod oselm;
pub mod pinv;
pub mod record;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::energy::{OpCounts, TrainingTally};
use crate::ensemble::BaseLearner;
use crate::features::FeatureVector;
use crate::fxp::{quantize, Datapath, FxpError, FxpFormat, FxpValue};
use crate::network::{self, Arithmetic, NetworkConfig, NetworkError};
use crate::prbs::PrbsError;

pub use opium::{FixedOpium, FloatOpium};
pub use oselm::Oselm;
pub use pinv::batch_pinv;

/// `theta_0` scale of float OPIUM unless configured.
pub const DEFAULT_THETA_INIT_FLOAT: f64 = 100.0;
/// `theta_0` scale of OPIUM-Lite, and of OPIUM on the Q3.12 datapath where
/// larger values are not representable.
pub const DEFAULT_THETA_INIT_LITE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("OPIUM denominator 1 + h'theta h = {0} is not positive")]
    DegenerateDenominator(f64),
    #[error("OSELM system is singular")]
    SingularSystem,
    #[error("invalid training configuration: {0}")]
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
    Network(#[from] NetworkError),
    #[error(transparent)]
    Prbs(#[from] PrbsError),
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), TrainingError> {
    if expected == got {
        Ok(())
    } else {
        Err(TrainingError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateRule {
    Opium,
    OpiumLite,
    /// Float reference only.
    Oselm,
}

impl UpdateRule {
    pub fn default_theta_init(self, arithmetic: Arithmetic) -> f64 {
        match (self, arithmetic) {
            (UpdateRule::OpiumLite, _) | (_, Arithmetic::Fixed(_)) => DEFAULT_THETA_INIT_LITE,
            _ => DEFAULT_THETA_INIT_FLOAT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Opium => "opium",
            UpdateRule::OpiumLite => "opium-lite",
            UpdateRule::Oselm => "oselm",
        }
    }
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpdateRule {
    type Err = TrainingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "opium" => Ok(UpdateRule::Opium),
            "opium-lite" | "lite" => Ok(UpdateRule::OpiumLite),
            "oselm" => Ok(UpdateRule::Oselm),
            other => Err(TrainingError::InvalidConfig(format!("unknown rule {other:?}"))),
        }
    }
}

/// Trainable output-layer state of one learner.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnerModel {
    FixedOpium(FixedOpium),
    FloatOpium(FloatOpium),
    Oselm(Oselm),
}

impl LearnerModel {
    pub fn new(rule: UpdateRule, config: &NetworkConfig, theta_init: Option<f64>) -> Result<Self, TrainingError> {
        let l = config.hidden();
        let m = config.outputs();
        let c = theta_init.unwrap_or_else(|| rule.default_theta_init(config.arithmetic()));
        let lite = rule == UpdateRule::OpiumLite;
        match (rule, config.arithmetic()) {
            (UpdateRule::Oselm, Arithmetic::Fixed(_)) => Err(TrainingError::InvalidConfig(
                "OSELM runs in float reference mode only".into(),
            )),
            (UpdateRule::Oselm, Arithmetic::FloatReference) => Ok(LearnerModel::Oselm(Oselm::new(l, m, c)?)),
            (_, Arithmetic::Fixed(_)) => Ok(LearnerModel::FixedOpium(FixedOpium::new(
                l,
                m,
                c,
                lite,
                FxpFormat::Q3_12,
            )?)),
            (_, Arithmetic::FloatReference) => Ok(LearnerModel::FloatOpium(FloatOpium::new(l, m, c, lite)?)),
        }
    }

    pub fn rule(&self) -> UpdateRule {
        match self {
            LearnerModel::FixedOpium(s) if s.lite() => UpdateRule::OpiumLite,
            LearnerModel::FloatOpium(s) if s.lite() => UpdateRule::OpiumLite,
            LearnerModel::FixedOpium(_) | LearnerModel::FloatOpium(_) => UpdateRule::Opium,
            LearnerModel::Oselm(_) => UpdateRule::Oselm,
        }
    }

    pub fn theta_init(&self) -> f64 {
        match self {
            LearnerModel::FixedOpium(s) => s.theta_init(),
            LearnerModel::FloatOpium(s) => s.theta_init(),
            LearnerModel::Oselm(s) => s.theta_init(),
        }
    }

    pub fn samples_seen(&self) -> u64 {
        match self {
            LearnerModel::FixedOpium(s) => s.samples_seen(),
            LearnerModel::FloatOpium(s) => s.samples_seen(),
            LearnerModel::Oselm(s) => s.samples_seen(),
        }
    }

    /// Row-major `L x m` real values.
    pub fn beta_f64(&self) -> Vec<f64> {
        match self {
            LearnerModel::FixedOpium(s) => s.beta().iter().map(FxpValue::to_f64).collect(),
            LearnerModel::FloatOpium(s) => row_major(s.beta()),
            LearnerModel::Oselm(s) => row_major(s.beta()),
        }
    }

    /// Output weights as words of `format`: fixed models are rescaled,
    /// float models quantized.
    pub fn beta_words(&self, format: FxpFormat) -> Vec<FxpValue> {
        match self {
            LearnerModel::FixedOpium(s) => s.beta().iter().map(|b| b.rescale(format).0).collect(),
            _ => self.beta_f64().into_iter().map(|b| quantize(b, format).0).collect(),
        }
    }

    pub fn beta_norm(&self) -> f64 {
        self.beta_f64().iter().map(|b| b * b).sum::<f64>().sqrt()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    /// Frobenius norm of `beta` after each sample.
    pub beta_norms: Vec<f64>,
    pub tally: TrainingTally,
    pub saturated: bool,
}

/// One training step: hidden layer on the training datapath, then the
/// learner's update rule.
pub fn train_sample(learner: &mut BaseLearner, x: &FeatureVector, ops: &mut OpCounts) -> Result<bool, TrainingError> {
    let cfg = learner.config().for_training();
    let weights = learner.training_weights()?;
    let mut saturated = false;
    match learner.model_mut() {
        LearnerModel::FixedOpium(state) => {
            let fmt = state.format();
            let mut dp = Datapath::new(fmt);
            let xq = x.to_fixed(fmt);
            let (w, b) = weights.rescaled(fmt);
            let h = network::hidden_layer_fixed(&xq, &w, &b, &cfg, &mut dp)?;
            let target: Vec<FxpValue> = match cfg.mode() {
                network::Mode::Reconstruction => xq,
                network::Mode::Boundary => vec![dp.quantize(cfg.boundary_target())],
            };
            state.update(&h, &target, &mut dp)?;
            *ops += dp.ops;
            saturated = dp.saturated();
        }
        model => {
            let xf = x.to_f64();
            let (w, b) = weights.to_f64(FxpFormat::Q3_12);
            let h = network::hidden_layer_float(&xf, &w, &b, &cfg, ops)?;
            let target = network::target_for(&xf, &cfg);
            match model {
                LearnerModel::FloatOpium(s) => {
                    s.update(&h, &target, ops)?;
                }
                LearnerModel::Oselm(s) => s.update(&h, &target, ops)?,
                LearnerModel::FixedOpium(_) => unreachable!(),
            }
        }
    }
    Ok(saturated)
}

/// Trains on every sample in order and records the `beta` norm trace.
pub fn train_stream(learner: &mut BaseLearner, samples: &[FeatureVector]) -> Result<TrainingReport, TrainingError> {
    let mut report = TrainingReport::default();
    for x in samples {
        report.saturated |= train_sample(learner, x, &mut report.tally.ops)?;
        report.tally.samples += 1;
        report.beta_norms.push(learner.model().beta_norm());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Mode;

    #[test]
    fn rule_parsing_and_defaults() {
        assert_eq!("OPIUM_Lite".parse::<UpdateRule>().unwrap(), UpdateRule::OpiumLite);
        assert!("sgd".parse::<UpdateRule>().is_err());
        let fixed = Arithmetic::Fixed(FxpFormat::Q3_12);
        assert_eq!(UpdateRule::Opium.default_theta_init(fixed), 1.0);
        assert_eq!(UpdateRule::Opium.default_theta_init(Arithmetic::FloatReference), 100.0);
        assert_eq!(UpdateRule::OpiumLite.default_theta_init(Arithmetic::FloatReference), 1.0);
    }

    #[test]
    fn oselm_needs_float() {
        let cfg = NetworkConfig::new(4, 8, Mode::Boundary).unwrap();
        assert!(LearnerModel::new(UpdateRule::Oselm, &cfg, None).is_err());
        let f = cfg.with_arithmetic(Arithmetic::FloatReference).unwrap();
        assert_eq!(LearnerModel::new(UpdateRule::Oselm, &f, None).unwrap().rule(), UpdateRule::Oselm);
    }

    #[test]
    fn zero_samples_leave_learner_unchanged() {
        let cfg = NetworkConfig::new(5, 8, Mode::Reconstruction).unwrap();
        let mut learner = BaseLearner::new(1, 0xACE1, cfg, UpdateRule::Opium, None).unwrap();
        let before = learner.clone();
        let report = train_stream(&mut learner, &[]).unwrap();
        assert_eq!(learner, before);
        assert!(report.beta_norms.is_empty());
    }
}
