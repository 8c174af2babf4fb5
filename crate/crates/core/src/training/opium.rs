//! OPIUM and OPIUM-Lite: inverse-free rank-one updates of the output weights.
//!
//! ```text
//! u    = theta h
//! eta  = u / (1 + h^T u)
//! beta = beta + eta (target - beta^T h)^T
//! theta = theta - eta u^T          (skipped in Lite mode)
//! ```

use nalgebra::{DMatrix, DVector};

use super::TrainingError;
use crate::energy::OpCounts;
use crate::fxp::{quantize, Accumulator, Datapath, FxpFormat, FxpValue};

/// Float reference OPIUM.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatOpium {
    beta: DMatrix<f64>,
    theta: DMatrix<f64>,
    lite: bool,
    theta_init: f64,
    samples_seen: u64,
}

impl FloatOpium {
    pub fn new(hidden: usize, outputs: usize, theta_init: f64, lite: bool) -> Result<Self, TrainingError> {
        check_theta_init(theta_init)?;
        Ok(Self {
            beta: DMatrix::zeros(hidden, outputs),
            theta: DMatrix::identity(hidden, hidden) * theta_init,
            lite,
            theta_init,
            samples_seen: 0,
        })
    }

    pub fn from_parts(beta: DMatrix<f64>, theta: DMatrix<f64>, lite: bool, theta_init: f64, samples_seen: u64) -> Self {
        Self {
            beta,
            theta,
            lite,
            theta_init,
            samples_seen,
        }
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn lite(&self) -> bool {
        self.lite
    }

    pub fn theta_init(&self) -> f64 {
        self.theta_init
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    /// One update; returns the gain vector `eta`.
    pub fn update(&mut self, h: &[f64], target: &[f64], ops: &mut OpCounts) -> Result<DVector<f64>, TrainingError> {
        let l = self.beta.nrows();
        let m = self.beta.ncols();
        super::check_len("hidden vector", l, h.len())?;
        super::check_len("target vector", m, target.len())?;
        let h = DVector::from_column_slice(h);

        let u = if self.lite {
            // theta stays at c*I, so only the diagonal contributes
            ops.mac += l as u64;
            DVector::from_fn(l, |j, _| self.theta[(j, j)] * h[j])
        } else {
            ops.mac += (l * l) as u64;
            &self.theta * &h
        };
        let s = 1.0 + h.dot(&u);
        ops.mac += l as u64;
        if !(s > 0.0) {
            return Err(TrainingError::DegenerateDenominator(s));
        }
        let inv_s = 1.0 / s;
        ops.divide += 1;
        let eta = &u * inv_s;
        ops.mac += l as u64;

        let err = DVector::from_column_slice(target) - self.beta.tr_mul(&h);
        self.beta += &eta * err.transpose();
        ops.mac += 2 * (l * m) as u64;

        if !self.lite {
            // (u_i u_j) / s is symmetric in i and j bit for bit
            for i in 0..l {
                for j in 0..l {
                    self.theta[(i, j)] -= (u[i] * u[j]) * inv_s;
                }
            }
            ops.mac += (l * l) as u64;
            ops.theta_update += (l * l) as u64;
        }
        self.samples_seen += 1;
        Ok(eta)
    }
}

/// OPIUM on the fixed-point datapath. `beta` and `theta` are stored as
/// datapath words; every product goes through the 32-bit accumulator.
///
/// The reciprocal `1 / (1 + h^T u)` is one integer divide of a pre-shifted
/// constant by the accumulator value, truncated. Training slices round to
/// nearest (a half-LSB constant is loaded into the accumulator first);
/// truncation bias would otherwise accumulate in `theta` over hundreds of
/// updates.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedOpium {
    format: FxpFormat,
    hidden: usize,
    outputs: usize,
    beta: Vec<FxpValue>,
    theta: Vec<FxpValue>,
    lite: bool,
    theta_init: f64,
    samples_seen: u64,
}

impl FixedOpium {
    pub fn new(
        hidden: usize,
        outputs: usize,
        theta_init: f64,
        lite: bool,
        format: FxpFormat,
    ) -> Result<Self, TrainingError> {
        check_theta_init(theta_init)?;
        let (c, sat) = quantize(theta_init, format);
        if sat || c.raw() <= 0 {
            return Err(TrainingError::InvalidConfig(format!(
                "theta_init {theta_init} is not representable in Q{}.{}",
                format.word_bits() - format.frac_bits() - 1,
                format.frac_bits()
            )));
        }
        let zero = FxpValue::zero(format);
        let mut theta = vec![zero; hidden * hidden];
        for j in 0..hidden {
            theta[j * hidden + j] = c;
        }
        Ok(Self {
            format,
            hidden,
            outputs,
            beta: vec![zero; hidden * outputs],
            theta,
            lite,
            theta_init,
            samples_seen: 0,
        })
    }

    pub fn from_parts(
        format: FxpFormat,
        hidden: usize,
        outputs: usize,
        beta: Vec<FxpValue>,
        theta: Vec<FxpValue>,
        lite: bool,
        theta_init: f64,
        samples_seen: u64,
    ) -> Result<Self, TrainingError> {
        super::check_len("beta", hidden * outputs, beta.len())?;
        super::check_len("theta", hidden * hidden, theta.len())?;
        Ok(Self {
            format,
            hidden,
            outputs,
            beta,
            theta,
            lite,
            theta_init,
            samples_seen,
        })
    }

    pub fn format(&self) -> FxpFormat {
        self.format
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Row-major `L x m`.
    pub fn beta(&self) -> &[FxpValue] {
        &self.beta
    }

    /// Row-major `L x L`.
    pub fn theta(&self) -> &[FxpValue] {
        &self.theta
    }

    pub fn lite(&self) -> bool {
        self.lite
    }

    pub fn theta_init(&self) -> f64 {
        self.theta_init
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    fn rounding(&self) -> Result<Accumulator, TrainingError> {
        Ok(Accumulator::from_raw(1i64 << (self.format.slice_shift() - 1), self.format)?)
    }

    fn preload_rounded(&self, v: FxpValue) -> Result<Accumulator, TrainingError> {
        Ok(Accumulator::preload(v)?.add_raw(1i64 << (self.format.slice_shift() - 1))?)
    }

    /// One update; returns the gain vector `eta`.
    pub fn update(
        &mut self,
        h: &[FxpValue],
        target: &[FxpValue],
        dp: &mut Datapath,
    ) -> Result<Vec<FxpValue>, TrainingError> {
        let l = self.hidden;
        let m = self.outputs;
        super::check_len("hidden vector", l, h.len())?;
        super::check_len("target vector", m, target.len())?;
        let round = self.rounding()?;

        // u = theta h
        let mut u = Vec::with_capacity(l);
        for j in 0..l {
            let acc = if self.lite {
                dp.mac(round, self.theta[j * l + j], h[j])?
            } else {
                dp.dot(round, self.theta[j * l..(j + 1) * l].iter().zip(h))?
            };
            u.push(dp.slice(acc));
        }

        // s = 1 + h^T u, kept at accumulator precision
        let s = dp.dot(Accumulator::preload(FxpValue::one(self.format))?, h.iter().zip(&u))?;
        if s.raw() <= 0 {
            return Err(TrainingError::DegenerateDenominator(s.to_f64()));
        }
        let frac = u32::from(self.format.frac_bits());
        let numerator = 1i128 << (3 * frac);
        let (r, sat) = FxpValue::saturating(
            (numerator / i128::from(s.raw())) as i64,
            self.format,
        );
        dp.ops.divide += 1;
        if sat {
            return Err(TrainingError::DegenerateDenominator(s.to_f64()));
        }

        let mut eta = Vec::with_capacity(l);
        for uj in &u {
            let acc = dp.mac(round, *uj, r)?;
            eta.push(dp.slice(acc));
        }

        // innovation e = target - beta^T h
        let mut err = Vec::with_capacity(m);
        for k in 0..m {
            let mut acc = round;
            for j in 0..l {
                acc = dp.mac(acc, self.beta[j * m + k], h[j])?;
            }
            let y = dp.slice(acc);
            err.push(dp.sub(target[k], y)?);
        }

        for j in 0..l {
            for k in 0..m {
                let acc = self.preload_rounded(self.beta[j * m + k])?;
                let acc = dp.mac(acc, eta[j], err[k])?;
                self.beta[j * m + k] = dp.slice(acc);
            }
        }

        if !self.lite {
            for i in 0..l {
                for j in 0..l {
                    let acc = self.preload_rounded(self.theta[i * l + j])?;
                    let acc = dp.msub(acc, eta[i], u[j])?;
                    self.theta[i * l + j] = dp.slice(acc);
                }
            }
            dp.ops.theta_update += (l * l) as u64;
        }
        self.samples_seen += 1;
        Ok(eta)
    }
}

fn check_theta_init(c: f64) -> Result<(), TrainingError> {
    if c.is_finite() && c > 0.0 {
        Ok(())
    } else {
        Err(TrainingError::InvalidConfig(format!(
            "theta_init must be positive and finite, got {c}"
        )))
    }
}
