//! Versioned little-endian learner record.
//!
//! ```text
//! "ADBL" u16:version
//! u8:id u8:d u8:L u8:m u8:mode u16:seed u8:rule u8:arithmetic
//! u8:word_bits u8:slice_select u8:frac_bits u8:weight_bits u8:activation u8:flags
//! f64:theta_init f64:boundary_target u64:samples_seen f64:threshold (NaN = unset)
//! beta, row-major L x m   (i16 words when fixed, f64 when float)
//! theta or K, L x L       (present when flags bit 0 is set)
//! u32:crc32 of every preceding byte
//! ```

use nalgebra::DMatrix;
use thiserror::Error;

use super::{FixedOpium, FloatOpium, LearnerModel, Oselm, UpdateRule};
use crate::ensemble::BaseLearner;
use crate::fxp::{FxpFormat, FxpValue};
use crate::network::{Activation, Arithmetic, Mode, NetworkConfig};

pub const LEARNER_MAGIC: &[u8; 4] = b"ADBL";
pub const LEARNER_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported record version {0}")]
    UnsupportedVersion(u16),
    #[error("record truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid record: {0}")]
    Invalid(String),
}

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i16(&mut self, v: i16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    /// Appends the CRC32 trailer and returns the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies the CRC32 trailer and returns a reader over the body.
    pub fn checked(data: &'a [u8]) -> Result<Self, RecordError> {
        if data.len() < 4 {
            return Err(RecordError::Truncated);
        }
        let (body, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(RecordError::ChecksumMismatch { stored, computed });
        }
        Ok(Self { data: body, pos: 0 })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], RecordError> {
        let end = self.pos.checked_add(n).ok_or(RecordError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(RecordError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, RecordError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, RecordError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    pub fn u32(&mut self) -> Result<u32, RecordError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64, RecordError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64, RecordError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn i16(&mut self) -> Result<i16, RecordError> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    pub fn done(&self) -> Result<(), RecordError> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(RecordError::Invalid(format!(
                "{} trailing bytes",
                self.data.len() - self.pos
            )))
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> RecordError {
    RecordError::Invalid(e.to_string())
}

fn write_matrix(w: &mut Writer, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.f64(m[(r, c)]);
        }
    }
}

fn read_matrix(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<DMatrix<f64>, RecordError> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = r.f64()?;
        }
    }
    Ok(m)
}

fn read_words(r: &mut Reader<'_>, n: usize, format: FxpFormat) -> Result<Vec<FxpValue>, RecordError> {
    (0..n)
        .map(|_| FxpValue::new(i64::from(r.i16()?), format).map_err(invalid))
        .collect()
}

pub fn encode_learner(learner: &BaseLearner, with_theta: bool) -> Vec<u8> {
    let cfg = learner.config();
    let model = learner.model();
    let mut w = Writer::new();
    w.bytes(LEARNER_MAGIC);
    w.u16(LEARNER_VERSION);
    w.u8(learner.id() as u8);
    w.u8(cfg.inputs() as u8);
    w.u8(cfg.hidden() as u8);
    w.u8(cfg.outputs() as u8);
    w.u8(match cfg.mode() {
        Mode::Reconstruction => 0,
        Mode::Boundary => 1,
    });
    w.u16(learner.seed());
    w.u8(match model.rule() {
        UpdateRule::Opium => 0,
        UpdateRule::OpiumLite => 1,
        UpdateRule::Oselm => 2,
    });
    let (arith, fmt) = match cfg.arithmetic() {
        Arithmetic::Fixed(f) => (0u8, f),
        Arithmetic::FloatReference => (1u8, FxpFormat::Q3_12),
    };
    w.u8(arith);
    w.u8(fmt.word_bits());
    w.u8(fmt.slice_select());
    w.u8(fmt.frac_bits());
    w.u8(cfg.weight_bits());
    w.u8(match cfg.activation() {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
    });
    // a frozen theta is fully described by theta_init
    let has_theta = with_theta && model.rule() != UpdateRule::OpiumLite;
    w.u8(u8::from(has_theta) | (u8::from(matches!(model, LearnerModel::FixedOpium(_))) << 1));
    w.f64(model.theta_init());
    w.f64(cfg.boundary_target());
    w.u64(model.samples_seen());
    w.f64(learner.threshold().unwrap_or(f64::NAN));
    match model {
        LearnerModel::FixedOpium(s) => {
            for b in s.beta() {
                w.i16(b.raw() as i16);
            }
            if has_theta {
                for t in s.theta() {
                    w.i16(t.raw() as i16);
                }
            }
        }
        LearnerModel::FloatOpium(s) => {
            write_matrix(&mut w, s.beta());
            if has_theta {
                write_matrix(&mut w, s.theta());
            }
        }
        LearnerModel::Oselm(s) => {
            write_matrix(&mut w, s.beta());
            if has_theta {
                write_matrix(&mut w, s.k());
            }
        }
    }
    w.finish()
}

pub fn decode_learner(bytes: &[u8]) -> Result<BaseLearner, RecordError> {
    let mut r = Reader::checked(bytes)?;
    if r.take(4)? != LEARNER_MAGIC {
        return Err(RecordError::BadMagic);
    }
    let version = r.u16()?;
    if version != LEARNER_VERSION {
        return Err(RecordError::UnsupportedVersion(version));
    }
    let id = usize::from(r.u8()?);
    let d = usize::from(r.u8()?);
    let l = usize::from(r.u8()?);
    let m = usize::from(r.u8()?);
    let mode = match r.u8()? {
        0 => Mode::Reconstruction,
        1 => Mode::Boundary,
        x => return Err(invalid(format!("mode {x}"))),
    };
    let seed = r.u16()?;
    let rule = r.u8()?;
    let arith = r.u8()?;
    let (wb, sel, frac) = (r.u8()?, r.u8()?, r.u8()?);
    let weight_bits = r.u8()?;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Sigmoid,
        x => return Err(invalid(format!("activation {x}"))),
    };
    let flags = r.u8()?;
    let has_theta = flags & 1 == 1;
    let fixed_model = flags & 2 == 2;
    let theta_init = r.f64()?;
    let target = r.f64()?;
    let samples_seen = r.u64()?;
    let threshold = r.f64()?;

    let fmt = FxpFormat::new(wb, sel, frac).map_err(invalid)?;
    let arithmetic = match arith {
        0 => Arithmetic::Fixed(fmt),
        1 => Arithmetic::FloatReference,
        x => return Err(invalid(format!("arithmetic {x}"))),
    };
    let cfg = NetworkConfig::new(d, l, mode)
        .and_then(|c| c.with_arithmetic(arithmetic))
        .and_then(|c| c.with_activation(activation))
        .and_then(|c| c.with_weight_bits(weight_bits))
        .and_then(|c| c.with_boundary_target(target))
        .map_err(invalid)?;
    if cfg.outputs() != m {
        return Err(invalid(format!("m = {m} inconsistent with mode")));
    }
    let lite = rule == 1;
    let model = match (rule, fixed_model) {
        (0 | 1, true) => {
            let train_fmt = FxpFormat::Q3_12;
            let beta = read_words(&mut r, l * m, train_fmt)?;
            let theta = if has_theta {
                read_words(&mut r, l * l, train_fmt)?
            } else {
                FixedOpium::new(l, m, theta_init, lite, train_fmt)
                    .map_err(invalid)?
                    .theta()
                    .to_vec()
            };
            LearnerModel::FixedOpium(
                FixedOpium::from_parts(train_fmt, l, m, beta, theta, lite, theta_init, samples_seen)
                    .map_err(invalid)?,
            )
        }
        (0 | 1, false) => {
            let beta = read_matrix(&mut r, l, m)?;
            let theta = if has_theta {
                read_matrix(&mut r, l, l)?
            } else {
                DMatrix::identity(l, l) * theta_init
            };
            LearnerModel::FloatOpium(FloatOpium::from_parts(beta, theta, lite, theta_init, samples_seen))
        }
        (2, false) => {
            let beta = read_matrix(&mut r, l, m)?;
            let k = if has_theta {
                read_matrix(&mut r, l, l)?
            } else {
                DMatrix::identity(l, l) / theta_init
            };
            LearnerModel::Oselm(Oselm::from_parts(beta, k, theta_init, samples_seen))
        }
        (x, _) => return Err(invalid(format!("rule {x}"))),
    };
    r.done()?;
    let threshold = (!threshold.is_nan()).then_some(threshold);
    Ok(BaseLearner::from_parts(id, seed, cfg, model, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;

    fn trained(rule: UpdateRule, arithmetic: Arithmetic) -> BaseLearner {
        let cfg = NetworkConfig::new(4, 6, Mode::Reconstruction)
            .unwrap()
            .with_arithmetic(arithmetic)
            .unwrap();
        let mut l = BaseLearner::new(3, 0x5A6E, cfg, rule, None).unwrap();
        let xs: Vec<FeatureVector> = (0..20)
            .map(|i| FeatureVector::from_codes(vec![i as i8, -(i as i8), 10, 2 * i as i8]))
            .collect();
        l.train(&xs).unwrap();
        l.set_threshold(Some(0.125));
        l
    }

    #[test]
    fn round_trips() {
        for (rule, ar) in [
            (UpdateRule::Opium, Arithmetic::Fixed(FxpFormat::Q3_12)),
            (UpdateRule::OpiumLite, Arithmetic::Fixed(FxpFormat::Q3_12)),
            (UpdateRule::Opium, Arithmetic::FloatReference),
            (UpdateRule::Oselm, Arithmetic::FloatReference),
        ] {
            let l = trained(rule, ar);
            let back = decode_learner(&encode_learner(&l, true)).unwrap();
            assert_eq!(back, l, "{rule:?} {ar:?}");
        }
    }

    #[test]
    fn beta_only_record_keeps_inference() {
        let l = trained(UpdateRule::Opium, Arithmetic::Fixed(FxpFormat::Q3_12));
        let bytes = encode_learner(&l, false);
        let back = decode_learner(&bytes).unwrap();
        assert_eq!(back.model().beta_f64(), l.model().beta_f64());
        assert!(bytes.len() < encode_learner(&l, true).len());
    }

    #[test]
    fn corruption_detected() {
        let l = trained(UpdateRule::Opium, Arithmetic::Fixed(FxpFormat::Q3_12));
        let mut bytes = encode_learner(&l, true);
        bytes[10] ^= 0xFF;
        assert!(matches!(decode_learner(&bytes), Err(RecordError::ChecksumMismatch { .. })));
        assert_eq!(decode_learner(&bytes[..2]), Err(RecordError::Truncated));
        let mut w = Writer::new();
        w.bytes(b"NOPE");
        assert_eq!(decode_learner(&w.finish()), Err(RecordError::BadMagic));
    }
}
