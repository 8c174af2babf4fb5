//! Fixed-point datapath emulation.
//!
//! Storage words are signed two's-complement integers of 8, 12 or 16 bits;
//! products accumulate in a 32-bit accumulator and a 16-bit window of the
//! accumulator is selected by a 2-bit slice configuration.
//!
//! | slice_select | accumulator bits |
//! |--------------|------------------|
//! | 0            | `[19:4]`         |
//! | 1            | `[23:8]`         |
//! | 2            | `[27:12]`        |
//! | 3            | `[31:16]`        |
//!
//! Slicing truncates (drops the low bits) and saturates. Accumulation never
//! wraps: an out-of-range sum is an error.

use thiserror::Error;

use crate::energy::OpCounts;

/// Accumulator width in bits.
pub const ACC_BITS: u32 = 32;

const ACC_MIN: i64 = i32::MIN as i64;
const ACC_MAX: i64 = i32::MAX as i64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FxpError {
    #[error("accumulator overflow: {value} does not fit in {ACC_BITS} bits")]
    AccumulatorOverflow { value: i128 },
    #[error("operand formats differ: {left:?} vs {right:?}")]
    FormatMismatch { left: FxpFormat, right: FxpFormat },
    #[error("invalid fixed-point format: {0}")]
    InvalidFormat(String),
    #[error("raw value {raw} out of range for a {word_bits}-bit word")]
    OutOfRange { raw: i64, word_bits: u8 },
}

/// Storage word layout plus accumulator slice configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxpFormat {
    word_bits: u8,
    slice_select: u8,
    frac_bits: u8,
}

impl FxpFormat {
    /// 16-bit Q3.12 words with the `ACC[27:12]` slice; the training datapath.
    pub const Q3_12: FxpFormat = FxpFormat {
        word_bits: 16,
        slice_select: 2,
        frac_bits: 12,
    };

    /// 16-bit Q0.15 words; the layout of raw PRBS weight words.
    pub const Q0_15: FxpFormat = FxpFormat {
        word_bits: 16,
        slice_select: 2,
        frac_bits: 15,
    };

    pub fn new(word_bits: u8, slice_select: u8, frac_bits: u8) -> Result<Self, FxpError> {
        if !matches!(word_bits, 8 | 12 | 16) {
            return Err(FxpError::InvalidFormat(format!(
                "word_bits must be 8, 12 or 16, got {word_bits}"
            )));
        }
        if slice_select > 3 {
            return Err(FxpFormat::bad_slice(slice_select));
        }
        if frac_bits >= word_bits {
            return Err(FxpError::InvalidFormat(format!(
                "frac_bits {frac_bits} must be below word_bits {word_bits}"
            )));
        }
        Ok(Self {
            word_bits,
            slice_select,
            frac_bits,
        })
    }

    /// Q3.(w-4) layout for a `w`-bit datapath with the slice that maps a
    /// product of two such words back onto the same binary point.
    pub fn for_word_bits(word_bits: u8) -> Result<Self, FxpError> {
        if !matches!(word_bits, 8 | 12 | 16) {
            return Err(FxpError::InvalidFormat(format!(
                "word_bits must be 8, 12 or 16, got {word_bits}"
            )));
        }
        Self::new(word_bits, (word_bits - 8) / 4, word_bits - 4)
    }

    fn bad_slice(s: u8) -> FxpError {
        FxpError::InvalidFormat(format!("slice_select must be in 0..=3, got {s}"))
    }

    pub fn word_bits(&self) -> u8 {
        self.word_bits
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    pub fn slice_select(&self) -> u8 {
        self.slice_select
    }

    pub fn acc_bits(&self) -> u32 {
        ACC_BITS
    }

    /// Position of the least significant accumulator bit kept by `slice`.
    pub fn slice_shift(&self) -> u32 {
        4 + 4 * u32::from(self.slice_select)
    }

    pub fn word_min(&self) -> i64 {
        -(1i64 << (self.word_bits - 1))
    }

    pub fn word_max(&self) -> i64 {
        (1i64 << (self.word_bits - 1)) - 1
    }

    /// Weight of one least significant bit.
    pub fn lsb(&self) -> f64 {
        (-f64::from(self.frac_bits)).exp2()
    }

    fn clamp(&self, raw: i64) -> (i32, bool) {
        if raw > self.word_max() {
            (self.word_max() as i32, true)
        } else if raw < self.word_min() {
            (self.word_min() as i32, true)
        } else {
            (raw as i32, false)
        }
    }
}

impl Default for FxpFormat {
    fn default() -> Self {
        Self::Q3_12
    }
}

/// A signed storage word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxpValue {
    raw: i32,
    format: FxpFormat,
}

impl FxpValue {
    pub fn new(raw: i64, format: FxpFormat) -> Result<Self, FxpError> {
        if raw < format.word_min() || raw > format.word_max() {
            return Err(FxpError::OutOfRange {
                raw,
                word_bits: format.word_bits,
            });
        }
        Ok(Self {
            raw: raw as i32,
            format,
        })
    }

    pub fn zero(format: FxpFormat) -> Self {
        Self { raw: 0, format }
    }

    /// The value 1.0 (saturated for formats that cannot hold it).
    pub fn one(format: FxpFormat) -> Self {
        Self::saturating(1i64 << format.frac_bits, format).0
    }

    /// Clamps `raw` into the word range; the flag reports whether it had to.
    pub fn saturating(raw: i64, format: FxpFormat) -> (Self, bool) {
        let (raw, sat) = format.clamp(raw);
        (Self { raw, format }, sat)
    }

    pub fn raw(&self) -> i32 {
        self.raw
    }

    pub fn format(&self) -> FxpFormat {
        self.format
    }

    pub fn to_f64(&self) -> f64 {
        dequantize(*self)
    }

    /// Moves the value onto another binary point. Dropped bits are truncated
    /// (arithmetic shift), excess magnitude saturates.
    pub fn rescale(&self, to: FxpFormat) -> (Self, bool) {
        let from = i32::from(self.format.frac_bits);
        let dest = i32::from(to.frac_bits);
        let raw = i64::from(self.raw);
        let shifted = if dest >= from {
            raw << (dest - from)
        } else {
            raw >> (from - dest)
        };
        Self::saturating(shifted, to)
    }

    pub fn saturating_add(self, other: Self) -> Result<(Self, bool), FxpError> {
        same_format(self.format, other.format)?;
        Ok(Self::saturating(
            i64::from(self.raw) + i64::from(other.raw),
            self.format,
        ))
    }

    pub fn saturating_sub(self, other: Self) -> Result<(Self, bool), FxpError> {
        same_format(self.format, other.format)?;
        Ok(Self::saturating(
            i64::from(self.raw) - i64::from(other.raw),
            self.format,
        ))
    }
}

fn same_format(left: FxpFormat, right: FxpFormat) -> Result<(), FxpError> {
    if left == right {
        Ok(())
    } else {
        Err(FxpError::FormatMismatch { left, right })
    }
}

/// 32-bit signed accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    raw: i64,
    format: FxpFormat,
}

impl Accumulator {
    pub fn zero(format: FxpFormat) -> Self {
        Self { raw: 0, format }
    }

    pub fn from_raw(raw: i64, format: FxpFormat) -> Result<Self, FxpError> {
        check_acc(i128::from(raw))?;
        Ok(Self { raw, format })
    }

    /// Loads `v` at the slice position, so that slicing the untouched
    /// accumulator returns `v`.
    pub fn preload(v: FxpValue) -> Result<Self, FxpError> {
        let raw = i128::from(v.raw) << v.format.slice_shift();
        check_acc(raw)?;
        Ok(Self {
            raw: raw as i64,
            format: v.format,
        })
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn format(&self) -> FxpFormat {
        self.format
    }

    /// `acc + a * b`.
    pub fn mac(self, a: FxpValue, b: FxpValue) -> Result<Self, FxpError> {
        same_format(self.format, a.format)?;
        same_format(a.format, b.format)?;
        let sum = i128::from(self.raw) + i128::from(a.raw) * i128::from(b.raw);
        check_acc(sum)?;
        Ok(Self {
            raw: sum as i64,
            format: self.format,
        })
    }

    /// `acc - a * b`.
    pub fn msub(self, a: FxpValue, b: FxpValue) -> Result<Self, FxpError> {
        same_format(self.format, a.format)?;
        same_format(a.format, b.format)?;
        let sum = i128::from(self.raw) - i128::from(a.raw) * i128::from(b.raw);
        check_acc(sum)?;
        Ok(Self {
            raw: sum as i64,
            format: self.format,
        })
    }

    /// Adds a raw accumulator-scale constant.
    pub fn add_raw(self, delta: i64) -> Result<Self, FxpError> {
        let sum = i128::from(self.raw) + i128::from(delta);
        check_acc(sum)?;
        Ok(Self {
            raw: sum as i64,
            format: self.format,
        })
    }

    /// Selects the configured 16-bit window, then clamps to the word range.
    /// Returns the sliced word and whether saturation occurred.
    pub fn slice(self) -> (FxpValue, bool) {
        let window = self.raw >> self.format.slice_shift();
        let (w16, sat16) = if window > i64::from(i16::MAX) {
            (i64::from(i16::MAX), true)
        } else if window < i64::from(i16::MIN) {
            (i64::from(i16::MIN), true)
        } else {
            (window, false)
        };
        let (v, sat_word) = FxpValue::saturating(w16, self.format);
        (v, sat16 || sat_word)
    }

    /// Real value of the accumulator, whose binary point sits at twice the
    /// word fraction.
    pub fn to_f64(&self) -> f64 {
        self.raw as f64 * (-2.0 * f64::from(self.format.frac_bits)).exp2()
    }
}

fn check_acc(value: i128) -> Result<(), FxpError> {
    if value < i128::from(ACC_MIN) || value > i128::from(ACC_MAX) {
        Err(FxpError::AccumulatorOverflow { value })
    } else {
        Ok(())
    }
}

/// Rounds `x * 2^frac_bits` to nearest (ties to even) and saturates.
/// NaN maps to zero and reports saturation.
pub fn quantize(x: f64, format: FxpFormat) -> (FxpValue, bool) {
    if x.is_nan() {
        return (FxpValue::zero(format), true);
    }
    let scaled = (x * f64::from(format.frac_bits).exp2()).round_ties_even();
    if scaled > format.word_max() as f64 {
        (FxpValue::saturating(format.word_max(), format).0, true)
    } else if scaled < format.word_min() as f64 {
        (FxpValue::saturating(format.word_min(), format).0, true)
    } else {
        FxpValue::saturating(scaled as i64, format)
    }
}

pub fn dequantize(v: FxpValue) -> f64 {
    f64::from(v.raw) * v.format.lsb()
}

/// Arithmetic context: a format, operation counters and a sticky
/// saturation flag.
#[derive(Debug, Clone, Default)]
pub struct Datapath {
    format: FxpFormat,
    pub ops: OpCounts,
    saturated: bool,
}

impl Datapath {
    pub fn new(format: FxpFormat) -> Self {
        Self {
            format,
            ops: OpCounts::default(),
            saturated: false,
        }
    }

    pub fn format(&self) -> FxpFormat {
        self.format
    }

    pub fn saturated(&self) -> bool {
        self.saturated
    }

    pub fn clear_saturation(&mut self) {
        self.saturated = false;
    }

    pub fn mac(&mut self, acc: Accumulator, a: FxpValue, b: FxpValue) -> Result<Accumulator, FxpError> {
        self.ops.mac += 1;
        acc.mac(a, b)
    }

    pub fn msub(&mut self, acc: Accumulator, a: FxpValue, b: FxpValue) -> Result<Accumulator, FxpError> {
        self.ops.mac += 1;
        acc.msub(a, b)
    }

    /// Multiply-accumulate over paired operands, ascending index order.
    pub fn dot<'a, I>(&mut self, mut acc: Accumulator, pairs: I) -> Result<Accumulator, FxpError>
    where
        I: IntoIterator<Item = (&'a FxpValue, &'a FxpValue)>,
    {
        for (a, b) in pairs {
            acc = self.mac(acc, *a, *b)?;
        }
        Ok(acc)
    }

    pub fn slice(&mut self, acc: Accumulator) -> FxpValue {
        let (v, sat) = acc.slice();
        self.saturated |= sat;
        v
    }

    pub fn quantize(&mut self, x: f64) -> FxpValue {
        let (v, sat) = quantize(x, self.format);
        self.saturated |= sat;
        v
    }

    pub fn rescale(&mut self, v: FxpValue) -> FxpValue {
        let (v, sat) = v.rescale(self.format);
        self.saturated |= sat;
        v
    }

    pub fn add(&mut self, a: FxpValue, b: FxpValue) -> Result<FxpValue, FxpError> {
        let (v, sat) = a.saturating_add(b)?;
        self.saturated |= sat;
        Ok(v)
    }

    pub fn sub(&mut self, a: FxpValue, b: FxpValue) -> Result<FxpValue, FxpError> {
        let (v, sat) = a.saturating_sub(b)?;
        self.saturated |= sat;
        Ok(v)
    }
}
