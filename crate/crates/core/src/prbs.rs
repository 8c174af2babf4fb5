//! Memory-free input weights from a 16-bit Fibonacci LFSR.
//!
//! The register shifts right; the feedback bit enters at bit 15. Taps are a
//! mask over register bits whose parity forms the feedback. The default mask
//! realizes `x^16 + x^14 + x^13 + x^11 + 1`, so the sequence obeys
//! `a[n+16] = a[n] ^ a[n+2] ^ a[n+3] ^ a[n+5]` and has period `2^16 - 1`.

use thiserror::Error;

use crate::fxp::{FxpFormat, FxpValue};
use crate::network::NetworkConfig;

/// Feedback mask for `x^16 + x^14 + x^13 + x^11 + 1` (register bits 0, 2, 3, 5).
pub const MAXIMAL_TAPS: u16 = 0b10_1101;

/// Human-readable polynomial, written into output metadata.
pub const POLYNOMIAL: &str = "x^16+x^14+x^13+x^11+1";

/// Layout of emitted weight words: the full 16-bit range read as Q0.15.
pub const WEIGHT_FORMAT: FxpFormat = FxpFormat::Q0_15;

/// Precision used for every draw during training.
pub const TRAINING_WEIGHT_BITS: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrbsError {
    #[error("LFSR seed/register must be nonzero")]
    ZeroState,
    #[error("weight_bits must be one of 2, 4, 6, 8; got {0}")]
    InvalidWeightBits(u8),
    #[error("tap mask must include bit 0, got {0:#06x}")]
    InvalidTaps(u16),
}

pub fn validate_weight_bits(bits: u8) -> Result<u8, PrbsError> {
    match bits {
        2 | 4 | 6 | 8 => Ok(bits),
        _ => Err(PrbsError::InvalidWeightBits(bits)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrbsState {
    register: u16,
    seed: u16,
    taps: u16,
    weight_bits: u8,
}

impl PrbsState {
    pub fn new(seed: u16, weight_bits: u8) -> Result<Self, PrbsError> {
        Self::with_taps(seed, MAXIMAL_TAPS, weight_bits)
    }

    pub fn with_taps(seed: u16, taps: u16, weight_bits: u8) -> Result<Self, PrbsError> {
        if seed == 0 {
            return Err(PrbsError::ZeroState);
        }
        // Bit 0 is the constant term; without it the register is not a
        // permutation of the nonzero states.
        if taps & 1 == 0 {
            return Err(PrbsError::InvalidTaps(taps));
        }
        Ok(Self {
            register: seed,
            seed,
            taps,
            weight_bits: validate_weight_bits(weight_bits)?,
        })
    }

    pub fn register(&self) -> u16 {
        self.register
    }

    pub fn seed(&self) -> u16 {
        self.seed
    }

    pub fn taps(&self) -> u16 {
        self.taps
    }

    pub fn weight_bits(&self) -> u8 {
        self.weight_bits
    }

    /// One shift; returns the bit shifted out of position 0.
    pub fn step_bit(&mut self) -> bool {
        let out = self.register & 1 == 1;
        let fb = (self.register & self.taps).count_ones() as u16 & 1;
        self.register = (self.register >> 1) | (fb << 15);
        out
    }

    /// Advances 16 steps and returns the new register as a signed word.
    pub fn next16(&mut self) -> i16 {
        // After 16 steps the register holds the 16 freshly generated
        // sequence bits. Generate them word-parallel: bit k of the next word
        // is the parity of sequence bits k + p over the taps p, and bits that
        // depend on freshly generated bits are filled in over later passes.
        let mut stream = u64::from(self.register);
        let max_tap = 15 - self.taps.leading_zeros();
        let mut known = 16u32;
        while known < 32 {
            let mut parity = 0u64;
            let mut t = self.taps;
            while t != 0 {
                let p = t.trailing_zeros();
                parity ^= stream >> p;
                t &= t - 1;
            }
            // new bit 16 + k reads stream bits up to k + max_tap
            let valid = (known - max_tap).min(16);
            let mask = ((1u64 << valid) - 1) << 16;
            stream = (stream & !mask) | ((parity << 16) & mask);
            known = 16 + valid;
        }
        self.register = (stream >> 16) as u16;
        self.register as i16
    }

    /// Next weight at the configured precision, left-aligned in Q0.15.
    pub fn draw_weight(&mut self) -> FxpValue {
        let bits = self.weight_bits;
        self.draw_with_bits(bits)
    }

    fn draw_with_bits(&mut self, bits: u8) -> FxpValue {
        let word = self.next16();
        let keep = !((1i32 << (16 - u32::from(bits))) - 1);
        FxpValue::saturating(i64::from(i32::from(word) & keep), WEIGHT_FORMAT).0
    }
}

/// First-layer weights of one learner, as raw Q0.15 PRBS words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputWeights {
    pub hidden: usize,
    pub inputs: usize,
    /// Row-major `L x d`.
    pub w: Vec<FxpValue>,
    pub b: Vec<FxpValue>,
}

impl InputWeights {
    pub fn w_at(&self, row: usize, col: usize) -> FxpValue {
        self.w[row * self.inputs + col]
    }

    /// Weights moved onto a datapath format.
    pub fn rescaled(&self, format: FxpFormat) -> (Vec<FxpValue>, Vec<FxpValue>) {
        let conv = |v: &FxpValue| v.rescale(format).0;
        (self.w.iter().map(conv).collect(), self.b.iter().map(conv).collect())
    }

    /// Real values of the weights as the 16-bit datapath sees them.
    pub fn to_f64(&self, format: FxpFormat) -> (Vec<f64>, Vec<f64>) {
        let (w, b) = self.rescaled(format);
        (
            w.iter().map(FxpValue::to_f64).collect(),
            b.iter().map(FxpValue::to_f64).collect(),
        )
    }
}

/// Draws `W` (row-major) then `b` from a fresh register.
pub fn weights_for(config: &NetworkConfig, seed: u16) -> Result<InputWeights, PrbsError> {
    weights_with_bits(config.inputs(), config.hidden(), seed, config.weight_bits())
}

pub fn weights_with_bits(
    inputs: usize,
    hidden: usize,
    seed: u16,
    weight_bits: u8,
) -> Result<InputWeights, PrbsError> {
    let mut state = PrbsState::new(seed, weight_bits)?;
    let w = (0..inputs * hidden).map(|_| state.draw_weight()).collect();
    let b = (0..hidden).map(|_| state.draw_weight()).collect();
    Ok(InputWeights {
        hidden,
        inputs,
        w,
        b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Mode;

    /// Bit-serial reference built directly on the recurrence
    /// `a[n+16] = a[n] ^ a[n+2] ^ a[n+3] ^ a[n+5]`, where the seed supplies
    /// `a[0..16]` least significant bit first.
    struct Oracle {
        bits: Vec<u8>,
    }

    impl Oracle {
        fn new(seed: u16) -> Self {
            Self {
                bits: (0..16).map(|i| ((seed >> i) & 1) as u8).collect(),
            }
        }

        fn word(&mut self) -> i16 {
            for _ in 0..16 {
                let n = self.bits.len() - 16;
                let b = self.bits[n] ^ self.bits[n + 2] ^ self.bits[n + 3] ^ self.bits[n + 5];
                self.bits.push(b);
            }
            let tail = &self.bits[self.bits.len() - 16..];
            let mut w = 0u16;
            for (i, &b) in tail.iter().enumerate() {
                w |= u16::from(b) << i;
            }
            w as i16
        }
    }

    #[test]
    fn first_word_matches_oracle() {
        let mut s = PrbsState::new(0x0001, 8).unwrap();
        assert_eq!(s.next16(), Oracle::new(0x0001).word());
    }

    #[test]
    fn long_run_matches_oracle() {
        for seed in [0x0001u16, 0xACE1, 0xFFFF, 0x8000] {
            let mut s = PrbsState::new(seed, 8).unwrap();
            let mut o = Oracle::new(seed);
            for _ in 0..2000 {
                assert_eq!(s.next16(), o.word());
            }
        }
    }

    #[test]
    fn word_parallel_equals_sixteen_bit_steps() {
        let mut fast = PrbsState::new(0x1D2B, 8).unwrap();
        let mut slow = fast;
        for _ in 0..500 {
            let w = fast.next16();
            for _ in 0..16 {
                slow.step_bit();
            }
            assert_eq!(w, slow.register() as i16);
        }
    }

    #[test]
    fn generic_taps_match_bit_serial() {
        // x^16 + x^15 + x^13 + x^4 + 1 in this register's orientation
        let taps = 0b1010_0000_0000_1001u16;
        let mut fast = PrbsState::with_taps(0x00F1, taps, 8).unwrap();
        let mut slow = fast;
        for _ in 0..200 {
            let w = fast.next16();
            for _ in 0..16 {
                slow.step_bit();
            }
            assert_eq!(w, slow.register() as i16);
        }
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let a = PrbsState::new(0x0001, 8).unwrap().next16();
        let b = PrbsState::new(0x0001, 8).unwrap().next16();
        assert_eq!(a, b);
        let c = PrbsState::new(0x0002, 8).unwrap().next16();
        assert_ne!(a, c);
        assert_ne!(Oracle::new(0x0001).word(), Oracle::new(0x0002).word());
    }

    #[test]
    fn period_is_maximal() {
        let start = PrbsState::new(0xACE1, 8).unwrap();
        let mut s = start;
        let mut steps = 0u32;
        loop {
            s.step_bit();
            steps += 1;
            if s.register() == start.register() {
                break;
            }
        }
        assert_eq!(steps, 65_535);
    }

    #[test]
    fn construction_errors() {
        assert_eq!(PrbsState::new(0, 8), Err(PrbsError::ZeroState));
        assert_eq!(PrbsState::new(1, 5), Err(PrbsError::InvalidWeightBits(5)));
        assert!(PrbsState::with_taps(1, 0b10, 8).is_err());
    }

    #[test]
    fn two_bit_weights_land_on_grid() {
        let mut s = PrbsState::new(0x5A6E, 2).unwrap();
        for _ in 0..1000 {
            let r = s.draw_weight().raw();
            assert!([-32768, -16384, 0, 16384].contains(&r), "{r}");
        }
    }

    #[test]
    fn eight_bit_truncation_left_aligns() {
        // find a state whose next word is 0x7FFF by brute force over seeds
        let mut s = PrbsState::new(1, 8).unwrap();
        let target = (0..70_000)
            .find_map(|_| {
                let before = s;
                let w = s.next16();
                (w == 0x7FFF).then_some(before)
            })
            .expect("0x7FFF occurs in a maximal sequence");
        let mut t = target;
        assert_eq!(t.draw_weight().raw(), 0x7F00);
    }

    #[test]
    fn weight_matrix_regenerates_exactly() {
        let cfg = NetworkConfig::new(16, 32, Mode::Reconstruction).unwrap();
        let first = weights_for(&cfg, 0xACE1).unwrap();
        let second = weights_for(&cfg, 0xACE1).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.w.len(), 512);
        assert_eq!(first.b.len(), 32);
    }

    #[test]
    fn draw_order_is_w_then_b() {
        let cfg = NetworkConfig::new(1, 1, Mode::Boundary).unwrap();
        let wb = weights_for(&cfg, 0x0001).unwrap();
        let mut s = PrbsState::new(0x0001, 8).unwrap();
        assert_eq!(wb.w[0], s.draw_weight());
        assert_eq!(wb.b[0], s.draw_weight());
    }

    #[test]
    fn distinct_seeds_give_distinct_layers() {
        let a = weights_with_bits(16, 32, 0xACE1, 8).unwrap();
        let b = weights_with_bits(16, 32, 0x1D2B, 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mean_matches_uniform_grid_model() {
        // 8-bit left-aligned words: uniform over k * 256, k in -128..=127
        let n = 10_000usize;
        let mut s = PrbsState::new(0x3C4F, 8).unwrap();
        let sum: f64 = (0..n).map(|_| f64::from(s.draw_weight().raw())).sum();
        let mean = sum / n as f64;
        let grid: Vec<f64> = (-128..128).map(|k| f64::from(k * 256)).collect();
        let mu = grid.iter().sum::<f64>() / grid.len() as f64;
        let var = grid.iter().map(|g| (g - mu).powi(2)).sum::<f64>() / grid.len() as f64;
        let tol = 3.0 * var.sqrt() / (n as f64).sqrt();
        assert!((mean - mu).abs() < tol, "mean {mean} model {mu} tol {tol}");
    }
}
