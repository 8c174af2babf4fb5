//! Online sequential ELM (float reference).
//!
//! ```text
//! K    = K + h h^T
//! E    = target - beta^T h
//! beta = beta + K^-1 h E^T
//! ```
//!
//! `K^-1` is formed explicitly through an LU decomposition with partial
//! pivoting, one of the costs that makes this rule cubic in `L`.

use nalgebra::{DMatrix, DVector};

use super::TrainingError;
use crate::energy::OpCounts;

#[derive(Debug, Clone, PartialEq)]
pub struct Oselm {
    beta: DMatrix<f64>,
    k: DMatrix<f64>,
    c: f64,
    samples_seen: u64,
}

impl Oselm {
    /// `K_0 = I / c`, the initialization under which OSELM and OPIUM with
    /// `theta_0 = c I` solve the same regularized problem.
    pub fn new(hidden: usize, outputs: usize, c: f64) -> Result<Self, TrainingError> {
        if !(c.is_finite() && c > 0.0) {
            return Err(TrainingError::InvalidConfig(format!(
                "regularization must be positive and finite, got {c}"
            )));
        }
        Ok(Self {
            beta: DMatrix::zeros(hidden, outputs),
            k: DMatrix::identity(hidden, hidden) / c,
            c,
            samples_seen: 0,
        })
    }

    pub fn from_parts(beta: DMatrix<f64>, k: DMatrix<f64>, c: f64, samples_seen: u64) -> Self {
        Self {
            beta,
            k,
            c,
            samples_seen,
        }
    }

    pub fn theta_init(&self) -> f64 {
        self.c
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    /// Words held while an update runs: `K`, its LU factors, `K^-1`, `beta`,
    /// the correction `K^-1 h E^T`, `h`, `K^-1 h` and `E`.
    pub fn workspace_words(&self) -> usize {
        let l = self.beta.nrows();
        let m = self.beta.ncols();
        3 * l * l + 2 * l * m + 2 * l + m
    }

    pub fn update(&mut self, h: &[f64], target: &[f64], ops: &mut OpCounts) -> Result<(), TrainingError> {
        let l = self.beta.nrows();
        let m = self.beta.ncols();
        super::check_len("hidden vector", l, h.len())?;
        super::check_len("target vector", m, target.len())?;
        let h = DVector::from_column_slice(h);

        self.k += &h * h.transpose();
        ops.mac += (l * l) as u64;

        let inv = lu_inverse(&self.k, ops)?;
        let gain = &inv * &h;
        ops.mac += (l * l) as u64;

        let err = DVector::from_column_slice(target) - self.beta.tr_mul(&h);
        self.beta += gain * err.transpose();
        ops.mac += 2 * (l * m) as u64;
        self.samples_seen += 1;
        Ok(())
    }
}

/// Inverse by Doolittle LU with partial pivoting followed by one forward and
/// one back substitution per unit vector. Multiplies and divides are counted.
pub fn lu_inverse(a: &DMatrix<f64>, ops: &mut OpCounts) -> Result<DMatrix<f64>, TrainingError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(TrainingError::SingularSystem);
    }
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.amax().max(f64::MIN_POSITIVE);

    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, lu[(r, col)].abs()))
            .fold((col, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        if pivot <= scale * 1e-14 {
            return Err(TrainingError::SingularSystem);
        }
        if pivot_row != col {
            lu.swap_rows(pivot_row, col);
            perm.swap(pivot_row, col);
        }
        let p = lu[(col, col)];
        for r in col + 1..n {
            let f = lu[(r, col)] / p;
            ops.divide += 1;
            lu[(r, col)] = f;
            for c in col + 1..n {
                lu[(r, c)] -= f * lu[(col, c)];
            }
            ops.mac += (n - col - 1) as u64;
        }
    }

    let mut inv = DMatrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for e in 0..n {
        // forward: L y = P e_e, unit diagonal
        for r in 0..n {
            let mut acc = if perm[r] == e { 1.0 } else { 0.0 };
            for c in 0..r {
                acc -= lu[(r, c)] * y[c];
            }
            ops.mac += r as u64;
            y[r] = acc;
        }
        // back: U x = y
        for r in (0..n).rev() {
            let mut acc = y[r];
            for c in r + 1..n {
                acc -= lu[(r, c)] * inv[(c, e)];
            }
            ops.mac += (n - r - 1) as u64;
            inv[(r, e)] = acc / lu[(r, r)];
            ops.divide += 1;
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::opium::FloatOpium;
    use crate::training::pinv::batch_pinv;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_example() {
        let mut s = Oselm::from_parts(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0), 1.0, 0);
        let mut ops = OpCounts::default();
        s.update(&[1.0], &[2.0], &mut ops).unwrap();
        assert_eq!(s.k()[(0, 0)], 2.0);
        assert_eq!(s.beta()[(0, 0)], 1.0);
    }

    #[test]
    fn zero_innovation_keeps_beta() {
        let beta = DMatrix::from_row_slice(2, 1, &[0.5, -0.25]);
        let mut s = Oselm::from_parts(beta.clone(), DMatrix::identity(2, 2), 1.0, 0);
        let mut ops = OpCounts::default();
        let y = 0.5 * 0.4 - 0.25 * 0.8;
        s.update(&[0.4, 0.8], &[y], &mut ops).unwrap();
        assert!((s.beta() - beta).norm() < 1e-15);
    }

    #[test]
    fn lu_inverse_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [1, 2, 5, 17] {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(n, n) * 0.5;
            let mut ops = OpCounts::default();
            let ours = lu_inverse(&a, &mut ops).unwrap();
            let theirs = a.clone().try_inverse().unwrap();
            assert!((ours - theirs).amax() < 1e-9);
        }
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(
            lu_inverse(&singular, &mut OpCounts::default()),
            Err(TrainingError::SingularSystem)
        );
    }

    #[test]
    fn converges_to_pinv() {
        let (l, m, n) = (6, 2, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = DMatrix::from_fn(n, l, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let mut s = Oselm::new(l, m, 1e9).unwrap();
        let mut ops = OpCounts::default();
        for i in 0..n {
            let hi: Vec<f64> = h.row(i).iter().copied().collect();
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            s.update(&hi, &xi, &mut ops).unwrap();
        }
        let star = batch_pinv(&h, &x);
        assert!((s.beta() - &star).norm() / star.norm() < 1e-6);
    }

    #[test]
    fn agrees_with_opium_under_matched_initialization() {
        let (l, m, n) = (10, 3, 80);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut a = Oselm::new(l, m, 10.0).unwrap();
        let mut b = FloatOpium::new(l, m, 10.0, false).unwrap();
        let mut ops = OpCounts::default();
        for _ in 0..n {
            let h: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
            let t: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            a.update(&h, &t, &mut ops).unwrap();
            b.update(&h, &t, &mut ops).unwrap();
        }
        assert!((a.beta() - b.beta()).norm() / b.beta().norm() < 1e-9);
    }

    #[test]
    fn workspace_is_three_times_opium_state_for_one_output() {
        for l in [4, 8, 16, 32] {
            let s = Oselm::new(l, 1, 1.0).unwrap();
            let opium_state = l * l + l;
            assert!(s.workspace_words() >= 3 * opium_state);
        }
    }
}
