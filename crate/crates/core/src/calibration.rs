//! Alarm thresholds `Thr = mu + 0.1 k sigma` over healthy reconstruction
//! errors, and the leave-one-out sweep that picks `k`.
//!
//! Statistics are taken on the error norm `e`; detectors compare squared
//! scores against `Thr^2`.

use std::io::Write;

use thiserror::Error;

use crate::energy::OpCounts;
use crate::ensemble::{replay, Ensemble, EnsembleError, Policy};
use crate::features::FeatureVector;
use crate::ingest::RunLabel;

pub const K_MIN: u32 = 10;
pub const K_MAX: u32 = 100;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least 2 error samples, got {0}")]
    InsufficientData(usize),
    #[error("k = {0} outside {K_MIN}..={K_MAX}")]
    InvalidK(u32),
    #[error("leave-one-out needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("k grid is empty")]
    EmptyGrid,
    #[error("runs disagree on ensemble size")]
    InconsistentRuns,
    #[error("no k in the grid reaches FP = FN = 0 (best k = {})", .0.k_star)]
    NoZeroErrorRegion(Box<ValidationReport>),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Population mean and standard deviation of healthy errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mu: f64,
    pub sigma: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn fit(errors: &[f64]) -> Result<Self, CalibrationError> {
        if errors.len() < 2 {
            return Err(CalibrationError::InsufficientData(errors.len()));
        }
        let n = errors.len() as f64;
        let mu = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n;
        Ok(Self {
            mu,
            sigma: var.sqrt(),
            count: errors.len(),
        })
    }

    pub fn threshold(&self, k: u32) -> Result<ThresholdModel, CalibrationError> {
        check_k(k)?;
        Ok(ThresholdModel {
            mu_e: self.mu,
            sigma_e: self.sigma,
            k,
            thr: self.mu + 0.1 * f64::from(k) * self.sigma,
        })
    }
}

fn check_k(k: u32) -> Result<(), CalibrationError> {
    if (K_MIN..=K_MAX).contains(&k) {
        Ok(())
    } else {
        Err(CalibrationError::InvalidK(k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdModel {
    pub mu_e: f64,
    pub sigma_e: f64,
    pub k: u32,
    pub thr: f64,
}

impl ThresholdModel {
    /// Threshold on the squared-score scale.
    pub fn squared(&self) -> f64 {
        self.thr * self.thr
    }
}

pub fn fit_threshold(errors: &[f64], k: u32) -> Result<ThresholdModel, CalibrationError> {
    ErrorStats::fit(errors)?.threshold(k)
}

/// Error norms `e` of every learner on every sample, `[learner][sample]`.
pub fn healthy_errors(ensemble: &Ensemble, healthy: &[FeatureVector]) -> Result<Vec<Vec<f64>>, CalibrationError> {
    let mut ops = OpCounts::default();
    let mut out = vec![Vec::with_capacity(healthy.len()); ensemble.size()];
    for x in healthy {
        for (i, s) in ensemble.scores(x, &mut ops)?.into_iter().enumerate() {
            out[i].push(s.sqrt());
        }
    }
    Ok(out)
}

/// Gives each learner its own threshold from its own healthy errors and
/// the shared `k`.
pub fn per_learner_thresholds(
    ensemble: &mut Ensemble,
    healthy: &[FeatureVector],
    k: u32,
) -> Result<Vec<ThresholdModel>, CalibrationError> {
    let errors = healthy_errors(ensemble, healthy)?;
    let models = errors
        .iter()
        .map(|e| fit_threshold(e, k))
        .collect::<Result<Vec<_>, _>>()?;
    for (l, m) in ensemble.learners_mut().iter_mut().zip(&models) {
        l.set_threshold(Some(m.squared()));
    }
    Ok(models)
}

/// Cached scores of one run under its own detector.
#[derive(Debug, Clone, PartialEq)]
pub struct RunScores {
    pub id: String,
    pub label: RunLabel,
    /// `e` on the training window, `[learner][sample]`.
    pub healthy_errors: Vec<Vec<f64>>,
    /// `e^2` after the training window, `[sample][learner]`.
    pub test_scores: Vec<Vec<f64>>,
}

impl RunScores {
    /// Trains nothing: scores an already trained ensemble on a run split at
    /// `window`.
    pub fn collect(
        id: &str,
        label: RunLabel,
        ensemble: &Ensemble,
        samples: &[FeatureVector],
        window: usize,
    ) -> Result<Self, CalibrationError> {
        let window = window.min(samples.len());
        let healthy_errors = healthy_errors(ensemble, &samples[..window])?;
        let mut ops = OpCounts::default();
        let test_scores = samples[window..]
            .iter()
            .map(|x| ensemble.scores(x, &mut ops))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            id: id.to_string(),
            label,
            healthy_errors,
            test_scores,
        })
    }

    pub fn ensemble_size(&self) -> usize {
        self.healthy_errors.len()
    }
}

/// Per-fold outcome across the k grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub run_id: String,
    pub label: RunLabel,
    pub detected: Vec<bool>,
    pub fp: Vec<u32>,
    pub fn_: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub k_grid: Vec<u32>,
    pub folds: Vec<FoldResult>,
    pub total_fp: Vec<u32>,
    pub total_fn: Vec<u32>,
    /// Widest run of grid points with zero FP and FN, as `(k_lo, k_hi)`.
    pub plateau: Option<(u32, u32)>,
    pub k_star: u32,
    /// True when no grid point is error free and `k_star` is only the best
    /// trade-off.
    pub flagged: bool,
}

impl ValidationReport {
    pub fn errors_at(&self, k: u32) -> Option<(u32, u32)> {
        let i = self.k_grid.iter().position(|&g| g == k)?;
        Some((self.total_fp[i], self.total_fn[i]))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,fold,FP,FN")?;
        for (i, k) in self.k_grid.iter().enumerate() {
            for f in &self.folds {
                writeln!(out, "{k},{},{},{}", f.run_id, f.fp[i], f.fn_[i])?;
            }
        }
        let plateau = match self.plateau {
            Some((lo, hi)) => format!("{lo}..{hi}"),
            None => "none".into(),
        };
        writeln!(
            out,
            "# k*={} plateau={plateau} flagged={}",
            self.k_star, self.flagged
        )
    }
}

pub fn default_k_grid() -> Vec<u32> {
    (K_MIN..=K_MAX).collect()
}

/// Leave-one-out sweep over cached run scores. For each held-out run, each
/// learner's healthy errors from all other runs are pooled into `(mu, sigma)`,
/// and the held-out run's own scores are replayed under the resulting
/// thresholds.
pub fn loo_sweep(
    runs: &[RunScores],
    k_grid: &[u32],
    policy: Policy,
    debounce: usize,
) -> Result<ValidationReport, CalibrationError> {
    if runs.len() < 2 {
        return Err(CalibrationError::TooFewRuns(runs.len()));
    }
    if k_grid.is_empty() {
        return Err(CalibrationError::EmptyGrid);
    }
    for &k in k_grid {
        check_k(k)?;
    }
    let k_size = runs[0].ensemble_size();
    if runs.iter().any(|r| r.ensemble_size() != k_size) {
        return Err(CalibrationError::InconsistentRuns);
    }

    let mut folds = Vec::with_capacity(runs.len());
    for (held, run) in runs.iter().enumerate() {
        let stats = (0..k_size)
            .map(|i| {
                let pooled: Vec<f64> = runs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != held)
                    .flat_map(|(_, r)| r.healthy_errors[i].iter().copied())
                    .collect();
                ErrorStats::fit(&pooled)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut fold = FoldResult {
            run_id: run.id.clone(),
            label: run.label,
            detected: Vec::with_capacity(k_grid.len()),
            fp: Vec::with_capacity(k_grid.len()),
            fn_: Vec::with_capacity(k_grid.len()),
        };
        for &k in k_grid {
            let th = stats
                .iter()
                .map(|s| s.threshold(k).map(|t| t.squared()))
                .collect::<Result<Vec<_>, _>>()?;
            let detected = replay(&run.test_scores, &th, policy, debounce)
                .fault_position
                .is_some();
            fold.detected.push(detected);
            fold.fp.push(u32::from(run.label == RunLabel::Failed && !detected));
            fold.fn_.push(u32::from(run.label == RunLabel::Survived && detected));
        }
        folds.push(fold);
    }

    let total_fp: Vec<u32> = (0..k_grid.len()).map(|i| folds.iter().map(|f| f.fp[i]).sum()).collect();
    let total_fn: Vec<u32> = (0..k_grid.len()).map(|i| folds.iter().map(|f| f.fn_[i]).sum()).collect();
    let (plateau, k_star, flagged) = choose_k(k_grid, &total_fp, &total_fn);
    let report = ValidationReport {
        k_grid: k_grid.to_vec(),
        folds,
        total_fp,
        total_fn,
        plateau,
        k_star,
        flagged,
    };
    if flagged {
        Err(CalibrationError::NoZeroErrorRegion(Box::new(report)))
    } else {
        Ok(report)
    }
}

/// Midpoint of the widest zero-error run of grid points (earliest on ties);
/// otherwise the first grid point with the fewest errors, flagged.
pub fn choose_k(grid: &[u32], fp: &[u32], fn_: &[u32]) -> (Option<(u32, u32)>, u32, bool) {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for i in 0..=grid.len() {
        let zero = i < grid.len() && fp[i] == 0 && fn_[i] == 0;
        match (zero, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|(bs, be)| i - s > be - bs + 1) {
                    best = Some((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    match best {
        Some((lo, hi)) => (Some((grid[lo], grid[hi])), grid[(lo + hi) / 2], false),
        None => {
            let idx = (0..grid.len())
                .min_by_key(|&i| (fp[i] + fn_[i], i))
                .expect("non-empty grid");
            (None, grid[idx], true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_examples() {
        let t = fit_threshold(&[3.0, 3.0, 3.0], 70).unwrap();
        assert_eq!((t.mu_e, t.sigma_e, t.thr), (3.0, 0.0, 3.0));
        // mu = 10, sigma = 2
        let errs = [8.0, 12.0];
        let t = fit_threshold(&errs, 50).unwrap();
        assert_eq!((t.mu_e, t.sigma_e), (10.0, 2.0));
        assert_eq!(t.thr, 10.0 + 0.1 * 50.0 * 2.0);
        assert_eq!(t.thr, 20.0);
        let lo = fit_threshold(&errs, 10).unwrap();
        let hi = fit_threshold(&errs, 100).unwrap();
        assert!((hi.thr - lo.thr - 9.0 * 2.0).abs() < 1e-12);
        assert_eq!(t.squared(), 400.0);
    }

    #[test]
    fn threshold_errors() {
        assert!(matches!(fit_threshold(&[1.0], 50), Err(CalibrationError::InsufficientData(1))));
        assert!(matches!(fit_threshold(&[1.0, 2.0], 9), Err(CalibrationError::InvalidK(9))));
        assert!(matches!(fit_threshold(&[1.0, 2.0], 101), Err(CalibrationError::InvalidK(101))));
    }

    #[test]
    fn plateau_choice() {
        let grid: Vec<u32> = (10..=20).collect();
        let fp = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        let fn_ = vec![2, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0];
        // zero at 12..=14 and 16..=17; widest is 12..=14
        assert_eq!(choose_k(&grid, &fp, &fn_), (Some((12, 14)), 13, false));
        let all_zero = vec![0; 11];
        assert_eq!(choose_k(&grid, &all_zero, &all_zero), (Some((10, 20)), 15, false));
        let ones = vec![1; 11];
        assert_eq!(choose_k(&grid, &ones, &all_zero), (None, 10, true));
    }

    fn separable_runs() -> Vec<RunScores> {
        // tight healthy cluster around e = 1; failing runs jump to e^2 = 1e6
        let healthy: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..50).map(|s| 1.0 + 0.01 * (((s * 7 + i) % 11) as f64 - 5.0)).collect())
            .collect();
        (0..6)
            .map(|r| {
                let failed = r < 2;
                let mut test = vec![vec![1.0; 3]; 40];
                if failed {
                    for row in test.iter_mut().skip(30) {
                        *row = vec![1e6; 3];
                    }
                }
                RunScores {
                    id: format!("r{r}"),
                    label: if failed { RunLabel::Failed } else { RunLabel::Survived },
                    healthy_errors: healthy.clone(),
                    test_scores: test,
                }
            })
            .collect()
    }

    #[test]
    fn separable_corpus_is_error_free_everywhere() {
        let runs = separable_runs();
        let grid = default_k_grid();
        let rep = loo_sweep(&runs, &grid, Policy::Adepos, 1).unwrap();
        assert_eq!(rep.plateau, Some((10, 100)));
        assert_eq!(rep.k_star, 55);
        let again = loo_sweep(&runs, &grid, Policy::Adepos, 1).unwrap();
        assert_eq!(rep, again);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("k,fold,FP,FN\n10,r0,0,0\n"));
        assert!(text.trim_end().ends_with("# k*=55 plateau=10..100 flagged=false"));
    }

    #[test]
    fn undetectable_fault_is_flagged() {
        let mut runs = separable_runs();
        runs[0].test_scores = vec![vec![1.0; 3]; 40];
        match loo_sweep(&runs, &default_k_grid(), Policy::Adepos, 1) {
            Err(CalibrationError::NoZeroErrorRegion(rep)) => {
                assert!(rep.flagged);
                assert!(rep.total_fp.iter().all(|&v| v == 1));
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn detections_shrink_as_k_grows(
            healthy in prop::collection::vec(0.5f64..1.5, 10..40),
            test in prop::collection::vec(prop::collection::vec(0.0f64..6.0, 3), 5..60),
            debounce in 1usize..3,
        ) {
            let runs: Vec<RunScores> = (0..3).map(|r| RunScores {
                id: format!("r{r}"),
                label: if r == 0 { RunLabel::Failed } else { RunLabel::Survived },
                healthy_errors: vec![healthy.clone(); 3],
                test_scores: test.clone(),
            }).collect();
            let grid = default_k_grid();
            let rep = match loo_sweep(&runs, &grid, Policy::Adepos, debounce) {
                Ok(r) => r,
                Err(CalibrationError::NoZeroErrorRegion(r)) => *r,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            for f in &rep.folds {
                for w in f.detected.windows(2) {
                    prop_assert!(w[0] || !w[1], "detection reappeared at larger k");
                }
                for w in f.fn_.windows(2) { prop_assert!(w[1] <= w[0]); }
                for w in f.fp.windows(2) { prop_assert!(w[1] >= w[0]); }
            }
        }
    }
}
