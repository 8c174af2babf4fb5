//! Operation counting and the calibrated energy model.
//!
//! Energy is an affine function of counted work: every vote with `N` active
//! learners costs `e_shared + N * e_bl` picojoules, where `e_bl` is the
//! measured inference figure (pJ/OP) times the operations of one learner
//! inference. Normalized efficiency divides the lifetime energy by the
//! operation count of running all `K` learners on every sample.

use std::io::Write;
use std::ops::{Add, AddAssign};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("timeline contains no samples")]
    EmptyTimeline,
    #[error("training tallies cover different streams ({opium} vs {lite} samples)")]
    MismatchedStreams { opium: u64, lite: u64 },
    #[error("unknown operating point {0:?}")]
    UnknownOperatingPoint(String),
    #[error("operating point {point} has no {what} calibration")]
    MissingCalibration { point: &'static str, what: &'static str },
    #[error("active learner count {n} outside 1..={k}")]
    BadLearnerCount { n: usize, k: usize },
    #[error("ledgers use different calibrations")]
    CalibrationMismatch,
    #[error("{evaluations} evaluations cannot end in a vote at N = {n}")]
    BadLadder { n: usize, evaluations: u64 },
}

/// Additive counters fed by the datapath.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub mac: u64,
    pub activation: u64,
    pub divide: u64,
    /// θ words written by the learning rule.
    pub theta_update: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.mac + self.activation + self.divide
    }
}

impl Add for OpCounts {
    type Output = OpCounts;

    fn add(mut self, rhs: OpCounts) -> OpCounts {
        self += rhs;
        self
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: OpCounts) {
        self.mac += rhs.mac;
        self.activation += rhs.activation;
        self.divide += rhs.divide;
        self.theta_update += rhs.theta_update;
    }
}

/// Measured silicon figures for one supply/clock setting (pJ/OP).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub name: &'static str,
    pub vdd: f64,
    pub freq_mhz: f64,
    pub infer_pj_per_op: Option<f64>,
    pub train_opium_pj_per_op: Option<f64>,
    pub train_lite_pj_per_op: Option<f64>,
}

/// Default calibration point.
pub const REFERENCE_POINT: &str = "0.75V/10MHz";

/// Built-in calibration table.
///
/// Measured anchors: inference 3.35 (0.75V/10MHz), 4.83 (0.9V/50MHz),
/// 8.28 (1.2V/50MHz); training 11.87 / 8.12 (0.75V/10MHz).
/// Derived rows: inference at 1.2V/10MHz is 3.35 * 18.5 / 6.96; OPIUM
/// training at 1.2V/10MHz is 3.6 * 8.12. The 0.9V and 1.05V training rows
/// interpolate OPIUM energy linearly in Vdd^2 and the OPIUM-Lite saving
/// linearly in Vdd, pinned so that the table-wide mean saving is 42.8%.
pub const OPERATING_POINTS: &[OperatingPoint] = &[
    OperatingPoint {
        name: "0.75V/10MHz",
        vdd: 0.75,
        freq_mhz: 10.0,
        infer_pj_per_op: Some(3.35),
        train_opium_pj_per_op: Some(11.87),
        train_lite_pj_per_op: Some(8.12),
    },
    OperatingPoint {
        name: "0.9V/10MHz",
        vdd: 0.9,
        freq_mhz: 10.0,
        infer_pj_per_op: None,
        train_opium_pj_per_op: Some(16.767),
        train_lite_pj_per_op: Some(10.217),
    },
    OperatingPoint {
        name: "1.05V/10MHz",
        vdd: 1.05,
        freq_mhz: 10.0,
        infer_pj_per_op: None,
        train_opium_pj_per_op: Some(22.554),
        train_lite_pj_per_op: Some(12.058),
    },
    OperatingPoint {
        name: "1.2V/10MHz",
        vdd: 1.2,
        freq_mhz: 10.0,
        infer_pj_per_op: Some(8.904),
        train_opium_pj_per_op: Some(29.232),
        train_lite_pj_per_op: Some(13.444),
    },
    OperatingPoint {
        name: "0.9V/50MHz",
        vdd: 0.9,
        freq_mhz: 50.0,
        infer_pj_per_op: Some(4.83),
        train_opium_pj_per_op: None,
        train_lite_pj_per_op: None,
    },
    OperatingPoint {
        name: "1.2V/50MHz",
        vdd: 1.2,
        freq_mhz: 50.0,
        infer_pj_per_op: Some(8.28),
        train_opium_pj_per_op: None,
        train_lite_pj_per_op: None,
    },
];

pub fn operating_point(name: &str) -> Result<&'static OperatingPoint, EnergyError> {
    OPERATING_POINTS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| EnergyError::UnknownOperatingPoint(name.to_string()))
}

/// Per-event energies derived from an operating point and a network shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyCalibration {
    pub point: &'static str,
    /// pJ per single-learner inference.
    pub e_bl_infer: f64,
    /// pJ per vote independent of the active count.
    pub e_shared_infer: f64,
    /// pJ/OP of the two training rules (normalized to OPIUM's op count).
    pub e_train_opium: Option<f64>,
    pub e_train_lite: Option<f64>,
    /// Operations of one single-learner inference.
    pub ops_per_bl: u64,
    /// Operations of one full-ensemble inference.
    pub op_norm: u64,
    pub ensemble_size: usize,
}

impl EnergyCalibration {
    pub fn new(
        point: &'static OperatingPoint,
        ops_per_bl: u64,
        ensemble_size: usize,
    ) -> Result<Self, EnergyError> {
        let pj = point.infer_pj_per_op.ok_or(EnergyError::MissingCalibration {
            point: point.name,
            what: "inference",
        })?;
        Ok(Self {
            point: point.name,
            e_bl_infer: pj * ops_per_bl as f64,
            e_shared_infer: 0.0,
            e_train_opium: point.train_opium_pj_per_op,
            e_train_lite: point.train_lite_pj_per_op,
            ops_per_bl,
            op_norm: ops_per_bl * ensemble_size as u64,
            ensemble_size,
        })
    }

    /// The measured all-learners figure this calibration reproduces.
    pub fn full_ensemble_pj_per_op(&self) -> f64 {
        (self.e_shared_infer + self.ensemble_size as f64 * self.e_bl_infer) / self.op_norm as f64
    }

    /// `E(N)` for one vote.
    pub fn vote_energy(&self, active: usize) -> f64 {
        self.e_shared_infer + active as f64 * self.e_bl_infer
    }
}

/// Votes cast at each active-learner count, plus the sample count.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoteTally {
    votes: Vec<u64>,
    samples: u64,
}

impl VoteTally {
    pub fn new(ensemble_size: usize) -> Self {
        Self {
            votes: vec![0; ensemble_size + 1],
            samples: 0,
        }
    }

    pub fn ensemble_size(&self) -> usize {
        self.votes.len().saturating_sub(1)
    }

    pub fn record_vote(&mut self, active: usize) {
        if active >= self.votes.len() {
            self.votes.resize(active + 1, 0);
        }
        self.votes[active] += 1;
    }

    pub fn record_sample(&mut self) {
        self.samples += 1;
    }

    /// Records one sample whose votes escalated by 2 up to a final vote at
    /// `final_n`, costing `evaluations` learner evaluations in total.
    pub fn record_ladder(&mut self, final_n: usize, evaluations: u64) -> Result<(), EnergyError> {
        let bad = EnergyError::BadLadder { n: final_n, evaluations };
        let mut rest = evaluations;
        let mut n = final_n;
        let mut ladder = Vec::new();
        while rest > 0 && n > 0 {
            if (n as u64) > rest {
                return Err(bad);
            }
            rest -= n as u64;
            ladder.push(n);
            n = n.saturating_sub(2);
        }
        if rest != 0 || ladder.is_empty() {
            return Err(bad);
        }
        for v in ladder {
            self.record_vote(v);
        }
        self.record_sample();
        Ok(())
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn votes_at(&self, active: usize) -> u64 {
        self.votes.get(active).copied().unwrap_or(0)
    }

    pub fn total_votes(&self) -> u64 {
        self.votes.iter().sum()
    }

    /// Learner evaluations, the sum of `N` over all votes.
    pub fn evaluations(&self) -> u64 {
        self.votes
            .iter()
            .enumerate()
            .map(|(n, v)| n as u64 * v)
            .sum()
    }

    /// `alpha_N` for `N = 1..=K`: share of votes cast with `N` active learners.
    pub fn alphas(&self) -> Vec<f64> {
        let total = self.total_votes();
        (1..=self.ensemble_size())
            .map(|n| {
                if total == 0 {
                    0.0
                } else {
                    self.votes_at(n) as f64 / total as f64
                }
            })
            .collect()
    }

    pub fn merge(&mut self, other: &VoteTally) {
        if other.votes.len() > self.votes.len() {
            self.votes.resize(other.votes.len(), 0);
        }
        for (a, b) in self.votes.iter_mut().zip(&other.votes) {
            *a += b;
        }
        self.samples += other.samples;
    }
}

/// Counters, tallies and accumulated energy of one timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    pub ops: OpCounts,
    pub tally: VoteTally,
    pub calibration: EnergyCalibration,
    pub energy_pj: f64,
}

impl EnergyLedger {
    pub fn new(calibration: EnergyCalibration) -> Self {
        Self {
            ops: OpCounts::default(),
            tally: VoteTally::new(calibration.ensemble_size),
            calibration,
            energy_pj: 0.0,
        }
    }

    pub fn record_vote(&mut self, active: usize) {
        self.tally.record_vote(active);
        self.energy_pj += self.calibration.vote_energy(active);
    }

    pub fn record_sample(&mut self) {
        self.tally.record_sample();
    }

    pub fn merge(&mut self, other: &EnergyLedger) -> Result<(), EnergyError> {
        if self.calibration != other.calibration {
            return Err(EnergyError::CalibrationMismatch);
        }
        self.ops += other.ops;
        self.tally.merge(&other.tally);
        self.energy_pj += other.energy_pj;
        Ok(())
    }

    pub fn lifetime(&self) -> Result<LifetimeEnergy, EnergyError> {
        lifetime_energy(&self.tally, &self.calibration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimeEnergy {
    pub total_pj: f64,
    pub pj_per_op_normalized: f64,
}

/// `E_total = sum_i alpha_i E(N_i)` summed over all votes, normalized by the
/// full-ensemble op count over the same samples.
pub fn lifetime_energy(
    tally: &VoteTally,
    calibration: &EnergyCalibration,
) -> Result<LifetimeEnergy, EnergyError> {
    if tally.samples() == 0 {
        return Err(EnergyError::EmptyTimeline);
    }
    let total_pj: f64 = (1..tally.votes.len())
        .map(|n| tally.votes_at(n) as f64 * calibration.vote_energy(n))
        .sum();
    Ok(LifetimeEnergy {
        total_pj,
        pj_per_op_normalized: total_pj / (tally.samples() as f64 * calibration.op_norm as f64),
    })
}

/// Normalized efficiency of a lifetime described only by fractions:
/// `(N, alpha)` pairs, one vote per sample.
pub fn normalized_from_fractions(
    fractions: &[(usize, f64)],
    calibration: &EnergyCalibration,
) -> Result<f64, EnergyError> {
    let k = calibration.ensemble_size;
    if fractions.is_empty() {
        return Err(EnergyError::EmptyTimeline);
    }
    let mut per_sample = 0.0;
    for &(n, alpha) in fractions {
        if n == 0 || n > k {
            return Err(EnergyError::BadLearnerCount { n, k });
        }
        per_sample += alpha * calibration.vote_energy(n);
    }
    Ok(per_sample / calibration.op_norm as f64)
}

/// Static-plus-per-learner power: `P(N) = P_static + N * P_bl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerModel {
    /// `P_static / P_bl`.
    pub static_share: f64,
    pub ensemble_size: usize,
}

impl PowerModel {
    /// Fits the static share so that `P(K) / P(1) = ratio`.
    pub fn fit(ratio_full_to_single: f64, ensemble_size: usize) -> Self {
        let k = ensemble_size as f64;
        Self {
            static_share: (k - ratio_full_to_single) / (ratio_full_to_single - 1.0),
            ensemble_size,
        }
    }

    /// Measured at 1.2V: running one learner instead of seven draws 1.8x less power.
    pub fn measured() -> Self {
        Self::fit(1.8, 7)
    }

    /// `P(N) / P(K)`.
    pub fn relative_power(&self, active: usize) -> Result<f64, EnergyError> {
        if active == 0 || active > self.ensemble_size {
            return Err(EnergyError::BadLearnerCount {
                n: active,
                k: self.ensemble_size,
            });
        }
        Ok((self.static_share + active as f64) / (self.static_share + self.ensemble_size as f64))
    }
}

/// Operation tallies of one training run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainingTally {
    pub samples: u64,
    pub ops: OpCounts,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingComparison {
    /// `1 - lite_ops / opium_ops`.
    pub counted_op_reduction: f64,
    /// `1 - E_lite / E_opium` from the calibration table.
    pub calibrated_energy_reduction: f64,
    /// `E_lite / E_opium`.
    pub calibrated_ratio: f64,
    /// Share of OPIUM training energy that does not scale with counted ops,
    /// when the calibrated ratio is consistent with one (`None` otherwise).
    pub overhead_share: Option<f64>,
}

pub fn training_energy_compare(
    opium: &TrainingTally,
    lite: &TrainingTally,
    calibration: &EnergyCalibration,
) -> Result<TrainingComparison, EnergyError> {
    if opium.samples != lite.samples || opium.samples == 0 {
        return Err(EnergyError::MismatchedStreams {
            opium: opium.samples,
            lite: lite.samples,
        });
    }
    let missing = EnergyError::MissingCalibration {
        point: calibration.point,
        what: "training",
    };
    let e_opium = calibration.e_train_opium.ok_or(missing.clone())?;
    let e_lite = calibration.e_train_lite.ok_or(missing)?;

    let op_ratio = lite.ops.total() as f64 / opium.ops.total() as f64;
    // Both figures are per OPIUM-counted op, so energies scale by the same
    // denominator and the ratio is the table ratio.
    let calibrated_ratio = e_lite / e_opium;
    let share = (calibrated_ratio - op_ratio) / (1.0 - op_ratio);
    Ok(TrainingComparison {
        counted_op_reduction: 1.0 - op_ratio,
        calibrated_energy_reduction: 1.0 - calibrated_ratio,
        calibrated_ratio,
        overhead_share: (0.0..=1.0).contains(&share).then_some(share),
    })
}

/// Mean OPIUM-Lite training saving over every table row with both figures.
pub fn mean_lite_saving() -> f64 {
    let savings: Vec<f64> = OPERATING_POINTS
        .iter()
        .filter_map(|p| Some(1.0 - p.train_lite_pj_per_op? / p.train_opium_pj_per_op?))
        .collect();
    savings.iter().sum::<f64>() / savings.len() as f64
}

/// One row of the energy summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySummaryRow {
    pub operating_point: String,
    pub policy: String,
    pub total_pj: f64,
    pub pj_per_op_normalized: f64,
    pub alphas: Vec<f64>,
}

pub fn write_energy_csv<W: Write>(mut out: W, rows: &[EnergySummaryRow]) -> std::io::Result<()> {
    let k = rows.iter().map(|r| r.alphas.len()).max().unwrap_or(0);
    write!(out, "operating_point,policy,E_total_pJ,pJ_per_op_normalized")?;
    for n in 1..=k {
        write!(out, ",alpha_{n}")?;
    }
    writeln!(out)?;
    for row in rows {
        write!(
            out,
            "{},{},{},{}",
            row.operating_point, row.policy, row.total_pj, row.pj_per_op_normalized
        )?;
        for n in 0..k {
            write!(out, ",{}", row.alphas.get(n).copied().unwrap_or(0.0))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference(ops_per_bl: u64) -> EnergyCalibration {
        EnergyCalibration::new(operating_point(REFERENCE_POINT).unwrap(), ops_per_bl, 7).unwrap()
    }

    #[test]
    fn ladders_rebuild_escalations() {
        let mut t = VoteTally::new(7);
        t.record_ladder(7, 16).unwrap();
        t.record_ladder(3, 3).unwrap();
        t.record_ladder(5, 8).unwrap();
        assert_eq!((1..=7).map(|n| t.votes_at(n)).collect::<Vec<_>>(), vec![1, 0, 3, 0, 2, 0, 1]);
        assert_eq!((t.samples(), t.evaluations()), (3, 27));
        assert!(t.record_ladder(5, 7).is_err());
        assert!(t.record_ladder(1, 0).is_err());
        assert_eq!(t.samples(), 3);
    }

    #[test]
    fn single_learner_lifetime_is_one_seventh() {
        let cal = reference(1056);
        let mut tally = VoteTally::new(7);
        for _ in 0..100 {
            tally.record_sample();
            tally.record_vote(1);
        }
        let e = lifetime_energy(&tally, &cal).unwrap();
        let expected = 3.35 / 7.0;
        assert!((e.pj_per_op_normalized - expected).abs() < 1e-12);
        assert!((e.pj_per_op_normalized - 0.48).abs() / 0.48 < 0.01);
    }

    #[test]
    fn full_ensemble_lifetime_is_the_measured_figure() {
        let cal = reference(544);
        let mut tally = VoteTally::new(7);
        for _ in 0..10 {
            tally.record_sample();
            tally.record_vote(7);
        }
        let e = lifetime_energy(&tally, &cal).unwrap();
        assert!((e.pj_per_op_normalized - 3.35).abs() < 1e-12);
        assert!((cal.full_ensemble_pj_per_op() - 3.35).abs() < 1e-12);
    }

    #[test]
    fn empty_timeline_is_an_error() {
        let cal = reference(10);
        assert_eq!(
            lifetime_energy(&VoteTally::new(7), &cal),
            Err(EnergyError::EmptyTimeline)
        );
    }

    #[test]
    fn power_model_static_share() {
        let p = PowerModel::measured();
        assert!((p.static_share - 6.5).abs() < 1e-12);
        assert!(((6.5 + 7.0) / (6.5 + 1.0) - 1.8f64).abs() < 1e-12);
        let ratio = p.relative_power(7).unwrap() / p.relative_power(1).unwrap();
        assert!((ratio - 1.8).abs() < 1e-12);
        assert_eq!(p.relative_power(7).unwrap(), 1.0);
        assert!(p.relative_power(8).is_err());
    }

    #[test]
    fn lite_calibrated_ratio() {
        let cal = reference(100);
        let opium = TrainingTally {
            samples: 10,
            ops: OpCounts {
                mac: 3152,
                ..Default::default()
            },
        };
        let lite = TrainingTally {
            samples: 10,
            ops: OpCounts {
                mac: 1632,
                ..Default::default()
            },
        };
        let cmp = training_energy_compare(&opium, &lite, &cal).unwrap();
        assert!((cmp.calibrated_ratio - 8.12 / 11.87).abs() < 1e-12);
        let share = cmp.overhead_share.unwrap();
        let op_ratio = 1632.0 / 3152.0;
        assert!((share + (1.0 - share) * op_ratio - cmp.calibrated_ratio).abs() < 1e-12);

        let short = TrainingTally { samples: 9, ..lite };
        assert!(matches!(
            training_energy_compare(&opium, &short, &cal),
            Err(EnergyError::MismatchedStreams { .. })
        ));
    }

    #[test]
    fn table_mean_saving() {
        assert!((mean_lite_saving() - 0.428).abs() < 5e-4);
        let hi = operating_point("1.2V/10MHz").unwrap();
        let lo = operating_point("0.75V/10MHz").unwrap();
        let cross = hi.train_opium_pj_per_op.unwrap() / lo.train_lite_pj_per_op.unwrap();
        assert!((cross - 3.6).abs() < 1e-3);
    }

    #[test]
    fn alphas_sum_to_one() {
        let mut t = VoteTally::new(7);
        for n in [1, 1, 3, 1, 5, 7, 1] {
            t.record_vote(n);
        }
        let a = t.alphas();
        assert_eq!(a.len(), 7);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t.evaluations(), 19);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![EnergySummaryRow {
            operating_point: "0.75V/10MHz".into(),
            policy: "adepos".into(),
            total_pj: 10.0,
            pj_per_op_normalized: 0.5,
            alphas: vec![1.0, 0.0, 0.0],
        }];
        let mut buf = Vec::new();
        write_energy_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "operating_point,policy,E_total_pJ,pJ_per_op_normalized,alpha_1,alpha_2,alpha_3\n\
             0.75V/10MHz,adepos,10,0.5,1,0,0\n"
        );
    }

    fn ledger_from(votes: &[usize], cal: &EnergyCalibration) -> EnergyLedger {
        let mut l = EnergyLedger::new(cal.clone());
        for &n in votes {
            l.record_sample();
            l.record_vote(n);
            l.ops.mac += n as u64 * cal.ops_per_bl;
        }
        l
    }

    proptest! {
        #[test]
        fn ledger_merge_is_concatenation(
            a in prop::collection::vec(prop::sample::select(vec![1usize, 3, 5, 7]), 1..40),
            b in prop::collection::vec(prop::sample::select(vec![1usize, 3, 5, 7]), 1..40),
        ) {
            let cal = reference(64);
            let mut left = ledger_from(&a, &cal);
            left.merge(&ledger_from(&b, &cal)).unwrap();
            let joined: Vec<usize> = a.iter().chain(&b).copied().collect();
            let whole = ledger_from(&joined, &cal);
            prop_assert_eq!(&left.tally, &whole.tally);
            prop_assert_eq!(left.ops, whole.ops);
            prop_assert!((left.energy_pj - whole.energy_pj).abs() <= 1e-9 * whole.energy_pj);
        }

        #[test]
        fn normalized_never_beats_single_learner_bound(
            votes in prop::collection::vec(prop::sample::select(vec![1usize, 3, 5, 7]), 1..60),
        ) {
            let cal = reference(544);
            let l = ledger_from(&votes, &cal);
            let e = l.lifetime().unwrap();
            prop_assert!(e.pj_per_op_normalized >= 3.35 / 7.0 - 1e-12);
        }
    }
}
