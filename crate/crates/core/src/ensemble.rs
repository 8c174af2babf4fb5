//! Ensemble of base learners, majority voting and the ADEPOS controller.
//!
//! ADEPOS starts with one active learner. When the active learners vote
//! "fault" by majority, two more are woken and the same sample is voted on
//! again, up to the full ensemble; a majority at the full ensemble is a
//! fault. A healthy vote retires two learners (never below one).

use std::io::Write;

use thiserror::Error;

use crate::energy::{EnergyCalibration, EnergyError, EnergyLedger, OpCounts, VoteTally};
use crate::features::FeatureVector;
use crate::fxp::{quantize, Datapath, FxpError, FxpFormat};
use crate::network::{self, Arithmetic, Mode, NetworkConfig, NetworkError};
use crate::prbs::{self, InputWeights, PrbsError};
use crate::training::{self, LearnerModel, TrainingError, TrainingReport, UpdateRule};

/// Maximum ensemble size of the chip.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 7;

/// One PRBS seed per learner.
pub const DEFAULT_SEEDS: [u16; DEFAULT_ENSEMBLE_SIZE] = [0xACE1, 0x1D2B, 0x3C4F, 0x5A6E, 0x7B8D, 0x9C1A, 0xBE37];

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("learner {0} has no threshold")]
    UncalibratedLearner(usize),
    #[error("seed {0:#06x} used by more than one learner")]
    DuplicateSeed(u16),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Prbs(#[from] PrbsError),
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("timeline CSV: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Every sample is voted on by all `K` learners.
    FixedN,
    Adepos,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::FixedN => "fixed-n",
            Policy::Adepos => "adepos",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "adepos" => Ok(Policy::Adepos),
            "fixed-n" | "fixedn" | "fixed" => Ok(Policy::FixedN),
            other => Err(EnsembleError::InvalidEnsemble(format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Healthy,
    FaultDetected,
}

impl Decision {
    pub fn name(self) -> &'static str {
        match self {
            Decision::Healthy => "healthy",
            Decision::FaultDetected => "fault",
        }
    }
}

fn majority(t: usize, n: usize) -> bool {
    t >= n.div_ceil(2)
}

/// One trained (or trainable) learner. Its first layer is regenerated from
/// the seed on every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLearner {
    id: usize,
    seed: u16,
    config: NetworkConfig,
    model: LearnerModel,
    threshold: Option<f64>,
}

impl BaseLearner {
    pub fn new(
        id: usize,
        seed: u16,
        config: NetworkConfig,
        rule: UpdateRule,
        theta_init: Option<f64>,
    ) -> Result<Self, TrainingError> {
        if seed == 0 {
            return Err(PrbsError::ZeroState.into());
        }
        let model = LearnerModel::new(rule, &config.for_training(), theta_init)?;
        Ok(Self {
            id,
            seed,
            config,
            model,
            threshold: None,
        })
    }

    pub fn from_parts(
        id: usize,
        seed: u16,
        config: NetworkConfig,
        model: LearnerModel,
        threshold: Option<f64>,
    ) -> Self {
        Self {
            id,
            seed,
            config,
            model,
            threshold,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn seed(&self) -> u16 {
        self.seed
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Changes the inference configuration (word width, weight bits);
    /// dimensions and mode must stay the same.
    pub fn set_config(&mut self, config: NetworkConfig) -> Result<(), EnsembleError> {
        if config.inputs() != self.config.inputs()
            || config.hidden() != self.config.hidden()
            || config.mode() != self.config.mode()
        {
            return Err(EnsembleError::InvalidEnsemble(
                "inference config must keep d, L and mode".into(),
            ));
        }
        self.config = config;
        Ok(())
    }

    pub fn model(&self) -> &LearnerModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut LearnerModel {
        &mut self.model
    }

    /// Threshold on the squared-error scale.
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: Option<f64>) {
        self.threshold = threshold;
    }

    pub fn training_weights(&self) -> Result<InputWeights, PrbsError> {
        prbs::weights_with_bits(
            self.config.inputs(),
            self.config.hidden(),
            self.seed,
            prbs::TRAINING_WEIGHT_BITS,
        )
    }

    pub fn inference_weights(&self) -> Result<InputWeights, PrbsError> {
        prbs::weights_for(&self.config, self.seed)
    }

    pub fn train(&mut self, samples: &[FeatureVector]) -> Result<TrainingReport, TrainingError> {
        training::train_stream(self, samples)
    }

    /// Squared reconstruction error under the learner's own arithmetic.
    pub fn score(&self, x: &FeatureVector, ops: &mut OpCounts) -> Result<f64, EnsembleError> {
        self.score_with(x, self.config.arithmetic(), ops)
    }

    /// Output vector (real values) under the given arithmetic.
    pub fn reconstruct_with(
        &self,
        x: &FeatureVector,
        arithmetic: Arithmetic,
        ops: &mut OpCounts,
    ) -> Result<Vec<f64>, EnsembleError> {
        Ok(self.forward(x, arithmetic, ops)?.0)
    }

    pub fn score_with(&self, x: &FeatureVector, arithmetic: Arithmetic, ops: &mut OpCounts) -> Result<f64, EnsembleError> {
        Ok(self.forward(x, arithmetic, ops)?.1)
    }

    fn forward(
        &self,
        x: &FeatureVector,
        arithmetic: Arithmetic,
        ops: &mut OpCounts,
    ) -> Result<(Vec<f64>, f64), EnsembleError> {
        let cfg = self.config;
        let weights = self.inference_weights()?;
        let m = cfg.outputs();
        match arithmetic {
            Arithmetic::Fixed(fmt) => {
                let mut dp = Datapath::new(fmt);
                let xq = x.to_fixed(fmt);
                let (w, b) = weights.rescaled(fmt);
                let h = network::hidden_layer_fixed(&xq, &w, &b, &cfg, &mut dp)?;
                let beta = self.model.beta_words(fmt);
                let y = network::output_layer_fixed(&h, &beta, m, &mut dp)?;
                let target = match cfg.mode() {
                    Mode::Reconstruction => xq,
                    Mode::Boundary => vec![quantize(cfg.boundary_target(), fmt).0],
                };
                let e2 = network::squared_error_fixed(&target, &y)?;
                *ops += dp.ops;
                Ok((y.iter().map(|v| v.to_f64()).collect(), e2))
            }
            Arithmetic::FloatReference => {
                let xf = x.to_f64();
                let (w, b) = weights.to_f64(FxpFormat::Q3_12);
                let h = network::hidden_layer_float(&xf, &w, &b, &cfg, ops)?;
                let y = network::output_layer_float(&h, &self.model.beta_f64(), m, ops)?;
                let e2 = network::reconstruction_error(&xf, &y, &cfg)?;
                Ok((y, e2))
            }
        }
    }
}

/// Outcome of one vote over learners `1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub active: usize,
    pub t: usize,
    pub fired: Vec<bool>,
    pub scores: Vec<f64>,
}

/// Algorithm state of the adaptive controller: only the active count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdeposController {
    max: usize,
    active: usize,
}

/// Result of one controller step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdeposStep {
    pub decision: Decision,
    /// `(N, T)` of every vote taken on the sample, in order.
    pub votes: Vec<(usize, usize)>,
    pub active_before: usize,
    pub active_after: usize,
}

impl AdeposStep {
    /// Learner evaluations: the sum of `N` over the votes.
    pub fn evaluations(&self) -> usize {
        self.votes.iter().map(|v| v.0).sum()
    }

    pub fn final_vote(&self) -> (usize, usize) {
        *self.votes.last().expect("a step always votes at least once")
    }
}

impl AdeposController {
    pub fn new(max: usize) -> Self {
        Self { max, active: 1 }
    }

    pub fn with_active(max: usize, active: usize) -> Self {
        Self { max, active }
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn max(&self) -> usize {
        self.max
    }

    /// Runs the escalation loop on one sample. `vote(n)` returns how many of
    /// learners `1..=n` fire.
    pub fn step<E>(&mut self, mut vote: impl FnMut(usize) -> Result<usize, E>) -> Result<AdeposStep, E> {
        let before = self.active;
        let mut votes = Vec::new();
        loop {
            let n = self.active;
            let t = vote(n)?;
            votes.push((n, t));
            if !majority(t, n) {
                self.active = n.saturating_sub(2).max(1);
                return Ok(AdeposStep {
                    decision: Decision::Healthy,
                    votes,
                    active_before: before,
                    active_after: self.active,
                });
            }
            if n >= self.max {
                return Ok(AdeposStep {
                    decision: Decision::FaultDetected,
                    votes,
                    active_before: before,
                    active_after: self.active,
                });
            }
            self.active = (n + 2).min(self.max);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimelineOptions {
    /// Consecutive fault decisions needed to latch.
    pub debounce: usize,
    /// Keep evaluating at `N = K` after the latch.
    pub continue_after_fault: bool,
    /// Index of the first sample, for reporting.
    pub start_index: usize,
}

impl Default for TimelineOptions {
    fn default() -> Self {
        Self {
            debounce: 1,
            continue_after_fault: true,
            start_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRecord {
    pub sample_index: usize,
    /// `e^2` of learners evaluated in the deciding vote.
    pub scores: Vec<Option<f64>>,
    pub active_before: usize,
    pub active_after: usize,
    /// Active count and fire count of the deciding vote.
    pub n: usize,
    pub t: usize,
    pub decision: Decision,
    pub evaluations: usize,
    pub cum_evaluations: u64,
    pub cum_energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineReport {
    pub policy: Policy,
    pub ensemble_size: usize,
    pub records: Vec<TimelineRecord>,
    /// Sample index at which the fault latched.
    pub fault_index: Option<usize>,
    pub ledger: EnergyLedger,
}

impl TimelineReport {
    pub fn evaluations(&self) -> u64 {
        self.ledger.tally.evaluations()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.ledger.tally.alphas()
    }

    pub fn fault_detected(&self) -> bool {
        self.fault_index.is_some()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "sample_index")?;
        for i in 1..=self.ensemble_size {
            write!(out, ",e2_bl{i}")?;
        }
        writeln!(out, ",N,T,decision,cum_evaluations,cum_energy_pJ")?;
        for r in &self.records {
            write!(out, "{}", r.sample_index)?;
            for s in &r.scores {
                match s {
                    Some(v) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(
                out,
                ",{},{},{},{},{}",
                r.n,
                r.t,
                r.decision.name(),
                r.cum_evaluations,
                r.cum_energy_pj
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    learners: Vec<BaseLearner>,
    policy: Policy,
    controller: AdeposController,
}

impl Ensemble {
    pub fn new(learners: Vec<BaseLearner>, policy: Policy) -> Result<Self, EnsembleError> {
        let k = learners.len();
        if k == 0 || k.is_multiple_of(2) {
            return Err(EnsembleError::InvalidEnsemble(format!(
                "ensemble size must be odd and positive, got {k}"
            )));
        }
        for (i, a) in learners.iter().enumerate() {
            if learners[..i].iter().any(|b| b.seed == a.seed) {
                return Err(EnsembleError::DuplicateSeed(a.seed));
            }
        }
        let first = learners[0].config;
        if learners.iter().any(|l| {
            l.config.inputs() != first.inputs()
                || l.config.hidden() != first.hidden()
                || l.config.mode() != first.mode()
        }) {
            return Err(EnsembleError::InvalidEnsemble(
                "learners must share d, L and mode".into(),
            ));
        }
        Ok(Self {
            learners,
            policy,
            controller: AdeposController::new(k),
        })
    }

    pub fn size(&self) -> usize {
        self.learners.len()
    }

    /// Current active count `N`.
    pub fn active(&self) -> usize {
        match self.policy {
            Policy::FixedN => self.size(),
            Policy::Adepos => self.controller.active(),
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
        self.reset();
    }

    /// Back to one active learner.
    pub fn reset(&mut self) {
        self.controller = AdeposController::new(self.size());
    }

    pub fn learners(&self) -> &[BaseLearner] {
        &self.learners
    }

    pub fn learners_mut(&mut self) -> &mut [BaseLearner] {
        &mut self.learners
    }

    /// `K * L`.
    pub fn effective_hidden(&self) -> usize {
        self.size() * self.learners[0].config.hidden()
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.learners[0].config
    }

    pub fn thresholds(&self) -> Vec<Option<f64>> {
        self.learners.iter().map(|l| l.threshold).collect()
    }

    pub fn train(&mut self, samples: &[FeatureVector]) -> Result<Vec<TrainingReport>, EnsembleError> {
        self.learners
            .iter_mut()
            .map(|l| l.train(samples).map_err(EnsembleError::from))
            .collect()
    }

    /// `e^2` of every learner on one sample.
    pub fn scores(&self, x: &FeatureVector, ops: &mut OpCounts) -> Result<Vec<f64>, EnsembleError> {
        self.learners.iter().map(|l| l.score(x, ops)).collect()
    }

    /// Votes with learners `1..=n`.
    pub fn vote(&self, n: usize, x: &FeatureVector, ops: &mut OpCounts) -> Result<Vote, EnsembleError> {
        if n == 0 || n > self.size() {
            return Err(EnsembleError::InvalidEnsemble(format!(
                "active count {n} outside 1..={}",
                self.size()
            )));
        }
        let mut fired = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for l in &self.learners[..n] {
            let th = l.threshold.ok_or(EnsembleError::UncalibratedLearner(l.id))?;
            let e2 = l.score(x, ops)?;
            fired.push(e2 > th);
            scores.push(e2);
        }
        Ok(Vote {
            active: n,
            t: fired.iter().filter(|f| **f).count(),
            fired,
            scores,
        })
    }

    /// One ADEPOS step; votes are charged to `ledger`.
    pub fn adepos_step(
        &mut self,
        x: &FeatureVector,
        ledger: &mut EnergyLedger,
    ) -> Result<(AdeposStep, Vote), EnsembleError> {
        let mut controller = self.controller;
        let mut last = None;
        let step = controller.step(|n| {
            let v = self.vote(n, x, &mut ledger.ops)?;
            ledger.record_vote(n);
            let t = v.t;
            last = Some(v);
            Ok::<usize, EnsembleError>(t)
        })?;
        self.controller = controller;
        ledger.record_sample();
        Ok((step, last.expect("controller votes at least once")))
    }

    /// One full-ensemble majority vote.
    pub fn fixed_n_step(
        &self,
        x: &FeatureVector,
        ledger: &mut EnergyLedger,
    ) -> Result<(Decision, Vote), EnsembleError> {
        let k = self.size();
        let v = self.vote(k, x, &mut ledger.ops)?;
        ledger.record_vote(k);
        ledger.record_sample();
        let d = if majority(v.t, k) {
            Decision::FaultDetected
        } else {
            Decision::Healthy
        };
        Ok((d, v))
    }

    /// Runs the policy over a stream. A fault latches after `debounce`
    /// consecutive fault decisions; a stream that ends first is healthy.
    pub fn run_timeline(
        &mut self,
        samples: &[FeatureVector],
        options: TimelineOptions,
        calibration: &EnergyCalibration,
    ) -> Result<TimelineReport, EnsembleError> {
        let k = self.size();
        let mut ledger = EnergyLedger::new(calibration.clone());
        let mut records = Vec::with_capacity(samples.len());
        let mut fault_index = None;
        let mut streak = 0usize;
        let debounce = options.debounce.max(1);

        for (i, x) in samples.iter().enumerate() {
            let index = options.start_index + i;
            let latched = fault_index.is_some();
            if latched && !options.continue_after_fault {
                break;
            }
            let evals_before = ledger.tally.evaluations();
            let (decision, vote, before, after) = if latched || self.policy == Policy::FixedN {
                let (d, v) = self.fixed_n_step(x, &mut ledger)?;
                (d, v, k, k)
            } else {
                let (step, v) = self.adepos_step(x, &mut ledger)?;
                (step.decision, v, step.active_before, step.active_after)
            };
            if !latched {
                if decision == Decision::FaultDetected {
                    streak += 1;
                    if streak >= debounce {
                        fault_index = Some(index);
                    }
                } else {
                    streak = 0;
                }
            }
            let mut scores = vec![None; k];
            for (s, v) in scores.iter_mut().zip(&vote.scores) {
                *s = Some(*v);
            }
            let cum = ledger.tally.evaluations();
            records.push(TimelineRecord {
                sample_index: index,
                scores,
                active_before: before,
                active_after: after,
                n: vote.active,
                t: vote.t,
                decision,
                evaluations: (cum - evals_before) as usize,
                cum_evaluations: cum,
                cum_energy_pj: ledger.energy_pj,
            });
        }
        Ok(TimelineReport {
            policy: self.policy,
            ensemble_size: k,
            records,
            fault_index,
            ledger,
        })
    }
}

/// Rebuilds the vote tally from a timeline CSV written by
/// [`TimelineReport::write_csv`].
pub fn tally_from_timeline_csv<R: std::io::Read>(input: R) -> Result<VoteTally, EnsembleError> {
    let bad = |m: String| EnsembleError::InvalidEnsemble(format!("timeline CSV: {m}"));
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column {name}")))
    };
    let (n_col, cum_col) = (col("N")?, col("cum_evaluations")?);
    let k = headers.iter().filter(|h| h.starts_with("e2_bl")).count();
    let mut tally = VoteTally::new(k);
    let mut prev = 0u64;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or_default();
        let n: usize = field(n_col).parse().map_err(|_| bad(format!("row {}: bad N", i + 2)))?;
        let cum: u64 = field(cum_col)
            .parse()
            .map_err(|_| bad(format!("row {}: bad cum_evaluations", i + 2)))?;
        if cum < prev || n == 0 || n > k {
            return Err(bad(format!("row {}: inconsistent counts", i + 2)));
        }
        tally.record_ladder(n, cum - prev)?;
        prev = cum;
    }
    Ok(tally)
}

/// Outcome of replaying the policy over precomputed scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replay {
    /// Position (within the replayed slice) of the latching sample.
    pub fault_position: Option<usize>,
    pub evaluations: u64,
}

/// Replays a policy over a matrix of cached scores (`scores[sample][learner]`)
/// with the given squared thresholds. Produces the same decisions as
/// [`Ensemble::run_timeline`] for the same scores.
pub fn replay(scores: &[Vec<f64>], thresholds: &[f64], policy: Policy, debounce: usize) -> Replay {
    let k = thresholds.len();
    let mut controller = AdeposController::new(k);
    let mut streak = 0usize;
    let mut evaluations = 0u64;
    let fires = |row: &[f64], n: usize| (0..n).filter(|&i| row[i] > thresholds[i]).count();
    for (pos, row) in scores.iter().enumerate() {
        let decision = match policy {
            Policy::FixedN => {
                evaluations += k as u64;
                if majority(fires(row, k), k) {
                    Decision::FaultDetected
                } else {
                    Decision::Healthy
                }
            }
            Policy::Adepos => {
                let step = controller
                    .step(|n| Ok::<usize, std::convert::Infallible>(fires(row, n)))
                    .unwrap_or_else(|e| match e {});
                evaluations += step.evaluations() as u64;
                step.decision
            }
        };
        if decision == Decision::FaultDetected {
            streak += 1;
            if streak >= debounce.max(1) {
                return Replay {
                    fault_position: Some(pos),
                    evaluations,
                };
            }
        } else {
            streak = 0;
        }
    }
    Replay {
        fault_position: None,
        evaluations,
    }
}

/// Everything needed to build an ensemble of identically configured learners.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub seeds: Vec<u16>,
    pub network: NetworkConfig,
    pub rule: UpdateRule,
    pub theta_init: Option<f64>,
    pub policy: Policy,
}

impl EnsembleSpec {
    pub fn build(&self) -> Result<Ensemble, EnsembleError> {
        let learners = self
            .seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| BaseLearner::new(i + 1, seed, self.network, self.rule, self.theta_init))
            .collect::<Result<Vec<_>, _>>()?;
        Ensemble::new(learners, self.policy)
    }

    pub fn train(&self, samples: &[FeatureVector]) -> Result<(Ensemble, Vec<TrainingReport>), EnsembleError> {
        let mut e = self.build()?;
        let reports = e.train(samples)?;
        Ok((e, reports))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{operating_point, REFERENCE_POINT};

    #[test]
    fn vote_counting() {
        assert!(!majority(0, 1));
        assert!(majority(1, 1));
        assert!(majority(2, 3));
        assert!(!majority(3, 7));
        assert!(majority(4, 7));
    }

    fn scripted(fires: &'static [usize]) -> impl FnMut(usize) -> Result<usize, ()> {
        // learners 1..=fires[n] fire when n are active
        move |n| Ok(fires.iter().filter(|&&f| f <= n).count())
    }

    #[test]
    fn healthy_at_one_stays_at_one() {
        let mut c = AdeposController::new(7);
        let s = c.step(|_| Ok::<_, ()>(0)).unwrap();
        assert_eq!(s.decision, Decision::Healthy);
        assert_eq!(s.evaluations(), 1);
        assert_eq!(c.active(), 1);
    }

    #[test]
    fn full_escalation_costs_sixteen() {
        let mut c = AdeposController::new(7);
        let s = c.step(Ok::<_, ()>).unwrap();
        assert_eq!(s.decision, Decision::FaultDetected);
        assert_eq!(s.votes, vec![(1, 1), (3, 3), (5, 5), (7, 7)]);
        assert_eq!(s.evaluations(), 1 + 3 + 5 + 7);
        assert_eq!(c.active(), 7);
    }

    #[test]
    fn de_escalation_by_two() {
        let mut c = AdeposController::with_active(7, 5);
        let s = c.step(|_| Ok::<_, ()>(1)).unwrap();
        assert_eq!((s.decision, c.active()), (Decision::Healthy, 3));
        let mut c = AdeposController::with_active(7, 7);
        c.step(|_| Ok::<_, ()>(0)).unwrap();
        assert_eq!(c.active(), 5);
    }

    #[test]
    fn partial_escalation_returns_healthy() {
        // learner 1 fires; at N=3 only one of three fires
        let mut c = AdeposController::new(7);
        let s = c.step(scripted(&[1])).unwrap();
        assert_eq!(s.votes, vec![(1, 1), (3, 1)]);
        assert_eq!(s.decision, Decision::Healthy);
        assert_eq!(c.active(), 1);
    }

    #[test]
    fn replay_matches_controller_accounting() {
        let th = vec![1.0; 7];
        let healthy = vec![vec![0.0; 7]; 10];
        let r = replay(&healthy, &th, Policy::Adepos, 1);
        assert_eq!((r.fault_position, r.evaluations), (None, 10));
        let r = replay(&healthy, &th, Policy::FixedN, 1);
        assert_eq!(r.evaluations, 70);
        let mut rows = healthy.clone();
        rows[4] = vec![2.0; 7];
        rows[5] = vec![2.0; 7];
        assert_eq!(replay(&rows, &th, Policy::Adepos, 1).fault_position, Some(4));
        assert_eq!(replay(&rows, &th, Policy::Adepos, 2).fault_position, Some(5));
        assert_eq!(replay(&rows, &th, Policy::Adepos, 3).fault_position, None);
    }

    fn toy_ensemble(policy: Policy, k: usize) -> Ensemble {
        let cfg = NetworkConfig::new(3, 8, Mode::Reconstruction).unwrap();
        let spec = EnsembleSpec {
            seeds: DEFAULT_SEEDS[..k].to_vec(),
            network: cfg,
            rule: UpdateRule::Opium,
            theta_init: None,
            policy,
        };
        let train: Vec<FeatureVector> = (0..50)
            .map(|i| FeatureVector::from_codes(vec![(i % 7) as i8 * 3, -10, 20]))
            .collect();
        let (mut e, _) = spec.train(&train).unwrap();
        for l in e.learners_mut() {
            l.set_threshold(Some(0.5));
        }
        e
    }

    fn calib(k: usize, cfg: &NetworkConfig) -> EnergyCalibration {
        EnergyCalibration::new(operating_point(REFERENCE_POINT).unwrap(), cfg.macs_per_inference(), k).unwrap()
    }

    #[test]
    fn uncalibrated_vote_is_an_error() {
        let mut e = toy_ensemble(Policy::Adepos, 3);
        e.learners_mut()[0].set_threshold(None);
        let x = FeatureVector::from_codes(vec![0, 0, 0]);
        assert!(matches!(
            e.vote(1, &x, &mut OpCounts::default()),
            Err(EnsembleError::UncalibratedLearner(1))
        ));
    }

    #[test]
    fn healthy_timeline_evaluation_counts() {
        let mut e = toy_ensemble(Policy::Adepos, 7);
        let cal = calib(7, e.config());
        let stream: Vec<FeatureVector> = (0..100).map(|_| FeatureVector::from_codes(vec![3, -10, 20])).collect();
        let a = e.run_timeline(&stream, TimelineOptions::default(), &cal).unwrap();
        assert_eq!(a.evaluations(), 100);
        assert_eq!(a.alphas()[0], 1.0);
        assert_eq!(a.ledger.ops.mac, 100 * e.config().macs_per_inference());
        e.set_policy(Policy::FixedN);
        let f = e.run_timeline(&stream, TimelineOptions::default(), &cal).unwrap();
        assert_eq!(f.evaluations(), 700);
        assert!(!a.fault_detected() && !f.fault_detected());
    }

    #[test]
    fn fault_latches_and_continues_at_k() {
        let mut e = toy_ensemble(Policy::Adepos, 7);
        let cal = calib(7, e.config());
        let mut stream: Vec<FeatureVector> = (0..5).map(|_| FeatureVector::from_codes(vec![3, -10, 20])).collect();
        stream.extend((0..3).map(|_| FeatureVector::from_codes(vec![63, 63, -64])));
        let r = e.run_timeline(&stream, TimelineOptions::default(), &cal).unwrap();
        assert_eq!(r.fault_index, Some(5));
        assert_eq!(r.records[5].evaluations, 16);
        assert_eq!(r.records[6].n, 7);
        assert_eq!(r.records.len(), 8);

        let mut e = toy_ensemble(Policy::Adepos, 7);
        let stop = TimelineOptions {
            continue_after_fault: false,
            ..Default::default()
        };
        let r = e.run_timeline(&stream, stop, &cal).unwrap();
        assert_eq!(r.records.len(), 6);

        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(tally_from_timeline_csv(&csv[..]).unwrap(), r.ledger.tally);
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sample_index,e2_bl1,e2_bl2,e2_bl3,e2_bl4,e2_bl5,e2_bl6,e2_bl7,N,T,decision,cum_evaluations,cum_energy_pJ"
        );
        // inactive learners leave empty cells
        assert!(lines.next().unwrap().contains(",,,,,,"));
    }

    #[test]
    fn ceiling_agreement_with_fixed_n() {
        let mut a = toy_ensemble(Policy::Adepos, 7);
        let f = toy_ensemble(Policy::FixedN, 7);
        let cal = calib(7, a.config());
        let x = FeatureVector::from_codes(vec![63, 63, -64]);
        let mut la = EnergyLedger::new(cal.clone());
        let mut lf = EnergyLedger::new(cal);
        let (s, _) = a.adepos_step(&x, &mut la).unwrap();
        let (d, v) = f.fixed_n_step(&x, &mut lf).unwrap();
        assert_eq!(v.t, 7);
        assert_eq!(s.decision, d);
    }

    #[test]
    fn construction_checks() {
        let cfg = NetworkConfig::new(3, 8, Mode::Boundary).unwrap();
        let mk = |id, seed| BaseLearner::new(id, seed, cfg, UpdateRule::Opium, None).unwrap();
        assert!(matches!(
            Ensemble::new(vec![mk(1, 5), mk(2, 5), mk(3, 6)], Policy::Adepos),
            Err(EnsembleError::DuplicateSeed(5))
        ));
        assert!(Ensemble::new(vec![mk(1, 5), mk(2, 6)], Policy::Adepos).is_err());
        let e = Ensemble::new(vec![mk(1, 5)], Policy::FixedN).unwrap();
        assert_eq!(e.effective_hidden(), 8);
    }
}
