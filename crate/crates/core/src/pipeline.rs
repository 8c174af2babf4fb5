//! End to end: load runs, train each detector on its early-life window,
//! calibrate thresholds, infer the remainder, and write every report.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{
    default_k_grid, healthy_errors, loo_sweep, CalibrationError, ErrorStats, RunScores, ThresholdModel, ValidationReport,
};
use crate::energy::{
    lifetime_energy, operating_point, write_energy_csv, EnergyCalibration, EnergyLedger, EnergySummaryRow,
    OPERATING_POINTS,
};
use crate::ensemble::{Ensemble, EnsembleSpec, Policy, TimelineOptions, TimelineReport, DEFAULT_SEEDS};
use crate::features::{
    extract, fit_scaler, read_feature_csv, write_feature_csv, Feature, FeatureSelection, FeatureVector, RawSnapshot,
    Scaler, DEFAULT_FEATURES,
};
use crate::fxp::FxpFormat;
use crate::ingest::{
    for_each_ims_snapshot, nasa_channel_maps, read_manifest, synth_corpus, synth_run, write_manifest, ManifestEntry,
    RunLabel,
};
use crate::network::{Arithmetic, Mode, NetworkConfig};
use crate::training::record::{decode_learner, encode_learner, Reader, RecordError, Writer};
use crate::training::UpdateRule;
use crate::{Error, Result};

/// Flat run configuration. Every default is the flagship configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ensemble_size: usize,
    /// PRBS seed per learner; defaults to the built-in seed list.
    pub seeds: Option<Vec<u16>>,
    pub hidden: usize,
    /// `reconstruction` or `boundary`.
    pub mode: String,
    /// `opium`, `opium-lite` or `oselm`.
    pub rule: String,
    /// `fixed` or `float`.
    pub arithmetic: String,
    pub word_bits: u8,
    pub weight_bits: u8,
    pub theta_init: Option<f64>,
    pub boundary_target: f64,
    pub k: u32,
    pub k_min: u32,
    pub k_max: u32,
    /// Early-life snapshots used for training and threshold statistics.
    pub training_window: usize,
    pub operating_point: String,
    /// `adepos` or `fixed-n`.
    pub policy: String,
    pub debounce: usize,
    pub features: Vec<String>,
    /// `synthetic`, `ims` or `manifest`.
    pub source: String,
    pub synth_seed: u64,
    pub synth_runs: usize,
    pub synth_failing: usize,
    pub synth_length: usize,
    pub synth_snapshot_len: usize,
    pub synth_noise: f64,
    /// Root holding the IMS test-set directories.
    pub data_dir: Option<PathBuf>,
    /// CSV of `id,label,path` pointing at feature CSV files.
    pub manifest: Option<PathBuf>,
    /// Run the leave-one-out k sweep as part of the pipeline.
    pub sweep: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 7,
            seeds: None,
            hidden: 32,
            mode: "reconstruction".into(),
            rule: "opium".into(),
            arithmetic: "fixed".into(),
            word_bits: 16,
            weight_bits: 8,
            theta_init: None,
            boundary_target: 1.0,
            k: 50,
            k_min: 10,
            k_max: 100,
            training_window: 300,
            operating_point: "0.75V/10MHz".into(),
            policy: "adepos".into(),
            debounce: 1,
            features: DEFAULT_FEATURES.iter().map(|f| f.name().to_string()).collect(),
            source: "synthetic".into(),
            synth_seed: 2022,
            synth_runs: 12,
            synth_failing: 4,
            synth_length: 1000,
            synth_snapshot_len: 2048,
            synth_noise: 0.25,
            data_dir: None,
            manifest: None,
            sweep: true,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value`, where `value` is TOML (bare words are taken as
    /// strings).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(config_err)?;
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        let next: Self = table.try_into().map_err(config_err)?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.mode()?;
        self.rule()?;
        self.policy()?;
        self.arithmetic()?;
        self.feature_list()?;
        operating_point(&self.operating_point)?;
        let seeds = self.seeds();
        if seeds.len() != self.ensemble_size {
            return Err(config_err(format!(
                "{} seeds for an ensemble of {}",
                seeds.len(),
                self.ensemble_size
            )));
        }
        if self.training_window < 2 {
            return Err(config_err("training_window must be at least 2"));
        }
        if !(10..=100).contains(&self.k) || self.k_min > self.k_max || self.k_min < 10 || self.k_max > 100 {
            return Err(config_err("k, k_min and k_max must lie in 10..=100"));
        }
        if !matches!(self.source.as_str(), "synthetic" | "ims" | "manifest") {
            return Err(config_err(format!("unknown source {:?}", self.source)));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u16> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => DEFAULT_SEEDS.iter().copied().cycle().take(self.ensemble_size).collect(),
        }
    }

    pub fn mode(&self) -> Result<Mode> {
        match self.mode.to_ascii_lowercase().as_str() {
            "reconstruction" | "autoencoder" | "elm-ae" => Ok(Mode::Reconstruction),
            "boundary" | "elm-b" => Ok(Mode::Boundary),
            other => Err(config_err(format!("unknown mode {other:?}"))),
        }
    }

    pub fn rule(&self) -> Result<UpdateRule> {
        Ok(self.rule.parse()?)
    }

    pub fn policy(&self) -> Result<Policy> {
        Ok(self.policy.parse()?)
    }

    pub fn arithmetic(&self) -> Result<Arithmetic> {
        match self.arithmetic.to_ascii_lowercase().as_str() {
            "fixed" => Ok(Arithmetic::Fixed(FxpFormat::for_word_bits(self.word_bits)?)),
            "float" => Ok(Arithmetic::FloatReference),
            other => Err(config_err(format!("unknown arithmetic {other:?}"))),
        }
    }

    pub fn feature_list(&self) -> Result<Vec<Feature>> {
        Ok(self
            .features
            .iter()
            .map(|f| f.parse())
            .collect::<Result<Vec<Feature>, _>>()?)
    }

    pub fn network(&self, inputs: usize) -> Result<NetworkConfig> {
        Ok(NetworkConfig::new(inputs, self.hidden, self.mode()?)?
            .with_arithmetic(self.arithmetic()?)?
            .with_weight_bits(self.weight_bits)?
            .with_boundary_target(self.boundary_target)?)
    }

    pub fn ensemble_spec(&self, inputs: usize) -> Result<EnsembleSpec> {
        Ok(EnsembleSpec {
            seeds: self.seeds(),
            network: self.network(inputs)?,
            rule: self.rule()?,
            theta_init: self.theta_init,
            policy: self.policy()?,
        })
    }

    pub fn k_grid(&self) -> Vec<u32> {
        default_k_grid()
            .into_iter()
            .filter(|k| (self.k_min..=self.k_max).contains(k))
            .collect()
    }
}

/// Raw (unscaled) features of one run, one row per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub id: String,
    pub label: RunLabel,
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl RunData {
    pub fn from_snapshots(
        id: &str,
        label: RunLabel,
        snapshots: &[RawSnapshot],
        features: &[Feature],
    ) -> Result<Self> {
        let channels = snapshots.first().map_or(1, |s| s.channels.len());
        let selection = FeatureSelection::per_channel(channels, features)?;
        let rows = snapshots
            .iter()
            .map(|s| Ok((s.timestamp.clone(), extract(s, &selection)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: id.to_string(),
            label,
            names: selection.column_names(),
            rows,
        })
    }

    pub fn raw(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|(_, r)| r.clone()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = create(path)?;
        write_feature_csv(BufWriter::new(f), &self.names, &self.rows)?;
        Ok(())
    }

    pub fn read_csv(id: &str, label: RunLabel, path: &Path) -> Result<Self> {
        let f = open(path)?;
        let (names, rows) = read_feature_csv(f)?;
        Ok(Self {
            id: id.to_string(),
            label,
            names,
            rows,
        })
    }
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut f = create(path)?;
    f.write_all(bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads every run named by the configuration as raw features.
pub fn load_runs(cfg: &RunConfig) -> Result<Vec<RunData>> {
    let features = cfg.feature_list()?;
    match cfg.source.as_str() {
        "synthetic" => {
            let specs = synth_corpus(cfg.synth_seed, cfg.synth_runs, cfg.synth_failing, cfg.synth_length)?;
            specs
                .into_iter()
                .map(|mut s| {
                    s.snapshot_len = cfg.synth_snapshot_len;
                    s.noise = cfg.synth_noise;
                    let run = synth_run(&s)?;
                    RunData::from_snapshots(&run.id, run.label, &run.snapshots, &features)
                })
                .collect()
        }
        "ims" => {
            let root = cfg
                .data_dir
                .as_deref()
                .ok_or_else(|| config_err("source = \"ims\" needs data_dir"))?;
            load_ims_features(root, &features)
        }
        "manifest" => {
            let path = cfg
                .manifest
                .as_deref()
                .ok_or_else(|| config_err("source = \"manifest\" needs manifest"))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let entries = read_manifest(open(path)?, base)?;
            entries
                .iter()
                .map(|e| RunData::read_csv(&e.id, e.label, &e.path))
                .collect()
        }
        other => Err(config_err(format!("unknown source {other:?}"))),
    }
}

/// Streams every IMS test set found under `root` straight into features.
pub fn load_ims_features(root: &Path, features: &[Feature]) -> Result<Vec<RunData>> {
    let mut out = Vec::new();
    for (sub, map) in nasa_channel_maps() {
        let dir = root.join(sub);
        if !dir.is_dir() {
            log::warn!("{} not found, skipping", dir.display());
            continue;
        }
        let selections = map
            .entries
            .iter()
            .map(|e| FeatureSelection::per_channel(e.columns.len(), features))
            .collect::<Result<Vec<_>, _>>()?;
        let mut runs: Vec<RunData> = map
            .entries
            .iter()
            .zip(&selections)
            .map(|(e, sel)| RunData {
                id: e.id.clone(),
                label: e.label,
                names: sel.column_names(),
                rows: Vec::new(),
            })
            .collect();
        let mut failure = None;
        for_each_ims_snapshot(&dir, &map, |e, snap| {
            match extract(&snap, &selections[e]) {
                Ok(row) => runs[e].rows.push((snap.timestamp, row)),
                Err(err) if failure.is_none() => failure = Some(err),
                Err(_) => {}
            }
            Ok(())
        })?;
        if let Some(err) = failure {
            return Err(err.into());
        }
        out.extend(runs);
    }
    if out.is_empty() {
        return Err(crate::ingest::IngestError::MissingFiles(root.to_path_buf()).into());
    }
    Ok(out)
}

/// A trained and calibrated detector plus the scaler fitted on its window.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub ensemble: Ensemble,
    pub scaler: Scaler,
    pub feature_names: Vec<String>,
    /// Healthy-error statistics per learner.
    pub stats: Vec<ErrorStats>,
    pub k: u32,
    pub debounce: usize,
    pub operating_point: String,
}

impl Detector {
    pub fn thresholds(&self) -> Result<Vec<ThresholdModel>> {
        Ok(self
            .stats
            .iter()
            .map(|s| s.threshold(self.k))
            .collect::<Result<Vec<_>, CalibrationError>>()?)
    }

    /// Re-derives every `Th_i` at a new `k` from stored statistics.
    pub fn recalibrate(&mut self, k: u32) -> Result<()> {
        let old = self.k;
        self.k = k;
        let th = match self.thresholds() {
            Ok(t) => t,
            Err(e) => {
                self.k = old;
                return Err(e);
            }
        };
        for (l, t) in self.ensemble.learners_mut().iter_mut().zip(&th) {
            l.set_threshold(Some(t.squared()));
        }
        Ok(())
    }

    pub fn scale(&self, raw: &[Vec<f64>]) -> Result<Vec<FeatureVector>> {
        let vecs = raw
            .iter()
            .map(|r| self.scaler.apply(r))
            .collect::<Result<Vec<_>, _>>()?;
        let clamped = vecs.iter().filter(|v| v.clamped()).count();
        if clamped > 0 {
            log::debug!("{clamped} of {} feature vectors clamped", vecs.len());
        }
        Ok(vecs)
    }

    pub fn calibration(&self) -> Result<EnergyCalibration> {
        let cfg = self.ensemble.config();
        let point = operating_point(&self.operating_point)?;
        Ok(EnergyCalibration::new(
            point,
            cfg.macs_per_inference(),
            self.ensemble.size(),
        )?)
    }

    /// Runs the policy over `samples`, numbering them from `start_index`.
    pub fn infer(&mut self, samples: &[FeatureVector], start_index: usize) -> Result<TimelineReport> {
        let cal = self.calibration()?;
        self.ensemble.reset();
        let opts = TimelineOptions {
            debounce: self.debounce,
            start_index,
            ..TimelineOptions::default()
        };
        Ok(self.ensemble.run_timeline(samples, opts, &cal)?)
    }
}

/// Fits the scaler and trains the ensemble on the first
/// `training_window` rows, then calibrates thresholds at `cfg.k`. Returns the
/// detector and every row scaled.
pub fn train_detector(cfg: &RunConfig, run: &RunData) -> Result<(Detector, Vec<FeatureVector>)> {
    let raw = run.raw();
    let window = cfg.training_window.min(raw.len());
    if window < 2 {
        return Err(config_err(format!("run {} has only {} snapshots", run.id, raw.len())));
    }
    let scaler = fit_scaler(&raw[..window])?;
    let samples = raw
        .iter()
        .map(|r| scaler.apply(r))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = cfg.ensemble_spec(run.names.len())?;
    let (ensemble, reports) = spec.train(&samples[..window])?;
    if reports.iter().any(|r| r.saturated) {
        log::warn!("run {}: training saturated the datapath", run.id);
    }
    let stats = healthy_errors(&ensemble, &samples[..window])?
        .iter()
        .map(|e| ErrorStats::fit(e))
        .collect::<Result<Vec<_>, _>>()?;
    let mut det = Detector {
        ensemble,
        scaler,
        feature_names: run.names.clone(),
        stats,
        k: cfg.k,
        debounce: cfg.debounce,
        operating_point: cfg.operating_point.clone(),
    };
    det.recalibrate(cfg.k)?;
    Ok((det, samples))
}

const MODEL_MAGIC: &[u8; 8] = b"ADICMODL";
const MODEL_VERSION: u16 = 1;

/// Serializes a detector: header, feature names, scaler, per-learner
/// statistics, then one learner record each, with a CRC32 trailer.
pub fn encode_model(det: &Detector) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MODEL_MAGIC);
    w.u16(MODEL_VERSION);
    w.u32(det.k);
    w.u32(det.debounce as u32);
    w.u8(match det.ensemble.policy() {
        Policy::FixedN => 0,
        Policy::Adepos => 1,
    });
    put_str(&mut w, &det.operating_point);
    w.u16(det.feature_names.len() as u16);
    for n in &det.feature_names {
        put_str(&mut w, n);
    }
    w.u16(det.scaler.dim() as u16);
    for (lo, hi) in det.scaler.min().iter().zip(det.scaler.max()) {
        w.f64(*lo);
        w.f64(*hi);
    }
    w.u8(det.ensemble.size() as u8);
    for (l, s) in det.ensemble.learners().iter().zip(&det.stats) {
        w.f64(s.mu);
        w.f64(s.sigma);
        w.u64(s.count as u64);
        let rec = encode_learner(l, true);
        w.u32(rec.len() as u32);
        w.bytes(&rec);
    }
    w.finish()
}

fn put_str(w: &mut Writer, s: &str) {
    w.u16(s.len() as u16);
    w.bytes(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>) -> Result<String, RecordError> {
    let n = r.u16()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| RecordError::Invalid("non-UTF-8 string".into()))
}

pub fn decode_model(bytes: &[u8]) -> Result<Detector> {
    let mut r = Reader::checked(bytes)?;
    if r.take(8)? != MODEL_MAGIC {
        return Err(RecordError::BadMagic.into());
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(RecordError::UnsupportedVersion(version).into());
    }
    let k = r.u32()?;
    let debounce = r.u32()? as usize;
    let policy = match r.u8()? {
        0 => Policy::FixedN,
        1 => Policy::Adepos,
        x => return Err(RecordError::Invalid(format!("policy {x}")).into()),
    };
    let point = get_str(&mut r)?;
    let names = (0..r.u16()?).map(|_| get_str(&mut r)).collect::<Result<Vec<_>, _>>()?;
    let dim = r.u16()? as usize;
    let mut lo = Vec::with_capacity(dim);
    let mut hi = Vec::with_capacity(dim);
    for _ in 0..dim {
        lo.push(r.f64()?);
        hi.push(r.f64()?);
    }
    let scaler = Scaler::from_bounds(lo, hi)?;
    let count = r.u8()? as usize;
    let mut stats = Vec::with_capacity(count);
    let mut learners = Vec::with_capacity(count);
    for _ in 0..count {
        let mu = r.f64()?;
        let sigma = r.f64()?;
        let n = r.u64()? as usize;
        stats.push(ErrorStats { mu, sigma, count: n });
        let len = r.u32()? as usize;
        learners.push(decode_learner(r.take(len)?)?);
    }
    r.done()?;
    Ok(Detector {
        ensemble: Ensemble::new(learners, policy)?,
        scaler,
        feature_names: names,
        stats,
        k,
        debounce,
        operating_point: point,
    })
}

pub fn save_model(det: &Detector, path: &Path) -> Result<()> {
    write_file(path, &encode_model(det))
}

pub fn load_model(path: &Path) -> Result<Detector> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    decode_model(&bytes)
}

/// Outcome of one run through the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub id: String,
    pub label: RunLabel,
    pub snapshots: usize,
    pub fault_index: Option<usize>,
    pub evaluations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub runs: Vec<RunOutcome>,
    pub validation: Option<ValidationReport>,
    pub energy: Vec<EnergySummaryRow>,
}

impl PipelineOutcome {
    pub fn any_fault(&self) -> bool {
        self.runs.iter().any(|r| r.fault_index.is_some())
    }
}

/// Everything about one run that the pipeline computes before writing.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub data: RunData,
    pub detector: Detector,
    pub timeline: TimelineReport,
    pub scores: RunScores,
}

/// Trains, calibrates and infers one run.
pub fn process_run(cfg: &RunConfig, run: RunData) -> Result<RunResult> {
    let (mut detector, samples) = train_detector(cfg, &run)?;
    let window = cfg.training_window.min(samples.len());
    let scores = RunScores::collect(&run.id, run.label, &detector.ensemble, &samples, window)?;
    let timeline = detector.infer(&samples[window..], window)?;
    Ok(RunResult {
        data: run,
        detector,
        timeline,
        scores,
    })
}

/// Energy summary over a merged ledger at every operating point that has an
/// inference calibration.
pub fn energy_rows(ledger: &EnergyLedger, policy: Policy) -> Result<Vec<EnergySummaryRow>> {
    let cal = &ledger.calibration;
    let mut rows = Vec::new();
    for point in OPERATING_POINTS.iter().filter(|p| p.infer_pj_per_op.is_some()) {
        let c = EnergyCalibration::new(point, cal.ops_per_bl, cal.ensemble_size)?;
        let life = lifetime_energy(&ledger.tally, &c)?;
        rows.push(EnergySummaryRow {
            operating_point: point.name.to_string(),
            policy: policy.name().to_string(),
            total_pj: life.total_pj,
            pj_per_op_normalized: life.pj_per_op_normalized,
            alphas: ledger.tally.alphas(),
        });
    }
    Ok(rows)
}

/// Runs the whole pipeline and writes its artifacts under `out`:
/// `features/`, `models/`, `timelines/`, `manifest.csv`, `summary.csv`,
/// `energy.csv` and, when the sweep is enabled, `validation.csv`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let runs = load_runs(cfg)?;
    let results = runs
        .into_iter()
        .map(|r| process_run(cfg, r))
        .collect::<Result<Vec<_>>>()?;
    write_artifacts(cfg, &results, out)
}

pub fn write_artifacts(cfg: &RunConfig, results: &[RunResult], out: &Path) -> Result<PipelineOutcome> {
    fs::create_dir_all(out).map_err(io_at(out))?;
    let policy = cfg.policy()?;
    let mut manifest = Vec::new();
    let mut outcomes = Vec::new();
    let mut merged: Option<EnergyLedger> = None;
    for r in results {
        let feat = PathBuf::from("features").join(format!("{}.csv", r.data.id));
        r.data.write_csv(&out.join(&feat))?;
        manifest.push(ManifestEntry {
            id: r.data.id.clone(),
            label: r.data.label,
            path: feat,
        });
        save_model(&r.detector, &out.join("models").join(format!("{}.adic", r.data.id)))?;
        let tl = out.join("timelines").join(format!("{}.csv", r.data.id));
        let f = create(&tl)?;
        r.timeline.write_csv(BufWriter::new(f)).map_err(io_at(&tl))?;
        match merged.as_mut() {
            Some(m) => m.merge(&r.timeline.ledger)?,
            None => merged = Some(r.timeline.ledger.clone()),
        }
        outcomes.push(RunOutcome {
            id: r.data.id.clone(),
            label: r.data.label,
            snapshots: r.data.rows.len(),
            fault_index: r.timeline.fault_index,
            evaluations: r.timeline.evaluations(),
        });
    }
    write_manifest(create(&out.join("manifest.csv"))?, &manifest)?;

    let summary = out.join("summary.csv");
    {
        use std::io::Write;
        let mut w = BufWriter::new(create(&summary)?);
        let mut body = String::from("id,label,snapshots,fault_index,evaluations\n");
        for o in &outcomes {
            let idx = o.fault_index.map(|i| i.to_string()).unwrap_or_default();
            body.push_str(&format!("{},{},{},{idx},{}\n", o.id, o.label, o.snapshots, o.evaluations));
        }
        w.write_all(body.as_bytes()).map_err(io_at(&summary))?;
    }

    let energy = match &merged {
        Some(ledger) => energy_rows(ledger, policy)?,
        None => Vec::new(),
    };
    let ep = out.join("energy.csv");
    write_energy_csv(BufWriter::new(create(&ep)?), &energy).map_err(io_at(&ep))?;

    let validation = if cfg.sweep && results.len() >= 2 {
        let scores: Vec<RunScores> = results.iter().map(|r| r.scores.clone()).collect();
        let report = match loo_sweep(&scores, &cfg.k_grid(), policy, cfg.debounce) {
            Ok(rep) => rep,
            Err(CalibrationError::NoZeroErrorRegion(rep)) => {
                log::warn!("no zero-error k; best trade-off k = {}", rep.k_star);
                *rep
            }
            Err(e) => return Err(e.into()),
        };
        let vp = out.join("validation.csv");
        report.write_csv(BufWriter::new(create(&vp)?)).map_err(io_at(&vp))?;
        Some(report)
    } else {
        None
    };
    Ok(PipelineOutcome {
        runs: outcomes,
        validation,
        energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            synth_runs: 3,
            synth_failing: 1,
            synth_length: 120,
            synth_snapshot_len: 512,
            training_window: 60,
            ..RunConfig::default()
        }
    }

    #[test]
    fn defaults_are_the_flagship_configuration() {
        let c = RunConfig::default();
        assert_eq!((c.ensemble_size, c.hidden, c.k, c.training_window), (7, 32, 50, 300));
        assert_eq!(c.operating_point, "0.75V/10MHz");
        assert_eq!(c.policy().unwrap(), Policy::Adepos);
        assert_eq!(c.mode().unwrap(), Mode::Reconstruction);
        assert_eq!(c.seeds(), DEFAULT_SEEDS.to_vec());
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = RunConfig::from_toml("k = 40\npolicy = \"fixed-n\"\n").unwrap();
        assert_eq!(c.k, 40);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("k = 5").is_err());
        assert_eq!(RunConfig::from_toml("ensemble_size = 5").unwrap().seeds().len(), 5);
        assert!(RunConfig::from_toml("ensemble_size = 5\nseeds = [1, 2, 3]").is_err());
        let mut c = RunConfig::default();
        c.set("hidden", "16").unwrap();
        c.set("rule", "opium-lite").unwrap();
        c.set("seeds", "[1, 2, 3]").unwrap_err();
        assert_eq!((c.hidden, c.rule.as_str()), (16, "opium-lite"));
        assert!(c.set("k", "200").is_err());
        assert_eq!(c.k, 50);
    }

    #[test]
    fn model_round_trip() {
        let cfg = small();
        let run = load_runs(&cfg).unwrap().remove(0);
        let (det, samples) = train_detector(&cfg, &run).unwrap();
        let back = decode_model(&encode_model(&det)).unwrap();
        assert_eq!(back, det);
        let mut a = det.clone();
        let mut b = back;
        assert_eq!(a.infer(&samples, 0).unwrap(), b.infer(&samples, 0).unwrap());
        let mut bytes = encode_model(&det);
        bytes[12] ^= 1;
        assert!(matches!(
            decode_model(&bytes),
            Err(Error::Record(RecordError::ChecksumMismatch { .. }))
        ));
    }

    #[test]
    fn recalibration_is_linear_in_k() {
        let cfg = small();
        let run = load_runs(&cfg).unwrap().remove(1);
        let (mut det, _) = train_detector(&cfg, &run).unwrap();
        let at = |d: &Detector| d.thresholds().unwrap();
        det.recalibrate(20).unwrap();
        let t20 = at(&det);
        det.recalibrate(40).unwrap();
        let t40 = at(&det);
        for (a, b) in t20.iter().zip(&t40) {
            let (da, db) = (a.thr - a.mu_e, b.thr - b.mu_e);
            assert!((db - 2.0 * da).abs() <= 1e-12 * db.abs().max(1.0));
        }
        assert!(det.recalibrate(5).is_err());
        assert_eq!(det.k, 40);
        let th: Vec<f64> = det.ensemble.thresholds().into_iter().map(Option::unwrap).collect();
        assert_eq!(th, t40.iter().map(|t| t.squared()).collect::<Vec<_>>());
    }

    #[test]
    fn per_learner_thresholds_differ() {
        let cfg = small();
        let run = load_runs(&cfg).unwrap().remove(2);
        let (det, _) = train_detector(&cfg, &run).unwrap();
        let th = det.thresholds().unwrap();
        for i in 0..th.len() {
            for j in i + 1..th.len() {
                assert_ne!(th[i].thr, th[j].thr, "learners {i} and {j}");
            }
        }
    }

    #[test]
    fn feature_csv_replay_matches_raw_ingestion() {
        let cfg = small();
        let run = load_runs(&cfg).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        run.write_csv(&p).unwrap();
        let back = RunData::read_csv(&run.id, run.label, &p).unwrap();
        assert_eq!(back, run);
        let a = process_run(&cfg, run).unwrap();
        let b = process_run(&cfg, back).unwrap();
        assert_eq!(a.timeline, b.timeline);
    }
}
