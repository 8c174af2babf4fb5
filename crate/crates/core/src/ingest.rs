//! Run-to-failure datasets: the IMS bearing directory layout, a synthetic
//! surrogate generator, and run manifests.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::features::RawSnapshot;

pub const IMS_SAMPLE_RATE: f64 = 20_000.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no snapshot files in {0}")]
    MissingFiles(PathBuf),
    #[error("{file}:{line}: expected {expected} columns, found {got}")]
    RaggedColumns {
        file: PathBuf,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{file}:{line}: not a number: {token:?}")]
    NonNumeric { file: PathBuf, line: usize, token: String },
    #[error("{file}: channel {column} requested but the file has {available} columns")]
    MissingColumn {
        file: PathBuf,
        column: usize,
        available: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunLabel {
    Failed,
    Survived,
}

impl RunLabel {
    pub fn name(self) -> &'static str {
        match self {
            RunLabel::Failed => "failed",
            RunLabel::Survived => "survived",
        }
    }
}

impl fmt::Display for RunLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunLabel {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "failed" | "fail" | "faulty" => Ok(RunLabel::Failed),
            "survived" | "healthy" => Ok(RunLabel::Survived),
            other => Err(IngestError::Manifest(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BearingRun {
    pub id: String,
    pub label: RunLabel,
    pub snapshots: Vec<RawSnapshot>,
}

/// One bearing inside a multi-channel test directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMapEntry {
    pub id: String,
    pub label: RunLabel,
    pub columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub sample_rate: f64,
    pub entries: Vec<ChannelMapEntry>,
}

impl ChannelMap {
    pub fn new(entries: Vec<ChannelMapEntry>) -> Self {
        Self {
            sample_rate: IMS_SAMPLE_RATE,
            entries,
        }
    }

    /// Every column as its own survived run; handy for ad-hoc directories.
    pub fn single(id: &str, label: RunLabel, columns: Vec<usize>) -> Self {
        Self::new(vec![ChannelMapEntry {
            id: id.to_string(),
            label,
            columns,
        }])
    }
}

/// Bearing map of the three public IMS test sets, `(subdirectory, map)`.
/// Test 1 records two channels per bearing; bearings 3 and 4 failed there,
/// bearing 1 in test 2 and bearing 3 in test 3.
pub fn nasa_channel_maps() -> Vec<(&'static str, ChannelMap)> {
    let entry = |id: &str, failed: bool, columns: Vec<usize>| ChannelMapEntry {
        id: id.to_string(),
        label: if failed { RunLabel::Failed } else { RunLabel::Survived },
        columns,
    };
    vec![
        (
            "1st_test",
            ChannelMap::new(
                (0..4)
                    .map(|b| entry(&format!("t1b{}", b + 1), b >= 2, vec![2 * b, 2 * b + 1]))
                    .collect(),
            ),
        ),
        (
            "2nd_test",
            ChannelMap::new((0..4).map(|b| entry(&format!("t2b{}", b + 1), b == 0, vec![b])).collect()),
        ),
        (
            "3rd_test",
            ChannelMap::new((0..4).map(|b| entry(&format!("t3b{}", b + 1), b == 2, vec![b])).collect()),
        ),
    ]
}

/// Snapshot files of `dir` in timestamp order. IMS file names are
/// fixed-width timestamps, so name order is time order.
pub fn snapshot_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    if files.is_empty() {
        return Err(IngestError::MissingFiles(dir.to_path_buf()));
    }
    files.sort();
    Ok(files)
}

/// Parses one whitespace-separated snapshot into per-column series.
pub fn parse_snapshot(text: &str, file: &Path) -> Result<Vec<Vec<f64>>, IngestError> {
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if columns.is_empty() {
            columns = vec![Vec::new(); tokens.len()];
        } else if tokens.len() != columns.len() {
            return Err(IngestError::RaggedColumns {
                file: file.to_path_buf(),
                line: line_no,
                expected: columns.len(),
                got: tokens.len(),
            });
        }
        for (col, tok) in columns.iter_mut().zip(&tokens) {
            let v: f64 = tok.parse().map_err(|_| IngestError::NonNumeric {
                file: file.to_path_buf(),
                line: line_no,
                token: tok.to_string(),
            })?;
            if !v.is_finite() {
                return Err(IngestError::NonNumeric {
                    file: file.to_path_buf(),
                    line: line_no,
                    token: tok.to_string(),
                });
            }
            col.push(v);
        }
    }
    Ok(columns)
}

/// Streams the directory one file at a time, handing each map entry its
/// snapshot. Avoids holding a whole test set in memory.
pub fn for_each_ims_snapshot(
    dir: &Path,
    map: &ChannelMap,
    mut visit: impl FnMut(usize, RawSnapshot) -> Result<(), IngestError>,
) -> Result<usize, IngestError> {
    let files = snapshot_files(dir)?;
    for file in &files {
        let text = fs::read_to_string(file).map_err(io_err(file))?;
        let columns = parse_snapshot(&text, file)?;
        let timestamp = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        for (e, entry) in map.entries.iter().enumerate() {
            let channels = entry
                .columns
                .iter()
                .map(|&c| {
                    columns.get(c).cloned().ok_or_else(|| IngestError::MissingColumn {
                        file: file.clone(),
                        column: c,
                        available: columns.len(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            visit(
                e,
                RawSnapshot {
                    channels,
                    sample_rate: map.sample_rate,
                    timestamp: timestamp.clone(),
                },
            )?;
        }
    }
    Ok(files.len())
}

/// Loads every snapshot of `dir` into one run per map entry.
pub fn load_ims(dir: &Path, map: &ChannelMap) -> Result<Vec<BearingRun>, IngestError> {
    let mut runs: Vec<BearingRun> = map
        .entries
        .iter()
        .map(|e| BearingRun {
            id: e.id.clone(),
            label: e.label,
            snapshots: Vec::new(),
        })
        .collect();
    for_each_ims_snapshot(dir, map, |e, snap| {
        runs[e].snapshots.push(snap);
        Ok(())
    })?;
    Ok(runs)
}

/// Synthetic bearing: two shaft harmonics over AR(1) noise, plus a train of
/// decaying resonance bursts whose amplitude steps up at onset and ramps to
/// full severity.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub id: String,
    /// Number of snapshots.
    pub length: usize,
    /// First faulty snapshot; `length` means the bearing survives.
    pub fault_onset: usize,
    /// Snapshots from onset to full severity.
    pub fault_ramp: usize,
    /// Stationary standard deviation of the background noise.
    pub noise: f64,
    pub seed: u64,
    pub snapshot_len: usize,
    pub sample_rate: f64,
    /// Burst amplitude at full severity.
    pub fault_gain: f64,
    /// Fraction of full severity reached at onset.
    pub fault_step: f64,
}

const SHAFT_HZ: [f64; 2] = [50.0, 150.0];
const SHAFT_AMP: [f64; 2] = [1.0, 0.35];
const AMP_JITTER: f64 = 0.03;
const AR_COEF: f64 = 0.5;
const BURST_RATE_HZ: f64 = 157.0;
const BURST_RES_HZ: f64 = 3_000.0;
const BURST_TAU: f64 = 20.0;
const BURST_JITTER: f64 = 0.2;

impl SynthSpec {
    pub fn survived(id: &str, length: usize, seed: u64) -> Self {
        Self {
            id: id.to_string(),
            length,
            fault_onset: length,
            fault_ramp: (length / 5).max(1),
            noise: 0.25,
            seed,
            snapshot_len: 2048,
            sample_rate: IMS_SAMPLE_RATE,
            fault_gain: 3.0,
            fault_step: 0.35,
        }
    }

    pub fn failing(id: &str, length: usize, onset: usize, seed: u64) -> Self {
        Self {
            fault_onset: onset,
            ..Self::survived(id, length, seed)
        }
    }

    pub fn label(&self) -> RunLabel {
        if self.fault_onset < self.length {
            RunLabel::Failed
        } else {
            RunLabel::Survived
        }
    }

    fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::BadSpec(m.to_string()));
        if self.fault_onset > self.length {
            return bad("fault_onset exceeds length");
        }
        if self.length == 0 || self.snapshot_len < 4 {
            return bad("need at least one snapshot of 4 samples");
        }
        if self.fault_ramp == 0 {
            return bad("fault_ramp must be positive");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad("sample_rate must be positive");
        }
        if !(self.fault_gain.is_finite() && self.fault_gain >= 0.0) || !(0.0..=1.0).contains(&self.fault_step) {
            return bad("fault_gain must be non-negative and fault_step in [0, 1]");
        }
        Ok(())
    }

    /// Fault severity in `[0, 1]` of snapshot `t`.
    pub fn severity(&self, t: usize) -> f64 {
        if t < self.fault_onset {
            return 0.0;
        }
        let progress = ((t - self.fault_onset + 1) as f64 / self.fault_ramp as f64).min(1.0);
        self.fault_step + (1.0 - self.fault_step) * progress
    }

    /// RMS of the generator's signal model at snapshot `t`, ignoring jitter.
    pub fn expected_rms(&self, t: usize) -> f64 {
        let harmonic: f64 = SHAFT_AMP.iter().map(|a| a * a / 2.0).sum();
        let a = self.fault_gain * self.severity(t);
        let burst = a * a * (BURST_TAU / 4.0) * BURST_RATE_HZ / self.sample_rate;
        (harmonic + self.noise * self.noise + burst).sqrt()
    }
}

pub fn synth_run(spec: &SynthSpec) -> Result<BearingRun, IngestError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fs = spec.sample_rate;
    let n = spec.snapshot_len;
    let innovation = spec.noise * (1.0 - AR_COEF * AR_COEF).sqrt();
    let burst_period = fs / BURST_RATE_HZ;
    let burst_len = (8.0 * BURST_TAU) as usize;
    let mut snapshots = Vec::with_capacity(spec.length);
    let mut ar = 0.0f64;
    for t in 0..spec.length {
        let mut x = vec![0.0; n];
        for (h, (&f, &a)) in SHAFT_HZ.iter().zip(&SHAFT_AMP).enumerate() {
            let amp = a * (1.0 + AMP_JITTER * gauss(&mut rng));
            let phase = rng.random::<f64>() * 2.0 * PI + h as f64;
            for (i, v) in x.iter_mut().enumerate() {
                *v += amp * (2.0 * PI * f * i as f64 / fs + phase).sin();
            }
        }
        for v in x.iter_mut() {
            ar = AR_COEF * ar + innovation * gauss(&mut rng);
            *v += ar;
        }
        let a = spec.fault_gain * spec.severity(t);
        if a > 0.0 {
            let mut start = rng.random::<f64>() * burst_period;
            while (start as usize) < n {
                let s0 = start as usize;
                let amp = a * (1.0 + BURST_JITTER * gauss(&mut rng));
                for (j, v) in x[s0..].iter_mut().take(burst_len).enumerate() {
                    let jf = j as f64;
                    *v += amp * (-jf / BURST_TAU).exp() * (2.0 * PI * BURST_RES_HZ * jf / fs).sin();
                }
                start += burst_period;
            }
        }
        snapshots.push(RawSnapshot {
            channels: vec![x],
            sample_rate: fs,
            timestamp: format!("{t:06}"),
        });
    }
    Ok(BearingRun {
        id: spec.id.clone(),
        label: spec.label(),
        snapshots,
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Surrogate for the 12-run corpus: the first `failing` runs fail with onset
/// in the last 40% of life, the rest survive.
pub fn synth_corpus(seed: u64, runs: usize, failing: usize, length: usize) -> Result<Vec<SynthSpec>, IngestError> {
    if failing > runs {
        return Err(IngestError::BadSpec(format!("{failing} failing runs out of {runs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..runs)
        .map(|r| {
            let id = format!("synth-{r:02}");
            let run_seed = rng.random::<u64>();
            let onset_frac = 0.6 + 0.2 * rng.random::<f64>();
            if r < failing {
                SynthSpec::failing(&id, length, (length as f64 * onset_frac) as usize, run_seed)
            } else {
                SynthSpec::survived(&id, length, run_seed)
            }
        })
        .collect())
}

/// One manifest line: a run id, its label, and where its data lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: RunLabel,
    pub path: PathBuf,
}

pub fn write_manifest<W: Write>(out: W, entries: &[ManifestEntry]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    let manifest_err = |e: csv::Error| IngestError::Manifest(e.to_string());
    w.write_record(["id", "label", "path"]).map_err(manifest_err)?;
    for e in entries {
        w.write_record([e.id.as_str(), e.label.name(), &e.path.to_string_lossy()])
            .map_err(manifest_err)?;
    }
    w.flush().map_err(|e| IngestError::Manifest(e.to_string()))
}

/// Reads a manifest; relative paths resolve against `base`.
pub fn read_manifest<R: Read>(input: R, base: &Path) -> Result<Vec<ManifestEntry>, IngestError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| IngestError::Manifest(e.to_string()))?;
        if rec.len() != 3 {
            return Err(IngestError::Manifest(format!("expected 3 fields, got {}", rec.len())));
        }
        let path = PathBuf::from(&rec[2]);
        out.push(ManifestEntry {
            id: rec[0].to_string(),
            label: rec[1].parse()?,
            path: if path.is_absolute() { path } else { base.join(path) },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{channel_feature, Feature};

    #[test]
    fn empty_directory_is_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let map = ChannelMap::single("a", RunLabel::Survived, vec![0]);
        assert!(matches!(load_ims(dir.path(), &map), Err(IngestError::MissingFiles(_))));
    }

    #[test]
    fn three_line_file_one_channel() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("2004.02.12.10.32.39"),
            "0.1\t-0.2\t0.3\t0.4\n0.5 0.6 0.7 0.8\n-0.9\t1.0\t1.1\t1.2\n",
        )
        .unwrap();
        let map = ChannelMap::single("a", RunLabel::Survived, vec![0]);
        let runs = load_ims(dir.path(), &map).unwrap();
        assert_eq!(runs.len(), 1);
        let s = &runs[0].snapshots[0];
        assert_eq!(s.channels, vec![vec![0.1, 0.5, -0.9]]);
        assert_eq!(s.timestamp, "2004.02.12.10.32.39");
        assert_eq!(s.sample_rate, 20_000.0);
    }

    #[test]
    fn ragged_and_non_numeric_rows() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a");
        fs::write(&f, "1 2\n3 4\n5\n").unwrap();
        let map = ChannelMap::single("a", RunLabel::Survived, vec![0]);
        match load_ims(dir.path(), &map) {
            Err(IngestError::RaggedColumns { line, expected, got, .. }) => assert_eq!((line, expected, got), (3, 2, 1)),
            other => panic!("{other:?}"),
        }
        fs::write(&f, "1 2\n3 x4\n").unwrap();
        match load_ims(dir.path(), &map) {
            Err(IngestError::NonNumeric { line, token, .. }) => assert_eq!((line, token.as_str()), (2, "x4")),
            other => panic!("{other:?}"),
        }
        fs::write(&f, "1 2\n").unwrap();
        let map = ChannelMap::single("a", RunLabel::Survived, vec![2]);
        assert!(matches!(load_ims(dir.path(), &map), Err(IngestError::MissingColumn { column: 2, .. })));
    }

    #[test]
    fn files_load_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("2003.10.22.12.16.24"), "2\n").unwrap();
        fs::write(dir.path().join("2003.10.22.12.06.24"), "1\n").unwrap();
        let map = ChannelMap::single("a", RunLabel::Failed, vec![0]);
        let run = &load_ims(dir.path(), &map).unwrap()[0];
        let first: Vec<f64> = run.snapshots.iter().map(|s| s.channels[0][0]).collect();
        assert_eq!(first, vec![1.0, 2.0]);
        assert_eq!(run.label, RunLabel::Failed);
    }

    #[test]
    fn nasa_map_has_four_failed_of_twelve() {
        let maps = nasa_channel_maps();
        let all: Vec<&ChannelMapEntry> = maps.iter().flat_map(|(_, m)| &m.entries).collect();
        assert_eq!(all.len(), 12);
        assert_eq!(all.iter().filter(|e| e.label == RunLabel::Failed).count(), 4);
    }

    #[test]
    fn spec_validation() {
        let mut s = SynthSpec::survived("x", 10, 1);
        s.fault_onset = 11;
        assert!(matches!(synth_run(&s), Err(IngestError::BadSpec(_))));
        let mut s = SynthSpec::survived("x", 10, 1);
        s.fault_ramp = 0;
        assert!(synth_run(&s).is_err());
    }

    #[test]
    fn same_seed_same_run() {
        let s = SynthSpec::failing("x", 20, 10, 42);
        assert_eq!(synth_run(&s).unwrap(), synth_run(&s).unwrap());
        let other = SynthSpec { seed: 43, ..s.clone() };
        assert_ne!(synth_run(&s).unwrap(), synth_run(&other).unwrap());
    }

    #[test]
    fn expected_rms_rises_strictly_on_the_ramp() {
        let s = SynthSpec::failing("x", 400, 200, 1);
        let healthy = s.expected_rms(0);
        // direct evaluation: harmonics 1 and 0.35 contribute (1 + 0.1225) / 2
        let direct = ((1.0 + 0.35f64 * 0.35) / 2.0 + 0.25 * 0.25).sqrt();
        assert!((healthy - direct).abs() < 1e-12);
        assert_eq!(s.expected_rms(199), healthy);
        assert!(s.expected_rms(200) > healthy);
        for t in 200..200 + s.fault_ramp - 1 {
            assert!(s.expected_rms(t + 1) > s.expected_rms(t), "t = {t}");
        }
    }

    #[test]
    fn measured_rms_follows_expected() {
        let s = SynthSpec::failing("x", 60, 20, 3);
        let run = synth_run(&s).unwrap();
        let rms: Vec<f64> = run
            .snapshots
            .iter()
            .map(|snap| channel_feature(&snap.channels[0], Feature::Rms).unwrap())
            .collect();
        for (t, r) in rms.iter().enumerate() {
            let e = s.expected_rms(t);
            assert!((r / e - 1.0).abs() < 0.15, "t = {t}: {r} vs {e}");
        }
        let early: f64 = rms[20..30].iter().sum::<f64>() / 10.0;
        let late: f64 = rms[50..60].iter().sum::<f64>() / 10.0;
        assert!(late > early);
    }

    #[test]
    fn survived_run_is_stationary() {
        let s = SynthSpec::survived("x", 200, 9);
        let run = synth_run(&s).unwrap();
        assert_eq!(run.label, RunLabel::Survived);
        for feature in [Feature::Rms, Feature::Kurtosis] {
            let v: Vec<f64> = run
                .snapshots
                .iter()
                .map(|snap| channel_feature(&snap.channels[0], feature).unwrap())
                .collect();
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let all = mean(&v);
            let sd = (v.iter().map(|x| (x - all).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            let drift = (mean(&v[..100]) - mean(&v[100..])).abs();
            assert!(drift < 2.0 * sd, "{feature}: drift {drift} sd {sd}");
        }
    }

    #[test]
    fn corpus_layout() {
        let c = synth_corpus(7, 12, 4, 100).unwrap();
        assert_eq!(c.len(), 12);
        assert_eq!(c.iter().filter(|s| s.label() == RunLabel::Failed).count(), 4);
        for s in &c[..4] {
            assert!((60..80).contains(&s.fault_onset));
        }
        assert_eq!(c, synth_corpus(7, 12, 4, 100).unwrap());
        assert!(synth_corpus(7, 3, 4, 100).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![
            ManifestEntry {
                id: "a".into(),
                label: RunLabel::Failed,
                path: PathBuf::from("a.csv"),
            },
            ManifestEntry {
                id: "b".into(),
                label: RunLabel::Survived,
                path: PathBuf::from("/abs/b.csv"),
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&mut buf, &entries).unwrap();
        let back = read_manifest(&buf[..], Path::new("/base")).unwrap();
        assert_eq!(back[0].path, PathBuf::from("/base/a.csv"));
        assert_eq!(back[1], entries[1]);
        assert_eq!(back[0].label, RunLabel::Failed);
        assert!(read_manifest("id,label,path\na,broken,x\n".as_bytes(), Path::new(".")).is_err());
    }
}
